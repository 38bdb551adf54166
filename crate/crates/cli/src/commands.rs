use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use g3dk_core::config::RunConfig;
use g3dk_core::gradsuite::{block_suite, model_suite, op_suite, UnitCheck};
use g3dk_core::model::{
    evaluate, prepare_episodes, train, Ablation, EvalReport, Grounder, Mode, OracleGrounder, PreparedEpisode, ProposalSetting, RandomGrounder,
    StepLog, ToyGrounder,
};
use g3dk_core::se_attention::{bench_attention, flops_estimate, AttentionMode};
use g3dk_core::synthscene::{generate_episodes, read_dataset, write_dataset};

use crate::error::CliError;

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];
pub const ABLATION_HEADER: &str = "variant,seeds,acc@0.25,acc@0.5,unique@0.25,multiple@0.25,category_acc";
pub const BENCH_HEADER: &str =
    "views,patches,dim,divided_entries,joint_entries,entry_ratio,analytic_ratio,divided_flops,joint_flops,divided_ms,joint_ms,time_ratio";

/// Loads the config file (defaults when absent) and applies `G3DK_SEED`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn gen(cfg: &RunConfig, seed: u64, count: usize, out: &Path) -> Result<String, CliError> {
    let (episodes, summary) = generate_episodes(seed, count, &cfg.data.gen)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_dataset(out, &episodes)?;
    Ok(format!(
        "episodes {} unique {} multiple {} skipped {}",
        summary.episodes, summary.unique, summary.multiple, summary.skipped
    ))
}

fn prepared(cfg: &RunConfig, data: &Path, setting: ProposalSetting) -> Result<Vec<PreparedEpisode>, CliError> {
    let episodes = read_dataset(data)?;
    Ok(prepare_episodes(&episodes, &cfg.model, setting)?)
}

pub fn log_header(with_recon: bool) -> &'static str {
    if with_recon {
        "step,L_ground,L_recon,L_lang,total"
    } else {
        "step,L_ground,L_lang,total"
    }
}

fn log_row(out: &mut String, r: &StepLog) {
    match r.recon {
        Some(recon) => writeln!(out, "{},{},{},{},{}", r.step, r.ground, recon, r.lang, r.total),
        None => writeln!(out, "{},{},{},{}", r.step, r.ground, r.lang, r.total),
    }
    .expect("write to string");
}

/// Trains from scratch; returns the checkpoint bytes and the step log CSV.
pub fn train_model(cfg: &RunConfig, data: &[PreparedEpisode]) -> Result<(ToyGrounder, String), CliError> {
    let mut model = ToyGrounder::new(cfg.model.clone(), Mode::Train)?;
    let mut log = format!("{}\n", log_header(model.has_recon()));
    let total_steps = data.len().div_ceil(cfg.model.train.batch_size) * cfg.model.train.epochs;
    let result = train(&mut model, data, |r| {
        log_row(&mut log, r);
        if (r.step + 1) % 50 == 0 || r.step + 1 == total_steps {
            log::info!("step {}/{} total {:.4}", r.step + 1, total_steps, r.total);
        }
    });
    result?;
    Ok((model, log))
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, log_path: &Path) -> Result<String, CliError> {
    let prepared = prepared(cfg, data, ProposalSetting::GroundTruth)?;
    let (model, log) = train_model(cfg, &prepared)?;
    write_text(log_path, &log)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(out, model.save()).map_err(|e| CliError::io(out, e))?;
    Ok(format!("trained {} parameters on {} episodes", model.num_parameters(), prepared.len()))
}

pub enum Source<'a> {
    Checkpoint(&'a Path),
    Oracle,
    Random,
}

pub fn proposal_setting(cfg: &RunConfig, jitter: bool) -> ProposalSetting {
    if jitter {
        ProposalSetting::Jitter {
            sigma_scale: cfg.data.jitter_scale,
            sigma_center: cfg.data.jitter_center,
            seed: cfg.model.seed,
        }
    } else {
        ProposalSetting::GroundTruth
    }
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<ToyGrounder, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut model = ToyGrounder::new(cfg.model.clone(), Mode::Infer)?;
    model.load(&bytes)?;
    Ok(model)
}

pub fn eval_cmd(cfg: &RunConfig, source: Source<'_>, data: &Path, jitter: bool) -> Result<EvalReport, CliError> {
    let episodes = prepared(cfg, data, proposal_setting(cfg, jitter))?;
    let model;
    let grounder: &dyn Grounder = match source {
        Source::Checkpoint(path) => {
            model = load_model(cfg, path)?;
            &model
        }
        Source::Oracle => &OracleGrounder,
        Source::Random => &RandomGrounder { seed: cfg.model.seed },
    };
    Ok(evaluate(grounder, &episodes, &THRESHOLDS)?)
}

/// Mean metrics of one ablation variant over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: Ablation,
    pub seeds: usize,
    pub acc25: f64,
    pub acc50: f64,
    pub unique25: f64,
    pub multiple25: f64,
    pub category: f64,
}

impl VariantRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant.name(),
            self.seeds,
            self.acc25,
            self.acc50,
            self.unique25,
            self.multiple25,
            self.category
        )
    }
}

/// Trains and evaluates every ablation variant with seeds `seed..seed + seeds`.
pub fn ablate(cfg: &RunConfig, train_data: &Path, test_data: &Path, seeds: usize) -> Result<Vec<VariantRow>, CliError> {
    let train_eps = read_dataset(train_data)?;
    let test_eps = read_dataset(test_data)?;
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let mut sums = [0.0; 5];
        for s in 0..seeds {
            let mut run = cfg.clone();
            run.model = variant.apply(&cfg.model);
            run.model.seed = cfg.model.seed + s as u64;
            let tr = prepare_episodes(&train_eps, &run.model, ProposalSetting::GroundTruth)?;
            let te = prepare_episodes(&test_eps, &run.model, ProposalSetting::GroundTruth)?;
            let (trained, _) = train_model(&run, &tr)?;
            let mut model = ToyGrounder::new(run.model.clone(), Mode::Infer)?;
            model.load(&trained.save())?;
            let r = evaluate(&model, &te, &THRESHOLDS)?;
            let vals = [
                r.overall.accuracy(0),
                r.overall.accuracy(1),
                r.unique.accuracy(0),
                r.multiple.accuracy(0),
                r.category_accuracy(),
            ];
            for (acc, v) in sums.iter_mut().zip(vals) {
                *acc += v;
            }
            log::info!("{} seed {}: acc@0.25 {:.3}", variant.name(), run.model.seed, vals[0]);
        }
        let n = seeds.max(1) as f64;
        rows.push(VariantRow {
            variant,
            seeds,
            acc25: sums[0] / n,
            acc50: sums[1] / n,
            unique25: sums[2] / n,
            multiple25: sums[3] / n,
            category: sums[4] / n,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[VariantRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

pub enum Scope {
    Op,
    Block,
    Model,
}

pub fn gradcheck(scope: Scope, seed: u64) -> Result<Vec<UnitCheck>, CliError> {
    let numeric = |e: &dyn std::fmt::Display| CliError::Numeric(e.to_string());
    match scope {
        Scope::Op => op_suite(20).map_err(|e| numeric(&e)),
        Scope::Block => block_suite(seed).map_err(|e| numeric(&e)),
        Scope::Model => Ok(vec![model_suite(seed)?]),
    }
}

pub fn gradcheck_report(units: &[UnitCheck]) -> String {
    let mut out = String::from("unit,worst_rel_err,threshold,status\n");
    for u in units {
        let status = if u.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{},{:.3e},{:e},{status}", u.name, u.worst, u.threshold);
    }
    out
}

pub fn bench(views: &[usize], patches: &[usize], dim: usize, heads: usize, reps: usize) -> Result<String, CliError> {
    let mut out = format!("{BENCH_HEADER}\n");
    for &v in views {
        for &n in patches {
            let b = bench_attention(v, n, dim, heads, reps, 0).map_err(|e| CliError::Numeric(e.to_string()))?;
            let analytic = (v * n * n + if v > 1 { n * v * v } else { 0 }) as f64 / ((v * n) as f64).powi(2);
            let (fd, fj) = (
                flops_estimate(v as u64, n as u64, dim as u64, AttentionMode::Divided),
                flops_estimate(v as u64, n as u64, dim as u64, AttentionMode::Joint),
            );
            let _ = writeln!(
                out,
                "{v},{n},{dim},{},{},{},{analytic},{fd},{fj},{:.3},{:.3},{:.4}",
                b.divided_entries,
                b.joint_entries,
                b.divided_entries as f64 / b.joint_entries as f64,
                b.divided_secs * 1e3,
                b.joint_secs * 1e3,
                b.divided_secs / b.joint_secs
            );
        }
    }
    Ok(out)
}

pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.csv");
    checkpoint.with_file_name(name)
}
