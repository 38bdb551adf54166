//! Flat `key = value` run configuration. Keys are dotted (`train.lr`), `#`
//! starts a comment, every key has a default, and unknown or repeated keys
//! are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::recon::RegSign;
use crate::synthscene::GenConfig;

pub const SEED_ENV: &str = "G3DK_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} set twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key}: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{SEED_ENV}: {0}")]
    Env(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub gen: GenConfig,
    /// Log-normal size noise of jittered proposals.
    pub jitter_scale: f64,
    /// Gaussian center noise of jittered proposals, meters.
    pub jitter_center: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            jitter_scale: 0.1,
            jitter_center: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
}

struct Field {
    key: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("{e} ({s:?})"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true|false, got {s:?}")),
    }
}

macro_rules! field {
    ($key:literal, $doc:literal, |$c:ident| $place:expr, $parser:expr) => {
        Field {
            key: $key,
            doc: $doc,
            get: |$c: &RunConfig| format!("{}", $place),
            set: |$c: &mut RunConfig, s: &str| {
                $place = $parser(s)?;
                Ok(())
            },
        }
    };
}

const FIELDS: &[Field] = &[
    field!("seed", "master seed for initialization and shuffling", |c| c.model.seed, parse),
    field!("model.dim", "token width", |c| c.model.dim, parse),
    field!("model.patch_size", "patch side in pixels", |c| c.model.patch_size, parse),
    field!(
        "model.pixel_stem",
        "per-pixel GELU width before the patch embedding, 0 for a purely linear embedding",
        |c| c.model.pixel_stem,
        parse
    ),
    field!(
        "model.fusion_blocks",
        "joint text/visual transformer blocks",
        |c| c.model.fusion_blocks,
        parse
    ),
    field!("model.max_query_len", "longest accepted query, tokens", |c| c.model.max_query_len, parse),
    field!(
        "se.enabled",
        "intra/inter-view attention on",
        |c| c.model.components.structure_attention,
        parse_bool
    ),
    field!("se.blocks", "intra/inter-view attention blocks", |c| c.model.se_blocks, parse),
    field!("se.heads", "attention heads (all attention layers)", |c| c.model.heads, parse),
    field!(
        "posenc.enabled",
        "world-coordinate and ray codes on",
        |c| c.model.components.position_encoding,
        parse_bool
    ),
    field!("posenc.num_freqs", "sinusoid frequencies per axis", |c| c.model.posenc.num_freqs, parse),
    field!(
        "posenc.coord_scale",
        "meters per radian of the lowest frequency",
        |c| c.model.posenc.coord_scale,
        parse
    ),
    field!(
        "posenc.pool_kernel",
        "patch average-pooling kernel",
        |c| c.model.posenc.pool_kernel,
        parse
    ),
    field!(
        "posenc.ray_mlp_hidden",
        "hidden width of the ray MLP",
        |c| c.model.posenc.ray_mlp_hidden,
        parse
    ),
    field!(
        "recon.enabled",
        "reconstruction branch during training",
        |c| c.model.components.spatial_guidance,
        parse_bool
    ),
    field!("recon.alpha", "weight of the confidence log term", |c| c.model.recon.alpha, parse),
    Field {
        key: "recon.reg_sign",
        doc: "sign of the confidence log term: reward|penalize",
        get: |c| {
            match c.model.recon.reg_sign {
                RegSign::Reward => "reward",
                RegSign::Penalize => "penalize",
            }
            .to_string()
        },
        set: |c, s| {
            c.model.recon.reg_sign = s.parse()?;
            Ok(())
        },
    },
    field!(
        "recon.decoder_blocks",
        "attention blocks in the point-map decoder",
        |c| c.model.recon.decoder_blocks,
        parse
    ),
    field!("loss.lambda_g", "grounding loss weight", |c| c.model.loss.lambda_g, parse),
    field!("loss.lambda_r", "reconstruction loss weight", |c| c.model.loss.lambda_r, parse),
    field!("loss.lambda_l", "category loss weight", |c| c.model.loss.lambda_l, parse),
    field!("loss.tau", "contrastive temperature", |c| c.model.tau, parse),
    field!("train.lr", "peak learning rate", |c| c.model.train.lr, parse),
    field!("train.epochs", "passes over the training set", |c| c.model.train.epochs, parse),
    field!("train.batch_size", "episodes per optimizer step", |c| c.model.train.batch_size, parse),
    field!(
        "train.warmup_ratio",
        "fraction of steps with linear warmup",
        |c| c.model.train.warmup_ratio,
        parse
    ),
    field!("train.weight_decay", "decoupled weight decay", |c| c.model.train.weight_decay, parse),
    field!(
        "train.workers",
        "threads computing per-episode gradients",
        |c| c.model.train.workers,
        parse
    ),
    field!("data.num_views", "views per episode", |c| c.data.gen.rig.num_views, parse),
    field!("data.width", "image width", |c| c.data.gen.rig.width, parse),
    field!("data.height", "image height", |c| c.data.gen.rig.height, parse),
    field!("data.focal", "focal length in pixels", |c| c.data.gen.rig.focal, parse),
    field!("data.num_objects", "objects per scene", |c| c.data.gen.num_objects, parse),
    field!(
        "data.jitter_scale",
        "log-normal size noise of jittered proposals",
        |c| c.data.jitter_scale,
        parse
    ),
    field!(
        "data.jitter_center",
        "center noise of jittered proposals, meters",
        |c| c.data.jitter_center,
        parse
    ),
];

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        FIELDS.iter().map(|f| f.key)
    }

    /// Parses a config file; absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = vec![false; FIELDS.len()];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let at = FIELDS
                .iter()
                .position(|f| f.key == key)
                .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
            if std::mem::replace(&mut seen[at], true) {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
            (FIELDS[at].set)(&mut cfg, value).map_err(|msg| ConfigError::Value {
                line,
                key: key.to_string(),
                msg,
            })?;
        }
        cfg.model.posenc.dim = cfg.model.dim;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let g = &self.data.gen;
        if g.rig.num_views == 0 || g.rig.width == 0 || g.rig.height == 0 || g.num_objects < 2 {
            return Err(ConfigError::Invalid("data: need views, a non-empty image and at least 2 objects".into()));
        }
        if !(g.rig.focal > 0.0 && g.rig.focal.is_finite()) {
            return Err(ConfigError::Invalid("data.focal must be positive".into()));
        }
        if ![self.data.jitter_scale, self.data.jitter_center]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            return Err(ConfigError::Invalid("data.jitter_* must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Overrides the seed from `G3DK_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.model.seed = v.trim().parse().map_err(|e| ConfigError::Env(format!("{e} ({v:?})")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(ConfigError::Env(e.to_string())),
        }
    }

    /// Every key with its current value and a one-line description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in FIELDS {
            let _ = writeln!(out, "# {}\n{} = {}", f.doc, f.key, (f.get)(self));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.tau, 0.07);
        assert_eq!(c.model.loss.lambda_r, 0.3);
        assert_eq!(c.model.train.warmup_ratio, 0.05);
        assert_eq!(c.model.recon.alpha, 0.2);
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
        assert_eq!(RunConfig::keys().count(), FIELDS.len());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        for text in [
            "train.weight_decay = NaN",
            "train.weight_decay = inf",
            "data.jitter_scale = inf",
            "data.jitter_center = NaN",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(ConfigError::Invalid(_))), "{text}");
        }
    }

    #[test]
    fn values_comments_and_whitespace() {
        let c =
            RunConfig::parse("  train.lr=0.01   # faster\n\n# note\nrecon.reg_sign = penalize\nmodel.dim = 32\nse.heads=2\nposenc.enabled = off\n")
                .unwrap();
        assert_eq!(c.model.train.lr, 0.01);
        assert_eq!(c.model.recon.reg_sign, RegSign::Penalize);
        assert_eq!((c.model.dim, c.model.posenc.dim), (32, 32));
        assert!(!c.model.components.position_encoding);
    }

    #[test]
    fn keyed_errors() {
        assert_eq!(
            RunConfig::parse("seed = 1\ntrain.lrr = 3\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "train.lrr".into()
            })
        );
        assert!(matches!(RunConfig::parse("seed 1"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("seed = x"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("se.heads = 5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("loss.lambda_r = -1"), Err(ConfigError::Invalid(_))));
    }

    proptest! {
        #[test]
        fn parse_is_total(text in "[ -~\n]{0,200}") {
            let _ = RunConfig::parse(&text);
        }

        #[test]
        fn parse_is_total_on_near_valid_lines(
            lines in proptest::collection::vec(
                (proptest::sample::select(FIELDS.iter().map(|f| f.key).collect::<Vec<_>>()), "[-0-9a-z.e ]{0,8}"),
                0..6,
            )
        ) {
            let text: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
            let _ = RunConfig::parse(&text);
        }
    }
}
