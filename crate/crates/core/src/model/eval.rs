//! Accuracy at IoU thresholds, stratified by whether the target's category is
//! unique in its scene, plus category accuracy and a rule-based error tally.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::aabb_iou;
use crate::synthscene::{derive_seed, Uniqueness, CATEGORIES};

use super::{infer, ModelError, PreparedEpisode, ToyGrounder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub predicted_id: usize,
    pub predicted_category: usize,
}

/// Anything that picks one proposal per episode.
pub trait Grounder {
    fn predict(&self, index: usize, ep: &PreparedEpisode) -> Result<Prediction, ModelError>;
}

impl Grounder for ToyGrounder {
    fn predict(&self, _index: usize, ep: &PreparedEpisode) -> Result<Prediction, ModelError> {
        let out = infer(self, ep)?;
        Ok(Prediction {
            predicted_id: out.predicted_id,
            predicted_category: out.predicted_category(),
        })
    }
}

/// Always answers the annotated target.
pub struct OracleGrounder;

impl Grounder for OracleGrounder {
    fn predict(&self, _index: usize, ep: &PreparedEpisode) -> Result<Prediction, ModelError> {
        Ok(Prediction {
            predicted_id: ep.target_id,
            predicted_category: ep.target_category,
        })
    }
}

/// Uniform choice among the proposals and categories, seeded per episode.
pub struct RandomGrounder {
    pub seed: u64,
}

impl Grounder for RandomGrounder {
    fn predict(&self, index: usize, ep: &PreparedEpisode) -> Result<Prediction, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index as u64));
        Ok(Prediction {
            predicted_id: ep.proposal_ids[rng.gen_range(0..ep.num_proposals())],
            predicted_category: rng.gen_range(0..CATEGORIES.len()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorKind {
    Correct,
    /// Right instance, box too loose.
    Detection,
    /// Chosen proposal has another category.
    Semantic,
    /// Right category, wrong instance.
    Spatial,
    /// Malformed query.
    Other,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [
        ErrorKind::Correct,
        ErrorKind::Detection,
        ErrorKind::Semantic,
        ErrorKind::Spatial,
        ErrorKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Correct => "correct",
            ErrorKind::Detection => "detection",
            ErrorKind::Semantic => "semantic",
            ErrorKind::Spatial => "spatial",
            ErrorKind::Other => "other",
        }
    }
}

pub const CORRECT_IOU: f64 = 0.25;

pub fn classify_error(ep: &PreparedEpisode, predicted_id: usize) -> ErrorKind {
    if ep.tokens.is_empty() {
        return ErrorKind::Other;
    }
    let Some(i) = ep.proposal_ids.iter().position(|&id| id == predicted_id) else {
        return ErrorKind::Other;
    };
    if aabb_iou(&ep.proposal_boxes[i], &ep.target_box) >= CORRECT_IOU {
        ErrorKind::Correct
    } else if predicted_id == ep.target_id {
        ErrorKind::Detection
    } else if ep.proposal_categories[i] != ep.target_category {
        ErrorKind::Semantic
    } else {
        ErrorKind::Spatial
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubsetStats {
    pub count: usize,
    /// Hits per threshold, same order as the report's thresholds.
    pub hits: Vec<usize>,
}

impl SubsetStats {
    pub fn accuracy(&self, threshold_index: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.hits[threshold_index] as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub unique: SubsetStats,
    pub multiple: SubsetStats,
    pub overall: SubsetStats,
    pub category_correct: usize,
    /// Count per [`ErrorKind::ALL`] entry.
    pub errors: [usize; 5],
    pub predictions: Vec<usize>,
    pub ious: Vec<f64>,
}

impl EvalReport {
    pub fn accuracy(&self, threshold: f64) -> f64 {
        let i = self.thresholds.iter().position(|t| *t == threshold).expect("threshold evaluated");
        self.overall.accuracy(i)
    }

    pub fn category_accuracy(&self) -> f64 {
        if self.overall.count == 0 {
            0.0
        } else {
            self.category_correct as f64 / self.overall.count as f64
        }
    }

    /// Rows of `split,subset,metric,value`, header included.
    pub fn to_csv(&self, split: &str) -> String {
        let mut out = String::from("split,subset,metric,value\n");
        for (name, s) in [("unique", &self.unique), ("multiple", &self.multiple), ("overall", &self.overall)] {
            for (i, t) in self.thresholds.iter().enumerate() {
                let _ = writeln!(out, "{split},{name},acc@{t},{}", s.accuracy(i));
            }
            let _ = writeln!(out, "{split},{name},count,{}", s.count);
        }
        let _ = writeln!(out, "{split},overall,category_acc,{}", self.category_accuracy());
        for (k, n) in ErrorKind::ALL.iter().zip(self.errors) {
            let _ = writeln!(out, "{split},overall,errors.{},{n}", k.name());
        }
        out
    }

    pub fn error_table(&self) -> String {
        let mut out = String::from("type        count\n");
        for (k, n) in ErrorKind::ALL.iter().zip(self.errors) {
            let _ = writeln!(out, "{:<11} {n}", k.name());
        }
        out
    }
}

/// Scores `grounder` on `episodes`. Thresholds must lie in `(0, 1]`.
pub fn evaluate(grounder: &dyn Grounder, episodes: &[PreparedEpisode], thresholds: &[f64]) -> Result<EvalReport, ModelError> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(ModelError::Config(format!("IoU threshold {t} outside (0, 1]")));
    }
    let empty = || SubsetStats {
        count: 0,
        hits: vec![0; thresholds.len()],
    };
    let mut report = EvalReport {
        thresholds: thresholds.to_vec(),
        unique: empty(),
        multiple: empty(),
        overall: empty(),
        category_correct: 0,
        errors: [0; 5],
        predictions: Vec::with_capacity(episodes.len()),
        ious: Vec::with_capacity(episodes.len()),
    };
    for (i, ep) in episodes.iter().enumerate() {
        let pred = grounder.predict(i, ep)?;
        let iou = ep
            .proposal_ids
            .iter()
            .position(|&id| id == pred.predicted_id)
            .map_or(0.0, |j| aabb_iou(&ep.proposal_boxes[j], &ep.target_box));
        let subset = match ep.uniqueness {
            Uniqueness::Unique => &mut report.unique,
            Uniqueness::Multiple => &mut report.multiple,
        };
        for s in [subset, &mut report.overall] {
            s.count += 1;
            for (k, t) in thresholds.iter().enumerate() {
                if iou >= *t {
                    s.hits[k] += 1;
                }
            }
        }
        report.category_correct += (pred.predicted_category == ep.target_category) as usize;
        let kind = classify_error(ep, pred.predicted_id);
        report.errors[ErrorKind::ALL.iter().position(|k| *k == kind).expect("listed")] += 1;
        report.predictions.push(pred.predicted_id);
        report.ious.push(iou);
    }
    Ok(report)
}
