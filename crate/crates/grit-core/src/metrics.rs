//! Ranking evaluation over the full item set: Recall@k, NDCG@k and MRR@k
//! under the single-held-out-item protocol, plus report serialization.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{eval_batches, EvalPhase, SplitDataset};
use crate::error::{GritError, Result};
use crate::model::GritModel;
use crate::rng::SeedFanout;

pub const CUTOFFS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target` under pessimistic tie breaking: every other item
/// scoring greater than or equal to the target is counted as ranked above
/// it, so constant score vectors cannot inflate the metrics.
pub fn rank_target(scores: &[f64], target: u32) -> usize {
    assert!(target != 0, "rank_target: target is the pad id");
    let t = target as usize;
    assert!(t < scores.len(), "rank_target: target {t} outside vocabulary");
    let s = scores[t];
    let mut above = 0;
    for (v, &score) in scores.iter().enumerate() {
        if v != t && score >= s {
            above += 1;
        }
    }
    1 + above
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// Mean single-relevant-item metrics over a list of 1-based ranks.
pub fn metrics_at_k(ranks: &[usize], k: usize) -> MetricTriple {
    assert!(k >= 1, "metrics_at_k: cutoff must be at least 1");
    assert!(!ranks.is_empty(), "metrics_at_k: empty rank list");
    let n = ranks.len() as f64;
    let mut triple = MetricTriple { recall: 0.0, ndcg: 0.0, mrr: 0.0 };
    for &rank in ranks {
        debug_assert!(rank >= 1);
        if rank <= k {
            triple.recall += 1.0;
            triple.ndcg += 1.0 / ((rank + 1) as f64).log2();
            triple.mrr += 1.0 / rank as f64;
        }
    }
    triple.recall /= n;
    triple.ndcg /= n;
    triple.mrr /= n;
    triple
}

/// Aggregated evaluation results. `metrics` maps metric name to cutoff to
/// mean value; `ranks` lists (dense user index, rank) per evaluated user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub phase: String,
    pub users: usize,
    pub exclude_history: bool,
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ranks: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn from_ranks(
        phase: &str,
        exclude_history: bool,
        ranks: Vec<(usize, usize)>,
    ) -> EvalReport {
        let bare: Vec<usize> = ranks.iter().map(|&(_, r)| r).collect();
        let mut metrics: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for k in CUTOFFS {
            let triple = metrics_at_k(&bare, k);
            for (name, value) in
                [("recall", triple.recall), ("ndcg", triple.ndcg), ("mrr", triple.mrr)]
            {
                metrics.entry(name.into()).or_default().insert(k.to_string(), value);
            }
        }
        EvalReport { phase: phase.into(), users: ranks.len(), exclude_history, metrics, ranks }
    }

    pub fn get(&self, metric: &str, k: usize) -> f64 {
        self.metrics[metric][&k.to_string()]
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.get("recall", k)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get("ndcg", k)
    }

    pub fn mrr(&self, k: usize) -> f64 {
        self.get("mrr", k)
    }

    /// Selection score used by the hyperparameter sweep.
    pub fn selection_score(&self) -> f64 {
        (self.recall(10) + self.mrr(10)) / 2.0
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| GritError::Data(format!("serializing report: {e}")))?;
        std::fs::write(path, json).map_err(|e| GritError::io(path, e))
    }

    pub fn write_ranks_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("user,rank\n");
        for &(user, rank) in &self.ranks {
            out.push_str(&format!("{user},{rank}\n"));
        }
        std::fs::write(path, out).map_err(|e| GritError::io(path, e))
    }
}

/// Ranks every user's held-out item with the full vocabulary as candidates
/// (pad always excluded). With `exclude_history`, items from the user's
/// input context are also excluded, except the target itself.
pub fn evaluate(
    model: &GritModel,
    split: &SplitDataset,
    phase: EvalPhase,
    exclude_history: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    if split.train.is_empty() {
        return Err(GritError::Data("evaluation over an empty split".into()));
    }
    let phase_name = match phase {
        EvalPhase::Validation => "valid",
        EvalPhase::Test => "test",
    };
    let mut rng = SeedFanout::new(0).dropout_rng();
    let mut ranks = Vec::with_capacity(split.train.len());
    for batch in eval_batches(split, phase, model.config.max_len, batch_size) {
        let pass = model.forward(
            Rc::new(batch.items.clone()),
            &batch.mask,
            batch.rows,
            false,
            &mut rng,
        );
        let mut scores = model.score_last(&pass);
        let vocab = model.vocab();
        for r in 0..batch.rows {
            let target = batch.targets[r];
            if exclude_history {
                for &seen in &batch.histories[r] {
                    if seen != target {
                        scores.data_mut()[r * vocab + seen as usize] = f64::NEG_INFINITY;
                    }
                }
            }
            let row = &scores.data()[r * vocab..(r + 1) * vocab];
            ranks.push((batch.users[r], rank_target(row, target)));
        }
    }
    Ok(EvalReport::from_ranks(phase_name, exclude_history, ranks))
}
