//! Post-hoc analyses of a trained model: cosine similarity between latent
//! group embeddings and per-user membership timelines, exported as CSV and
//! gnuplot-readable matrices.

use std::path::Path;
use std::rc::Rc;

use crate::data::SplitDataset;
use crate::error::{GritError, Result};
use crate::model::GritModel;
use crate::rng::SeedFanout;

/// Pairwise cosine similarities between the columns of one block's group
/// table. The diagonal is pinned to exactly 1; zero-norm columns yield zero
/// rows/columns (diagonal aside) and are listed for warning output.
#[derive(Debug, Clone)]
pub struct GroupSimilarity {
    pub groups: usize,
    /// Row-major (groups, groups).
    pub matrix: Vec<f64>,
    pub zero_norm_columns: Vec<usize>,
}

pub fn group_similarity(model: &GritModel, block_index: usize) -> Result<GroupSimilarity> {
    let table = model.group_table(block_index).ok_or_else(|| {
        GritError::Config(format!(
            "block index {block_index} out of range; model has {} blocks",
            model.layer_count()
        ))
    })?;
    let (d, k) = (table.shape()[0], table.shape()[1]);
    let mut norms = vec![0.0; k];
    for r in 0..d {
        for c in 0..k {
            let v = table.at(&[r, c]);
            norms[c] += v * v;
        }
    }
    let zero_norm_columns: Vec<usize> =
        (0..k).filter(|&c| norms[c] == 0.0).collect();
    let norms: Vec<f64> = norms.iter().map(|n| n.sqrt()).collect();

    let mut matrix = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..=a {
            let value = if a == b {
                1.0
            } else if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else {
                let dot: f64 = (0..d).map(|r| table.at(&[r, a]) * table.at(&[r, b])).sum();
                dot / (norms[a] * norms[b])
            };
            matrix[a * k + b] = value;
            matrix[b * k + a] = value;
        }
    }
    Ok(GroupSimilarity { groups: k, matrix, zero_norm_columns })
}

impl GroupSimilarity {
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.groups + b]
    }

    /// CSV with a header row of group indices.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self.groups;
        let mut out = String::new();
        out.push_str(&(0..k).map(|g| format!("g{g}")).collect::<Vec<_>>().join(","));
        out.push('\n');
        for a in 0..k {
            let row: Vec<String> =
                (0..k).map(|b| format!("{:.12}", self.at(a, b))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| GritError::io(path, e))
    }

    /// Headerless whitespace matrix, directly loadable by gnuplot's
    /// `splot '...' matrix with image`.
    pub fn write_gnuplot_matrix(&self, path: &Path) -> Result<()> {
        let k = self.groups;
        let mut out = String::new();
        for a in 0..k {
            let row: Vec<String> =
                (0..k).map(|b| format!("{:.12}", self.at(a, b))).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| GritError::io(path, e))
    }
}

/// Final-block membership distribution of one user at every real timestep of
/// their (window-truncated) interaction sequence, oldest first.
#[derive(Debug, Clone)]
pub struct MembershipTimeline {
    pub user: usize,
    pub groups: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn membership_timeline(
    model: &GritModel,
    split: &SplitDataset,
    user: usize,
) -> Result<MembershipTimeline> {
    let sequences = &split.dataset.sequences;
    let seq = sequences.get(user).ok_or_else(|| {
        GritError::Data(format!("unknown user index {user}; dataset has {}", sequences.len()))
    })?;
    let max_len = model.config.max_len;
    let keep = seq.len().min(max_len);
    let pad = max_len - keep;
    let mut items = vec![0u32; max_len];
    let mut mask = vec![false; max_len];
    items[pad..].copy_from_slice(&seq[seq.len() - keep..]);
    mask[pad..].fill(true);

    let mut rng = SeedFanout::new(0).dropout_rng();
    let pass = model.forward(Rc::new(items), &mask, 1, false, &mut rng);
    let trace = pass.memberships.last().expect("model has at least one block").value();
    let k = trace.shape()[2];
    let rows = (pad..max_len)
        .map(|p| (0..k).map(|g| trace.at(&[0, p, g])).collect())
        .collect();
    Ok(MembershipTimeline { user, groups: k, rows })
}

impl MembershipTimeline {
    /// CSV: timestep, then one column per group.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("timestep,");
        out.push_str(&(0..self.groups).map(|g| format!("g{g}")).collect::<Vec<_>>().join(","));
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v:.12}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| GritError::io(path, e))
    }
}
