//! Exhaustive Euclidean retrieval and the recall / error metrics.

use serde::{Deserialize, Serialize};

use crate::cloud::CELL_SIDE;
use crate::error::{Error, Result};

pub const EPSILONS: [f64; 3] = [5.0, 10.0, 15.0];
pub const LOC_KS: [usize; 3] = [1, 5, 10];
pub const RETRIEVAL_KS: [usize; 3] = [1, 3, 5];
pub const UNIT_TOL: f64 = 1e-5;

/// Submap descriptors with their cell ids and world-frame centers.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    dim: usize,
    rows: Vec<f64>,
    pub cell_ids: Vec<u32>,
    pub centers: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// `(cell_id, distance)`, ascending distance then ascending id.
    pub hits: Vec<(u32, f64)>,
    /// Set when more results were requested than the index holds.
    pub truncated: bool,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, rows: Vec<f64>, cell_ids: Vec<u32>, centers: Vec<[f64; 2]>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * cell_ids.len() || centers.len() != cell_ids.len() {
            return Err(Error::Shape(format!(
                "index of {} ids, {} centers and {} values at width {dim}",
                cell_ids.len(),
                centers.len(),
                rows.len()
            )));
        }
        for (i, r) in rows.chunks(dim).enumerate() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Precondition(format!("index row {i} has norm {n}")));
            }
        }
        Ok(Self {
            dim,
            rows,
            cell_ids,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn center_of(&self, cell_id: u32) -> Option<[f64; 2]> {
        self.cell_ids.iter().position(|&c| c == cell_id).map(|i| self.centers[i])
    }

    /// The `k` nearest rows to `query` by Euclidean distance.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Ranking> {
        if k == 0 {
            return Err(Error::Param("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Precondition("empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query width {} vs index {}", query.len(), self.dim)));
        }
        let mut all: Vec<(u32, f64)> = (0..self.len())
            .map(|i| {
                let d2: f64 = self.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                (self.cell_ids[i], d2.sqrt())
            })
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let truncated = k > all.len();
        all.truncate(k);
        Ok(Ranking { hits: all, truncated })
    }
}

/// Fraction of queries whose true cell is among the first `k` ranked ids, per `k`.
pub fn submap_recall_at_k(rankings: &[Vec<u32>], truth: &[u32], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            if truth.is_empty() {
                return 0.0;
            }
            let hit = rankings
                .iter()
                .zip(truth)
                .filter(|(r, t)| r.iter().take(k).any(|c| c == *t))
                .count();
            hit as f64 / truth.len() as f64
        })
        .collect()
}

fn planar(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Entry `[e][k]`: fraction of queries whose best prediction among the
/// first `ks[k]` is closer than `eps[e]` meters.
pub fn localization_recall(predictions: &[Vec<[f64; 2]>], truth: &[[f64; 2]], eps: &[f64], ks: &[usize]) -> Vec<Vec<f64>> {
    let best: Vec<Vec<f64>> = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            ks.iter()
                .map(|&k| p.iter().take(k).map(|&x| planar(x, *t)).fold(f64::INFINITY, f64::min))
                .collect()
        })
        .collect();
    eps.iter()
        .map(|&e| {
            (0..ks.len())
                .map(|ki| {
                    if truth.is_empty() {
                        return 0.0;
                    }
                    best.iter().filter(|b| b[ki] < e).count() as f64 / truth.len() as f64
                })
                .collect()
        })
        .collect()
}

/// Mean planar error of top-1 predictions over the cell side.
pub fn mean_normalized_error(top1: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    top1.iter().zip(truth).map(|(&p, &t)| planar(p, t)).sum::<f64>() / truth.len() as f64 / CELL_SIDE
}

/// Flat metrics document; key names carry the `(ε, k)` grid explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub submap_recall_at_1: f64,
    pub submap_recall_at_3: f64,
    pub submap_recall_at_5: f64,
    pub loc_recall_eps5_k1: f64,
    pub loc_recall_eps5_k5: f64,
    pub loc_recall_eps5_k10: f64,
    pub loc_recall_eps10_k1: f64,
    pub loc_recall_eps10_k5: f64,
    pub loc_recall_eps10_k10: f64,
    pub loc_recall_eps15_k1: f64,
    pub loc_recall_eps15_k5: f64,
    pub loc_recall_eps15_k10: f64,
    pub mean_normalized_error: f64,
    pub samples: usize,
}

impl EvalReport {
    /// `rankings[q]` are retrieved cell ids, `predictions[q]` the matching
    /// world-frame positions, both best first.
    pub fn build(rankings: &[Vec<u32>], predictions: &[Vec<[f64; 2]>], truth_cells: &[u32], truth_xy: &[[f64; 2]]) -> Self {
        let r = submap_recall_at_k(rankings, truth_cells, &RETRIEVAL_KS);
        let l = localization_recall(predictions, truth_xy, &EPSILONS, &LOC_KS);
        let top1: Vec<[f64; 2]> = predictions.iter().map(|p| p[0]).collect();
        Self {
            submap_recall_at_1: r[0],
            submap_recall_at_3: r[1],
            submap_recall_at_5: r[2],
            loc_recall_eps5_k1: l[0][0],
            loc_recall_eps5_k5: l[0][1],
            loc_recall_eps5_k10: l[0][2],
            loc_recall_eps10_k1: l[1][0],
            loc_recall_eps10_k5: l[1][1],
            loc_recall_eps10_k10: l[1][2],
            loc_recall_eps15_k1: l[2][0],
            loc_recall_eps15_k5: l[2][1],
            loc_recall_eps15_k10: l[2][2],
            mean_normalized_error: mean_normalized_error(&top1, truth_xy),
            samples: truth_cells.len(),
        }
    }

    pub fn grid(&self) -> [[f64; 3]; 3] {
        [
            [self.loc_recall_eps5_k1, self.loc_recall_eps5_k5, self.loc_recall_eps5_k10],
            [self.loc_recall_eps10_k1, self.loc_recall_eps10_k5, self.loc_recall_eps10_k10],
            [self.loc_recall_eps15_k1, self.loc_recall_eps15_k5, self.loc_recall_eps15_k10],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> EmbeddingIndex {
        let rows = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        EmbeddingIndex::new(2, rows, vec![10, 11, 12, 13], vec![[0.0; 2]; 4]).unwrap()
    }

    #[test]
    fn exact_match_first_and_ties_by_id() {
        let idx = index();
        let r = idx.top_k(&[0.0, 1.0], 2).unwrap();
        assert_eq!(r.hits[0], (11, 0.0));
        let r = idx.top_k(&[0.0, 0.0], 4).unwrap();
        let ids: Vec<u32> = r.hits.iter().map(|h| h.0).collect();
        assert_eq!(ids, [10, 11, 12, 13]);
        let r = idx.top_k(&[1.0, 0.0], 9).unwrap();
        assert!(r.truncated && r.hits.len() == 4);
        assert!(idx.top_k(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn recall_examples() {
        let truth = [1, 2];
        assert_eq!(submap_recall_at_k(&[vec![1, 5], vec![2, 5]], &truth, &[1]), vec![1.0]);
        let r = submap_recall_at_k(&[vec![5, 1, 6], vec![5, 2, 6]], &truth, &[1, 3]);
        assert_eq!(r, vec![0.0, 1.0]);
    }

    #[test]
    fn localization_examples() {
        let truth = [[0.0, 0.0]; 3];
        let preds = vec![vec![[3.0, 0.0]], vec![[7.0, 0.0]], vec![[20.0, 0.0]]];
        let l = localization_recall(&preds, &truth, &[5.0], &[1]);
        assert!((l[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_normalized_error(&[[3.0, 0.0]], &[[0.0, 0.0]]), 0.1);
        let e = mean_normalized_error(&[[30.0, 30.0]], &[[0.0, 0.0]]);
        assert!((e - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_normalized_error(&[[1.0, 2.0]], &[[1.0, 2.0]]), 0.0);
    }

    #[test]
    fn report_has_the_declared_keys() {
        let rep = EvalReport::build(&[vec![1]], &[vec![[0.0, 0.0]]], &[1], &[[0.0, 0.0]]);
        let v = serde_json::to_value(&rep).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys.len(), 14);
        assert!(keys.contains(&"loc_recall_eps10_k5") && keys.contains(&"samples"));
    }
}
