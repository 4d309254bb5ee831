//! Prediction-to-target bipartite matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::losses::{bce, dice_loss_slice, DICE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_bce: f64,
    pub w_dice: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            w_cls: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_cls, self.w_bce, self.w_dice];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config(format!(
                "match weights must be non-negative and not all zero: {w:?}"
            )));
        }
        Ok(())
    }
}

/// One ground-truth segment as seen by a prompt set: its class index within
/// the head's class list and its (soft) mask at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, target)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

/// Row-major `rows × cols` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        CostMatrix { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn total(&self, a: &Assignment) -> f64 {
        a.pairs.iter().map(|&(q, j)| self.at(q, j)).sum()
    }
}

/// Matching cost from probabilities: `class_probs [N, C]` and
/// `mask_probs [N, P]`, each term averaged over its elements.
pub fn match_cost_probs(
    class_probs: &[f64],
    mask_probs: &[f64],
    queries: usize,
    targets: &[Target],
    weights: &MatchWeights,
) -> Result<CostMatrix> {
    if queries == 0 {
        return Ok(CostMatrix::new(0, targets.len(), vec![]));
    }
    let classes = class_probs.len() / queries;
    let pixels = mask_probs.len() / queries;
    if classes * queries != class_probs.len() || pixels * queries != mask_probs.len() {
        return Err(Error::Input("prediction buffers are not N-row matrices".into()));
    }
    if class_probs.iter().chain(mask_probs).any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in matching inputs".into()));
    }
    for t in targets {
        if t.mask.len() != pixels || t.class >= classes {
            return Err(Error::Input(format!(
                "target (class {}, {} pixels) does not fit {classes} classes x {pixels} pixels",
                t.class,
                t.mask.len()
            )));
        }
    }
    let mut data = Vec::with_capacity(queries * targets.len());
    for q in 0..queries {
        let cp = &class_probs[q * classes..(q + 1) * classes];
        let mp = &mask_probs[q * pixels..(q + 1) * pixels];
        for t in targets {
            let cls: f64 = cp
                .iter()
                .enumerate()
                .map(|(c, &p)| bce(p, if c == t.class { 1.0 } else { 0.0 }))
                .sum::<f64>()
                / classes as f64;
            let mbce: f64 =
                mp.iter().zip(&t.mask).map(|(p, y)| bce(*p, *y)).sum::<f64>() / pixels as f64;
            let dice = dice_loss_slice(mp, &t.mask, DICE_EPS);
            data.push(weights.w_cls * cls + weights.w_bce * mbce + weights.w_dice * dice);
        }
    }
    Ok(CostMatrix::new(queries, targets.len(), data))
}

/// Matching cost from logits (sigmoid applied first).
pub fn match_cost(
    class_logits: &[f64],
    mask_logits: &[f64],
    queries: usize,
    targets: &[Target],
    weights: &MatchWeights,
) -> Result<CostMatrix> {
    let sig = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect() };
    match_cost_probs(&sig(class_logits), &sig(mask_logits), queries, targets, weights)
}

/// Minimum-cost one-to-one assignment of size `min(rows, cols)`
/// (shortest augmenting paths with potentials, `O(n²m)`).
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return Assignment {
            pairs: vec![],
            unmatched_queries: (0..n).collect(),
        };
    }
    let transposed = n > m;
    let (r, c) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if transposed { cost.at(j, i) } else { cost.at(i, j) };

    // 1-based potentials over r rows and c columns; column 0 is a sentinel.
    let mut u = vec![0.0f64; r + 1];
    let mut v = vec![0.0f64; c + 1];
    let mut col_row = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=c)
        .filter(|&j| col_row[j] != 0)
        .map(|j| {
            let (i, jj) = (col_row[j] - 1, j - 1);
            if transposed {
                (jj, i)
            } else {
                (i, jj)
            }
        })
        .collect();
    pairs.sort_unstable();
    let matched: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    Assignment {
        unmatched_queries: (0..n).filter(|q| !matched.contains(q)).collect(),
        pairs,
    }
}
