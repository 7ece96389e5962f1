//! Minimum-cost bipartite matching between ground-truth pairs and queries.

use super::GtPair;
use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::numerics::Tensor;

/// Weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub object: f64,
    pub interaction: f64,
    pub box_l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            object: 1.0,
            interaction: 1.0,
            box_l1: 2.5,
            giou: 1.0,
        }
    }
}

/// Injective map from ground-truth index to query index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `query[g]` is the query matched to ground truth `g`.
    pub query: Vec<usize>,
    /// Sum of matched costs, accumulated in ground-truth order.
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query.iter().copied().enumerate()
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }
}

/// Prediction of one query in probability space.
#[derive(Debug, Clone, Copy)]
pub struct PredictionView<'a> {
    pub human: BBox,
    pub object: BBox,
    /// Softmax over object classes including "no object".
    pub object_prob: &'a [f64],
    /// Sigmoid of every interaction logit.
    pub interaction_prob: &'a [f64],
}

fn l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Cost of assigning `gt` to the query described by `pred`.
pub fn match_cost(pred: &PredictionView<'_>, gt: &GtPair, w: &MatchWeights) -> Result<f64> {
    let p_obj = *pred
        .object_prob
        .get(gt.object_class)
        .ok_or(Error::Index {
            index: gt.object_class,
            len: pred.object_prob.len(),
        })?;
    let mut p_int = 0.0;
    for &a in &gt.interactions {
        p_int += *pred.interaction_prob.get(a).ok_or(Error::Index {
            index: a,
            len: pred.interaction_prob.len(),
        })?;
    }
    if !gt.interactions.is_empty() {
        p_int /= gt.interactions.len() as f64;
    }
    let box_l1 = l1(&pred.human, &gt.human) + l1(&pred.object, &gt.object);
    let box_giou = (1.0 - giou(&pred.human, &gt.human)?) + (1.0 - giou(&pred.object, &gt.object)?);
    Ok(-w.object * p_obj - w.interaction * p_int + w.box_l1 * box_l1 + w.giou * box_giou)
}

/// `G x Q` matrix of [`match_cost`] values from raw head outputs.
pub fn cost_matrix(
    boxes_h: &Tensor,
    boxes_o: &Tensor,
    obj_logits: &Tensor,
    inter_logits: &Tensor,
    gts: &[GtPair],
    w: &MatchWeights,
) -> Result<Tensor> {
    let q = boxes_h.rows();
    if gts.is_empty() {
        return Err(Error::dim("cost matrix needs at least one ground truth"));
    }
    let obj_prob: Vec<Vec<f64>> = (0..q).map(|r| softmax(obj_logits.row(r))).collect();
    let int_prob: Vec<Vec<f64>> = (0..q)
        .map(|r| inter_logits.row(r).iter().map(|&x| sigmoid(x)).collect())
        .collect();
    let mut out = Vec::with_capacity(gts.len() * q);
    for gt in gts {
        for j in 0..q {
            let h = boxes_h.row(j);
            let o = boxes_o.row(j);
            let view = PredictionView {
                human: BBox::raw(h[0], h[1], h[2], h[3]),
                object: BBox::raw(o[0], o[1], o[2], o[3]),
                object_prob: &obj_prob[j],
                interaction_prob: &int_prob[j],
            };
            out.push(match_cost(&view, gt, w)?);
        }
    }
    Tensor::new(&[gts.len(), q], out)
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Optimal assignment of the listed rows of `cost` to the listed columns by
/// shortest augmenting paths with potentials. Returns the column of each row.
fn solve(cost: &Tensor, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn sum_cost(cost: &Tensor, rows: &[usize], assigned: &[usize]) -> f64 {
    rows.iter().zip(assigned).map(|(&r, &c)| cost.get(r, c)).sum()
}

/// Tolerance under which two assignment costs count as tied.
pub(crate) fn tie_tolerance(best: f64) -> f64 {
    1e-9 * best.abs().max(1.0)
}

/// Minimum-cost injective assignment of the `G` rows to the `Q >= G` columns.
/// Among optimal assignments the lexicographically smallest column sequence
/// is returned.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let (g, q) = if cost.shape().len() == 2 {
        (cost.shape()[0], cost.shape()[1])
    } else {
        return Err(Error::dim("cost must be a matrix"));
    };
    if g > q {
        return Err(Error::dim(format!("{g} ground truths exceed {q} queries")));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite {
            op: "hungarian_match".into(),
            detail: "cost matrix".into(),
        });
    }
    if g == 0 {
        return Ok(Assignment {
            query: Vec::new(),
            cost: 0.0,
        });
    }
    let all_rows: Vec<usize> = (0..g).collect();
    let all_cols: Vec<usize> = (0..q).collect();
    let best_assign = solve(cost, &all_rows, &all_cols);
    let best = sum_cost(cost, &all_rows, &best_assign);
    let tol = tie_tolerance(best);

    // Fix rows in order to the smallest column that still admits an optimum.
    let mut fixed = Vec::with_capacity(g);
    let mut fixed_cost = 0.0;
    let mut used = vec![false; q];
    for r in 0..g {
        let rest_rows: Vec<usize> = (r + 1..g).collect();
        let mut chosen = None;
        for c in 0..q {
            if used[c] {
                continue;
            }
            let head = fixed_cost + cost.get(r, c);
            let total = if rest_rows.is_empty() {
                head
            } else {
                let cols: Vec<usize> = (0..q).filter(|&j| !used[j] && j != c).collect();
                let sub = solve(cost, &rest_rows, &cols);
                head + sum_cost(cost, &rest_rows, &sub)
            };
            if total <= best + tol {
                chosen = Some(c);
                break;
            }
        }
        // The optimum itself always stays feasible, so a column is found.
        let c = chosen.unwrap_or(best_assign[r]);
        used[c] = true;
        fixed_cost += cost.get(r, c);
        fixed.push(c);
    }
    let total = sum_cost(cost, &all_rows, &fixed);
    Ok(Assignment { query: fixed, cost: total })
}
