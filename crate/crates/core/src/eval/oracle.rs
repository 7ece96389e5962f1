//! Brute-force references for selection, assignment and AP. Slow on purpose;
//! they share no code with the routines they check.

use crate::error::{Error, Result};
use crate::model::{tie_tolerance, Assignment};
use crate::numerics::Tensor;

/// Largest side the assignment enumeration accepts.
pub const MAX_ENUMERATION: usize = 7;

/// Per-row neighbors by a full stable sort of the admissible columns.
pub fn knn(scores: &Tensor, k: usize, lowest: bool, admissible: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let n = scores.rows();
    (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut idx: Vec<usize> = (0..n).filter(|&j| admissible(i, j)).collect();
            // Stable sort: equal scores keep ascending index order.
            idx.sort_by(|&a, &b| {
                let o = row[a].partial_cmp(&row[b]).expect("finite scores");
                if lowest {
                    o
                } else {
                    o.reverse()
                }
            });
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Optimal assignment by enumerating every injective row-to-column map in
/// lexicographic order; the first map within the tie tolerance of the
/// optimum wins. Refuses matrices with a side above [`MAX_ENUMERATION`].
pub fn assignment(cost: &Tensor) -> Result<Assignment> {
    let (g, q) = (cost.rows(), cost.cols());
    if g > MAX_ENUMERATION || q > MAX_ENUMERATION {
        return Err(Error::config(format!(
            "{g}x{q} is too large for enumeration (max {MAX_ENUMERATION})"
        )));
    }
    if g > q {
        return Err(Error::dim("more rows than columns"));
    }
    let mut all: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut cur = Vec::with_capacity(g);
    enumerate(cost, &mut cur, &mut vec![false; q], &mut all);
    let best = all.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
    let (query, cost) = all
        .into_iter()
        .find(|a| a.1 <= best + tie_tolerance(best))
        .unwrap_or((Vec::new(), 0.0));
    Ok(Assignment { query, cost })
}

fn enumerate(cost: &Tensor, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<(Vec<usize>, f64)>) {
    if cur.len() == cost.rows() {
        let total = cur.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
        out.push((cur.clone(), total));
        return;
    }
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            cur.push(c);
            enumerate(cost, cur, used, out);
            cur.pop();
            used[c] = false;
        }
    }
}

/// AP from explicit precision/recall points: for each recall level reached,
/// the best precision at that recall or beyond, times the recall increment.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let points: Vec<(f64, f64)> = (1..=flags.len())
        .map(|k| {
            let tp = flags[..k].iter().filter(|&&f| f).count() as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = assignment(&c).unwrap();
        assert_eq!((a.query, a.cost), (vec![0, 1], 2.0));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - 0.8333333333333333).abs() < 1e-12);
        assert!(assignment(&Tensor::zeros(&[8, 8])).is_err());
    }
}
