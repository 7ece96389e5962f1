//! Box math, pairwise spatial features, the linear proximity estimator and
//! geometric neighbor selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in normalized center-size form. Serializes as
/// `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::raw(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box without validation, for values produced by the model.
    pub const fn raw(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [cx, cy, w, h] => Self::new(*cx, *cy, *w, *h),
            _ => Err(Error::Validation(format!("box needs 4 values, got {}", v.len()))),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(format!("degenerate box {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::Validation(format!("box center outside frame {self:?}")));
        }
        Ok(())
    }

    /// `(x0, y0, x1, y1)` clamped to the unit frame.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - 0.5 * self.w).clamp(0.0, 1.0),
            (self.cy - 0.5 * self.h).clamp(0.0, 1.0),
            (self.cx + 0.5 * self.w).clamp(0.0, 1.0),
            (self.cy + 0.5 * self.h).clamp(0.0, 1.0),
        ]
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.corners();
        (x1 - x0) * (y1 - y0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() < 0.5 * self.w && (y - self.cy).abs() < 0.5 * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (hull - union) / hull)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    squared_center_distance(a, b).sqrt()
}

pub fn squared_center_distance(a: &BBox, b: &BBox) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    dx * dx + dy * dy
}

/// Pairwise `[dis, iou]` feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialFeature {
    pub dis: f64,
    pub iou: f64,
}

pub fn spatial_feature(a: &BBox, b: &BBox, squared_distance: bool) -> Result<SpatialFeature> {
    let iou = iou(a, b)?;
    let dis = if squared_distance {
        squared_center_distance(a, b)
    } else {
        center_distance(a, b)
    };
    Ok(SpatialFeature { dis, iou })
}

/// Linear proximity estimator `s = w_dis * dis + w_iou * iou + bias`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximityWeights {
    pub w_dis: f64,
    pub w_iou: f64,
    pub bias: f64,
}

impl Default for ProximityWeights {
    /// Lower score means closer and more overlapping.
    fn default() -> Self {
        Self {
            w_dis: 1.0,
            w_iou: -1.0,
            bias: 0.0,
        }
    }
}

impl ProximityWeights {
    pub fn score(&self, f: SpatialFeature) -> f64 {
        self.w_dis * f.dis + self.w_iou * f.iou + self.bias
    }
}

/// `n x n` proximity score matrix.
pub fn proximity_scores(
    boxes: &[BBox],
    weights: ProximityWeights,
    squared_distance: bool,
) -> Result<Tensor> {
    let n = boxes.len();
    if n == 0 {
        return Err(Error::Validation("proximity scores need at least one box".into()));
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = weights.score(spatial_feature(&boxes[i], &boxes[j], squared_distance)?);
        }
    }
    Tensor::new(&[n, n], s)
}

/// Per-entity neighbor lists, ordered best-first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupIndex {
    groups: Vec<Vec<usize>>,
}

pub type GeometricGroupIndex = GroupIndex;
pub type SemanticGroupIndex = GroupIndex;

impl GroupIndex {
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        Self { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Flattened `(owner, member)` rows plus segment offsets per owner.
    pub fn pairs(&self) -> GroupPairs {
        let mut owners = Vec::new();
        let mut members = Vec::new();
        let mut offsets = vec![0];
        for (i, g) in self.groups.iter().enumerate() {
            for &j in g {
                owners.push(i);
                members.push(j);
            }
            offsets.push(members.len());
        }
        GroupPairs {
            owners,
            members,
            offsets,
        }
    }

    /// Relabels entities: entity `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut groups = vec![Vec::new(); self.groups.len()];
        for (i, g) in self.groups.iter().enumerate() {
            groups[perm[i]] = g.iter().map(|&j| perm[j]).collect();
        }
        Self { groups }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.groups.len() != n {
            return Err(Error::dim(format!("{} groups for {n} entities", self.groups.len())));
        }
        for g in &self.groups {
            if let Some(&bad) = g.iter().find(|&&j| j >= n) {
                return Err(Error::Index { index: bad, len: n });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPairs {
    pub owners: Vec<usize>,
    pub members: Vec<usize>,
    pub offsets: Vec<usize>,
}

/// Row-wise top-K with a caller-supplied "better" order and tie rule lower index first.
pub(crate) fn select_top_k(
    scores: &Tensor,
    k: usize,
    lowest: bool,
    admissible: impl Fn(usize, usize) -> bool,
) -> Result<GroupIndex> {
    if k == 0 {
        return Err(Error::config("group size must be positive"));
    }
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::dim(format!(
            "score matrix must be square, got {}x{}",
            n,
            scores.cols()
        )));
    }
    // Repeated best-remaining selection, O(n k) per row.
    let better = |a: f64, b: f64| if lowest { a < b } else { a > b };
    let groups = (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut taken = vec![false; n];
            let mut picked = Vec::with_capacity(k);
            while picked.len() < k {
                let mut best: Option<usize> = None;
                for j in 0..n {
                    if taken[j] || !admissible(i, j) {
                        continue;
                    }
                    // Strict comparison keeps the lower index on ties.
                    if best.is_none_or(|b| better(row[j], row[b])) {
                        best = Some(j);
                    }
                }
                let Some(j) = best else { break };
                taken[j] = true;
                picked.push(j);
            }
            picked
        })
        .collect();
    Ok(GroupIndex { groups })
}

/// Picks, per row, the `k` admissible columns with the lowest score.
///
/// `classes`, when given, restricts candidates to entities of the same class.
pub fn select_geometric_neighbors(
    scores: &Tensor,
    k: usize,
    exclude_self: bool,
    classes: Option<&[usize]>,
) -> Result<GeometricGroupIndex> {
    if let Some(c) = classes {
        if c.len() != scores.rows() {
            return Err(Error::dim("class mask length differs from score matrix"));
        }
    }
    select_top_k(scores, k, true, |i, j| {
        (!exclude_self || i != j) && classes.is_none_or(|c| c[i] == c[j])
    })
}
