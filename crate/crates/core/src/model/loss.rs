//! Box regression, object classification and multi-label interaction losses.

use super::matching::Assignment;
use super::network::{HeadOutput, ModelOutput};
use super::{ClsLossKind, GtPair, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::numerics::{Graph, Tensor, Var};

/// Coefficients of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub box_l1: f64,
    pub giou: f64,
    pub object: f64,
    pub interaction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_l1: 2.5,
            giou: 1.0,
            object: 1.0,
            interaction: 1.0,
        }
    }
}

impl LossWeights {
    /// Weighted sum of `(box_l1, giou, object, interaction)` component values.
    pub fn combine(&self, c: [f64; 4]) -> f64 {
        self.box_l1 * c[0] + self.giou * c[1] + self.object * c[2] + self.interaction * c[3]
    }
}

/// Loss values of one forward pass. Components refer to the final layer;
/// `total` also includes intermediate-layer terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub box_l1: f64,
    pub giou: f64,
    pub object: f64,
    pub interaction: f64,
    pub total: f64,
}

/// `1 - GIoU(a, b)`, in `[0, 2]`.
pub fn giou_loss(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(1.0 - giou(a, b)?)
}

/// Per-row `1 - GIoU` between predicted boxes `pred` (`n x 4`, center-size)
/// and fixed `target` boxes. Corners are not clipped to the frame.
pub fn giou_loss_rows(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let (n, c) = g.shape(pred);
    if c != 4 || target.shape() != [n, 4] {
        return Err(Error::dim(format!("giou rows: {:?} vs {:?}", g.shape(pred), target.shape())));
    }
    let to_corners = Tensor::from_rows(&[
        vec![1.0, 0.0, 1.0, 0.0],
        vec![0.0, 1.0, 0.0, 1.0],
        vec![-0.5, 0.0, 0.5, 0.0],
        vec![0.0, -0.5, 0.0, 0.5],
    ])?;
    let mut tc = Vec::with_capacity(4 * n);
    let mut t_area = Vec::with_capacity(n);
    for r in 0..n {
        let [cx, cy, w, h] = [target.get(r, 0), target.get(r, 1), target.get(r, 2), target.get(r, 3)];
        tc.extend([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]);
        t_area.push(w * h);
    }
    let m = g.constant(to_corners);
    let pc = g.matmul(pred, m)?;
    let tc = g.constant(Tensor::new(&[n, 4], tc)?);
    let t_area = g.constant(Tensor::new(&[n, 1], t_area)?);
    let hi = g.max(pc, tc)?;
    let lo = g.min(pc, tc)?;

    let lo_max = g.slice_cols(hi, 0, 2)?;
    let hi_min = g.slice_cols(lo, 2, 2)?;
    let span = g.sub(hi_min, lo_max)?;
    let span = g.relu(span)?;
    let iw = g.slice_cols(span, 0, 1)?;
    let ih = g.slice_cols(span, 1, 1)?;
    let inter = g.mul(iw, ih)?;

    let pw = g.slice_cols(pred, 2, 1)?;
    let ph = g.slice_cols(pred, 3, 1)?;
    let p_area = g.mul(pw, ph)?;
    let union = g.add(p_area, t_area)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let hull_hi = g.slice_cols(hi, 2, 2)?;
    let hull_lo = g.slice_cols(lo, 0, 2)?;
    let hull_wh = g.sub(hull_hi, hull_lo)?;
    let hw = g.slice_cols(hull_wh, 0, 1)?;
    let hh = g.slice_cols(hull_wh, 1, 1)?;
    let hull = g.mul(hw, hh)?;
    let slack = g.sub(hull, union)?;
    let penalty = g.div(slack, hull)?;
    let gi = g.sub(iou, penalty)?;
    let neg = g.neg(gi)?;
    g.add_scalar(neg, 1.0)
}

/// Lower clamp applied inside the clipped negative logarithm.
const LOG_CLAMP: f64 = 1e-8;

/// Summed asymmetric loss over every element of `logits`:
/// `-y (1-p)^gp log p - (1-y) pm^gn log(1-pm)` with `pm = max(p - clip, 0)`.
pub fn asymmetric_cls_loss(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    gamma_pos: f64,
    gamma_neg: f64,
    clip: f64,
) -> Result<Var> {
    check_targets(g, logits, targets)?;
    let y = g.constant(targets.clone());
    let not_y = g.constant(complement(targets)?);
    let p = g.sigmoid(logits)?;

    let log_p = g.log_sigmoid(logits)?;
    let mut pos = g.mul(y, log_p)?;
    if gamma_pos != 0.0 {
        let q = g.neg(p)?;
        let q = g.add_scalar(q, 1.0)?;
        let focus = g.pow_const(q, gamma_pos)?;
        pos = g.mul(pos, focus)?;
    }

    let (pm, log_q) = if clip > 0.0 {
        let shifted = g.add_scalar(p, -clip)?;
        let pm = g.relu(shifted)?;
        let q = g.neg(pm)?;
        let q = g.add_scalar(q, 1.0)?;
        let q = g.clamp_min(q, LOG_CLAMP)?;
        (pm, g.ln(q)?)
    } else {
        let neg_logits = g.neg(logits)?;
        (p, g.log_sigmoid(neg_logits)?)
    };
    let mut negt = g.mul(not_y, log_q)?;
    if gamma_neg != 0.0 {
        let focus = g.pow_const(pm, gamma_neg)?;
        negt = g.mul(negt, focus)?;
    }
    let both = g.add(pos, negt)?;
    let s = g.sum_all(both)?;
    g.neg(s)
}

/// Summed sigmoid focal loss with balance `alpha` and focusing `gamma`.
pub fn focal_cls_loss(g: &mut Graph, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    check_targets(g, logits, targets)?;
    let y = g.constant(targets.clone());
    let not_y = g.constant(complement(targets)?);
    let p = g.sigmoid(logits)?;
    let log_p = g.log_sigmoid(logits)?;
    let neg_logits = g.neg(logits)?;
    let log_q = g.log_sigmoid(neg_logits)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let fq = g.pow_const(q, gamma)?;
    let fp = g.pow_const(p, gamma)?;
    let pos = g.mul(y, log_p)?;
    let pos = g.mul(pos, fq)?;
    let pos = g.scale(pos, alpha)?;
    let negt = g.mul(not_y, log_q)?;
    let negt = g.mul(negt, fp)?;
    let negt = g.scale(negt, 1.0 - alpha)?;
    let both = g.add(pos, negt)?;
    let s = g.sum_all(both)?;
    g.neg(s)
}

fn check_targets(g: &Graph, logits: Var, targets: &Tensor) -> Result<()> {
    let (r, c) = g.shape(logits);
    if targets.shape() != [r, c] {
        return Err(Error::dim(format!("targets {:?} for logits {r}x{c}", targets.shape())));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Validation("multi-label targets must be 0 or 1".into()));
    }
    Ok(())
}

fn complement(t: &Tensor) -> Result<Tensor> {
    Tensor::new(t.shape(), t.data().iter().map(|v| 1.0 - v).collect())
}

struct BoxTerms {
    l1: Var,
    giou: Var,
}

fn box_terms(g: &mut Graph, heads: &HeadOutput, gts: &[GtPair], assignment: &Assignment, norm: f64) -> Result<BoxTerms> {
    let rows: Vec<usize> = assignment.query.clone();
    let target = |pick: fn(&GtPair) -> BBox| -> Result<Tensor> {
        Tensor::new(&[gts.len(), 4], gts.iter().flat_map(|p| pick(p).to_array()).collect())
    };
    let th = target(|p| p.human)?;
    let to = target(|p| p.object)?;
    let ph = g.gather_rows(heads.boxes_h, &rows)?;
    let po = g.gather_rows(heads.boxes_o, &rows)?;
    let mut l1_parts = Vec::new();
    let mut giou_parts = Vec::new();
    for (p, t) in [(ph, th), (po, to)] {
        let tv = g.constant(t.clone());
        let d = g.sub(p, tv)?;
        let d = g.abs(d)?;
        l1_parts.push(g.sum_all(d)?);
        let gl = giou_loss_rows(g, p, &t)?;
        giou_parts.push(g.sum_all(gl)?);
    }
    let l1 = g.add(l1_parts[0], l1_parts[1])?;
    let gi = g.add(giou_parts[0], giou_parts[1])?;
    Ok(BoxTerms {
        l1: g.scale(l1, 1.0 / norm)?,
        giou: g.scale(gi, 1.0 / norm)?,
    })
}

/// Weighted cross-entropy over all queries; unmatched queries target the
/// "no object" class.
fn object_term(
    g: &mut Graph,
    obj_logits: Var,
    gts: &[GtPair],
    assignment: &Assignment,
    eos_weight: f64,
) -> Result<Var> {
    let (q, c) = g.shape(obj_logits);
    let no_object = c - 1;
    let mut target = vec![no_object; q];
    for (gi, qi) in assignment.pairs() {
        if gts[gi].object_class >= no_object {
            return Err(Error::Index {
                index: gts[gi].object_class,
                len: no_object,
            });
        }
        target[qi] = gts[gi].object_class;
    }
    let weights: Vec<f64> = target
        .iter()
        .map(|&t| if t == no_object { eos_weight } else { 1.0 })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let logp = g.log_softmax_rows(obj_logits)?;
    let at: Vec<(usize, usize)> = target.iter().copied().enumerate().collect();
    let picked = g.select(logp, &at)?;
    let w = g.constant(Tensor::new(&[q, 1], weights)?);
    let weighted = g.mul(picked, w)?;
    let s = g.sum_all(weighted)?;
    g.scale(s, -1.0 / wsum.max(f64::MIN_POSITIVE))
}

/// Composite training loss for one scene under a fixed assignment.
///
/// Box terms are normalized by the number of ground-truth pairs, the
/// interaction term (on matched queries only) by the number of positive labels.
pub fn hoi_loss(
    g: &mut Graph,
    out: &ModelOutput,
    gts: &[GtPair],
    assignment: &Assignment,
    config: &ModelConfig,
) -> Result<(Var, LossComponents)> {
    if assignment.len() != gts.len() {
        return Err(Error::dim("assignment does not cover every ground truth"));
    }
    let w = &config.loss;
    let norm = gts.len().max(1) as f64;
    let final_heads = HeadOutput {
        boxes_h: out.boxes_h,
        boxes_o: out.boxes_o,
        obj_logits: out.obj_logits,
    };
    let mut comps = LossComponents::default();
    let mut terms: Vec<Var> = Vec::new();

    let layers: Vec<(HeadOutput, bool)> = out
        .aux
        .iter()
        .map(|h| (*h, false))
        .chain(std::iter::once((final_heads, true)))
        .collect();
    for (heads, is_final) in layers {
        let obj = object_term(g, heads.obj_logits, gts, assignment, config.eos_weight)?;
        terms.push(g.scale(obj, w.object)?);
        if is_final {
            comps.object = g.value(obj).item();
        }
        if !gts.is_empty() {
            let b = box_terms(g, &heads, gts, assignment, norm)?;
            terms.push(g.scale(b.l1, w.box_l1)?);
            terms.push(g.scale(b.giou, w.giou)?);
            if is_final {
                comps.box_l1 = g.value(b.l1).item();
                comps.giou = g.value(b.giou).item();
            }
        }
    }

    if !gts.is_empty() {
        let c = config.n_interactions;
        let mut targets = vec![0.0; gts.len() * c];
        for (gi, gt) in gts.iter().enumerate() {
            for &a in &gt.interactions {
                if a >= c {
                    return Err(Error::Index { index: a, len: c });
                }
                targets[gi * c + a] = 1.0;
            }
        }
        let positives = targets.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
        let targets = Tensor::new(&[gts.len(), c], targets)?;
        let logits = g.gather_rows(out.inter_logits, &assignment.query)?;
        let raw = match config.cls_loss {
            ClsLossKind::Asymmetric {
                gamma_pos,
                gamma_neg,
                clip,
            } => asymmetric_cls_loss(g, logits, &targets, gamma_pos, gamma_neg, clip)?,
            ClsLossKind::Focal { alpha, gamma } => focal_cls_loss(g, logits, &targets, alpha, gamma)?,
        };
        let inter = g.scale(raw, 1.0 / positives)?;
        comps.interaction = g.value(inter).item();
        terms.push(g.scale(inter, w.interaction)?);
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    comps.total = g.value(total).item();
    Ok((total, comps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn giou_loss_cases() {
        let a = b(0.25, 0.25, 0.5, 0.5);
        let c = b(0.5, 0.5, 0.5, 0.5);
        // Hull 0.75 x 0.75; union 0.4375.
        let want = 1.0 - (1.0 / 7.0 - (0.5625 - 0.4375) / 0.5625);
        assert!((giou_loss(&a, &c).unwrap() - want).abs() < 1e-12);
        assert!((giou_loss(&a, &c).unwrap() - 1.0794).abs() < 1e-4);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let far = giou_loss(&b(0.01, 0.01, 0.001, 0.001), &b(0.99, 0.99, 0.001, 0.001)).unwrap();
        assert!(far > 1.99 && far <= 2.0);
        assert!(giou_loss(&a, &BBox::raw(0.5, 0.5, 0.0, 0.1)).is_err());
    }

    #[test]
    fn graph_giou_matches_scalar_inside_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let mut rand_box = || {
                let w = rng.gen_range(0.02..0.4);
                let h = rng.gen_range(0.02..0.4);
                b(rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h)
            };
            let (p, t) = (rand_box(), rand_box());
            let mut g = Graph::new();
            let pv = g.constant(Tensor::row_vector(p.to_array().to_vec()).unwrap());
            let tt = Tensor::row_vector(t.to_array().to_vec()).unwrap();
            let l = giou_loss_rows(&mut g, pv, &tt).unwrap();
            assert!((g.value(l).item() - giou_loss(&p, &t).unwrap()).abs() < 1e-12);
        }
    }

    fn scalar_loss(f: impl Fn(&mut Graph, Var, &Tensor) -> Result<Var>, x: f64, y: f64) -> f64 {
        let mut g = Graph::new();
        let l = g.input(Tensor::scalar(x));
        let t = Tensor::scalar(y);
        let out = f(&mut g, l, &t).unwrap();
        g.value(out).item()
    }

    #[test]
    fn asymmetric_loss_cases() {
        let bce = |x: f64, y: f64| -(y * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + x.exp())).ln());
        for &(x, y) in &[(0.0, 1.0), (1.3, 0.0), (-2.1, 1.0), (0.4, 0.0)] {
            let v = scalar_loss(|g, l, t| asymmetric_cls_loss(g, l, t, 0.0, 0.0, 0.0), x, y);
            assert!((v - bce(x, y)).abs() < 1e-12);
        }
        let v = scalar_loss(|g, l, t| asymmetric_cls_loss(g, l, t, 0.0, 4.0, 0.05), 0.0, 1.0);
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = scalar_loss(|g, l, t| asymmetric_cls_loss(g, l, t, 0.0, 4.0, 0.05), 30.0, 1.0);
        assert!(v < 1e-12);
        let v = scalar_loss(|g, l, t| asymmetric_cls_loss(g, l, t, 0.0, 4.0, 0.05), -30.0, 0.0);
        assert_eq!(v, 0.0);
        // Clipping: p = 0.5 shifts to 0.45, loss 0.45^4 * -ln(0.55).
        let v = scalar_loss(|g, l, t| asymmetric_cls_loss(g, l, t, 0.0, 4.0, 0.05), 0.0, 0.0);
        assert!((v - 0.45f64.powi(4) * -(0.55f64.ln())).abs() < 1e-12);
        let mut g = Graph::new();
        let l = g.input(Tensor::scalar(0.0));
        assert!(asymmetric_cls_loss(&mut g, l, &Tensor::scalar(0.5), 0.0, 4.0, 0.05).is_err());
    }

    #[test]
    fn focal_loss_cases() {
        let v = scalar_loss(|g, l, t| focal_cls_loss(g, l, t, 0.5, 0.0), 0.0, 1.0);
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-12);
        let v = scalar_loss(|g, l, t| focal_cls_loss(g, l, t, 0.25, 2.0), 0.0, 0.0);
        assert!((v - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lambda_sum() {
        assert!((LossWeights::default().combine([1.0; 4]) - 5.5).abs() < 1e-12);
    }
}
