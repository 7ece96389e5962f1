//! Detection-side protocol: score composition, pairwise NMS, greedy triplet
//! matching, per-class AP and the Full/Rare/Non-Rare means.

pub mod oracle;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::model::{sigmoid, softmax, OutputValues};
use crate::synth::Scene;

pub const DEFAULT_NMS_IOU: f64 = 0.7;
pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub human: BBox,
    pub object: BBox,
    pub object_class: usize,
    pub interaction: usize,
    pub score: f64,
}

/// Ground-truth triplet in box form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub human: BBox,
    pub object: BBox,
    pub interaction: usize,
}

pub fn scene_gt_triplets(scene: &Scene) -> Vec<GtTriplet> {
    scene
        .triplets
        .iter()
        .map(|t| GtTriplet {
            human: scene.humans[t.human],
            object: scene.objects[t.object].bbox,
            interaction: t.interaction,
        })
        .collect()
}

/// One candidate per (query, interaction class). The score is the interaction
/// probability times the probability of the best real object class.
pub fn predictions_from_output(out: &OutputValues) -> Vec<Prediction> {
    let q = out.boxes_h.rows();
    let n_int = out.inter_logits.cols();
    let mut preds = Vec::with_capacity(q * n_int);
    for i in 0..q {
        let probs = softmax(out.obj_logits.row(i));
        let real = &probs[..probs.len() - 1];
        let (class, p_obj) = real
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (c, &p)| if p > b.1 { (c, p) } else { b });
        let human = BBox::from_slice(out.boxes_h.row(i)).unwrap_or(BBox::raw(0.5, 0.5, 1e-6, 1e-6));
        let object = BBox::from_slice(out.boxes_o.row(i)).unwrap_or(BBox::raw(0.5, 0.5, 1e-6, 1e-6));
        for a in 0..n_int {
            preds.push(Prediction {
                human,
                object,
                object_class: class,
                interaction: a,
                score: sigmoid(out.inter_logits.get(i, a)) * p_obj,
            });
        }
    }
    preds
}

/// Stable descending sort by score; equal scores keep their input order.
pub fn sort_by_score(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Suppresses a prediction when a kept one of the same interaction class
/// overlaps it above `iou_thr` on both the human and the object box.
pub fn pairwise_nms(preds: &[Prediction], iou_thr: f64, top_k: usize) -> Vec<Prediction> {
    let mut sorted = preds.to_vec();
    sort_by_score(&mut sorted);
    let mut kept: Vec<Prediction> = Vec::new();
    for p in sorted {
        if kept.len() == top_k {
            break;
        }
        let dup = kept.iter().any(|k| {
            k.interaction == p.interaction
                && iou_unchecked(&k.human, &p.human) > iou_thr
                && iou_unchecked(&k.object, &p.object) > iou_thr
        });
        if !dup {
            kept.push(p);
        }
    }
    kept
}

/// True-positive flag of each prediction (assumed score-sorted). A ground
/// truth is consumed by the first prediction that reaches it; among several
/// eligible ones the largest IoU sum wins, then the lower index.
pub fn match_predictions(preds: &[Prediction], gts: &[GtTriplet], iou_thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if used[j] || gt.interaction != p.interaction {
                    continue;
                }
                let ih = iou_unchecked(&p.human, &gt.human);
                let io = iou_unchecked(&p.object, &gt.object);
                if ih >= iou_thr && io >= iou_thr && best.is_none_or(|b| ih + io > b.1) {
                    best = Some((j, ih + io));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMethod {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// AP of a ranked list of TP flags against `n_gt` ground truths; `None`
/// when there is nothing to recall.
pub fn average_precision(flags: &[bool], n_gt: usize, method: ApMethod) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Envelope: best precision at this rank or any later one.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = match method {
        ApMethod::AllPoint => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                if *r > prev {
                    area += (r - prev) * p;
                    prev = *r;
                }
            }
            area
        }
        ApMethod::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let t = t as f64 / 10.0;
                let first = recall.iter().position(|&r| r >= t - 1e-12);
                sum += first.map_or(0.0, |i| precision[i]);
            }
            sum / 11.0
        }
    };
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class: usize,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassAp>,
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub n_predictions: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Means over the classes that have an AP, in class order.
pub fn mean_ap(classes: Vec<ClassAp>, n_predictions: usize) -> EvalReport {
    let full = mean(classes.iter().filter_map(|c| c.ap));
    let rare = mean(classes.iter().filter(|c| c.rare).filter_map(|c| c.ap));
    let non_rare = mean(classes.iter().filter(|c| !c.rare).filter_map(|c| c.ap));
    EvalReport {
        classes,
        full,
        rare,
        non_rare,
        n_predictions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub nms_iou: f64,
    pub top_k: usize,
    pub match_iou: f64,
    pub method: ApMethod,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            nms_iou: DEFAULT_NMS_IOU,
            top_k: DEFAULT_TOP_K,
            match_iou: DEFAULT_MATCH_IOU,
            method: ApMethod::AllPoint,
        }
    }
}

/// Scores a dataset. `scenes` pairs the post-NMS predictions of each scene
/// with its ground truth; `rare` flags rare interaction classes.
pub fn evaluate(
    scenes: &[(Vec<Prediction>, Vec<GtTriplet>)],
    rare: &[bool],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let n_classes = rare.len();
    let mut ranked: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_classes];
    let mut n_gt = vec![0usize; n_classes];
    let mut n_predictions = 0;
    for (preds, gts) in scenes {
        if let Some(g) = gts.iter().find(|g| g.interaction >= n_classes) {
            return Err(Error::data(format!("interaction {} out of range", g.interaction)));
        }
        let mut sorted = preds.clone();
        sort_by_score(&mut sorted);
        let flags = match_predictions(&sorted, gts, settings.match_iou);
        for (p, f) in sorted.iter().zip(flags) {
            if p.interaction >= n_classes {
                return Err(Error::data(format!("interaction {} out of range", p.interaction)));
            }
            ranked[p.interaction].push((p.score, f));
        }
        for g in gts {
            n_gt[g.interaction] += 1;
        }
        n_predictions += preds.len();
    }
    let classes = (0..n_classes)
        .map(|c| {
            let list = &mut ranked[c];
            list.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = list.iter().map(|x| x.1).collect();
            ClassAp {
                class: c,
                ap: average_precision(&flags, n_gt[c], settings.method),
                n_gt: n_gt[c],
                rare: rare[c],
            }
        })
        .collect();
    Ok(mean_ap(classes, n_predictions))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Per-class rows `class_id,ap,n_gt,rare`, then `full`, `rare` and `non_rare`
/// summary rows. Absent values are left empty.
pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("class_id,ap,n_gt,rare\n");
    for c in &r.classes {
        let _ = writeln!(s, "{},{},{},{}", c.class, fmt_opt(c.ap), c.n_gt, c.rare as u8);
    }
    let total: usize = r.classes.iter().map(|c| c.n_gt).sum();
    let rare_gt: usize = r.classes.iter().filter(|c| c.rare).map(|c| c.n_gt).sum();
    let _ = writeln!(s, "full,{},{},", fmt_opt(r.full), total);
    let _ = writeln!(s, "rare,{},{},1", fmt_opt(r.rare), rare_gt);
    let _ = writeln!(s, "non_rare,{},{},0", fmt_opt(r.non_rare), total - rare_gt);
    s
}

fn fmt_box(b: &BBox) -> String {
    format!("[{:.6},{:.6},{:.6},{:.6}]", b.cx, b.cy, b.w, b.h)
}

/// One JSON record per prediction with six-decimal fixed-point numbers.
pub fn prediction_line(seed: u64, p: &Prediction) -> String {
    format!(
        "{{\"seed\":{seed},\"human\":{},\"object\":{},\"object_class\":{},\"interaction\":{},\"score\":{:.6}}}",
        fmt_box(&p.human),
        fmt_box(&p.object),
        p.object_class,
        p.interaction,
        p.score
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn pred(h: BBox, o: BBox, a: usize, s: f64) -> Prediction {
        Prediction {
            human: h,
            object: o,
            object_class: 0,
            interaction: a,
            score: s,
        }
    }

    #[test]
    fn nms_cases() {
        let h = b(0.3, 0.3, 0.2, 0.2);
        let o = b(0.6, 0.6, 0.2, 0.2);
        let kept = pairwise_nms(&[pred(h, o, 0, 0.4), pred(h, o, 0, 0.9)], 0.7, 100);
        assert_eq!(kept, vec![pred(h, o, 0, 0.9)]);

        let far = pairwise_nms(&[pred(h, o, 0, 0.9), pred(o, h, 0, 0.8)], 0.7, 100);
        assert_eq!(far.len(), 2);

        // Human IoU 0.8, object IoU 0.6: the object side keeps both.
        let h2 = b(0.3 + 0.2 / 9.0, 0.3, 0.2, 0.2);
        let o2 = b(0.6 + 0.05, 0.6, 0.2, 0.2);
        assert!((iou_unchecked(&h, &h2) - 0.8).abs() < 1e-12);
        assert!((iou_unchecked(&o, &o2) - 0.6).abs() < 1e-12);
        assert_eq!(pairwise_nms(&[pred(h, o, 0, 0.9), pred(h2, o2, 0, 0.8)], 0.7, 100).len(), 2);
    }

    #[test]
    fn nms_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.gen_range(1..20);
            let mut r = || b(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), 0.3, 0.3);
            let preds: Vec<Prediction> = (0..n)
                .map(|i| {
                    let (h, o) = (r(), r());
                    pred(h, o, i % 2, (i as f64 * 0.37).fract())
                })
                .collect();
            let kept = pairwise_nms(&preds, 0.7, 100);
            assert!(kept.iter().all(|k| preds.contains(k)));
            let mut sorted = preds.clone();
            sort_by_score(&mut sorted);
            assert_eq!(kept[0], sorted[0]);
            assert_eq!(pairwise_nms(&kept, 0.7, 100), kept);
        }
    }

    #[test]
    fn top_k_truncates() {
        let h = b(0.3, 0.3, 0.2, 0.2);
        let o = b(0.6, 0.6, 0.2, 0.2);
        let preds: Vec<Prediction> = (0..5).map(|a| pred(h, o, a, 0.1 * a as f64)).collect();
        let kept = pairwise_nms(&preds, 0.7, 1);
        assert_eq!(kept, vec![preds[4]]);
    }

    #[test]
    fn matching_cases() {
        let h = b(0.3, 0.3, 0.2, 0.2);
        let o = b(0.6, 0.6, 0.2, 0.2);
        let gt = GtTriplet {
            human: h,
            object: o,
            interaction: 1,
        };
        assert_eq!(match_predictions(&[pred(h, o, 1, 0.9)], &[gt], 0.5), vec![true]);
        assert_eq!(match_predictions(&[pred(h, o, 0, 0.9)], &[gt], 0.5), vec![false]);
        // Shifted so the human IoU is 0.4.
        let shift = 0.2 * (1.0 - 0.4) / 1.4;
        let h4 = h.translate(shift, 0.0);
        assert!((iou_unchecked(&h, &h4) - 0.4).abs() < 1e-12);
        assert_eq!(match_predictions(&[pred(h4, o, 1, 0.9)], &[gt], 0.5), vec![false]);
        assert_eq!(
            match_predictions(&[pred(h, o, 1, 0.9), pred(h, o, 1, 0.5)], &[gt], 0.5),
            vec![true, false]
        );
    }

    #[test]
    fn matching_prefers_best_overlap() {
        let h = b(0.3, 0.3, 0.2, 0.2);
        let o = b(0.6, 0.6, 0.2, 0.2);
        let near = GtTriplet {
            human: h.translate(0.02, 0.0),
            object: o,
            interaction: 0,
        };
        let exact = GtTriplet {
            human: h,
            object: o,
            interaction: 0,
        };
        let p = [pred(h, o, 0, 0.9), pred(h, o, 0, 0.8)];
        assert_eq!(match_predictions(&p, &[near, exact], 0.5), vec![true, true]);
        assert_eq!(match_predictions(&p[..1], &[near, exact, exact], 0.5), vec![true]);
    }

    #[test]
    fn at_most_n_gt_true_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let mut r = || b(rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6), 0.3, 0.3);
            let gts: Vec<GtTriplet> = (0..3)
                .map(|i| GtTriplet {
                    human: r(),
                    object: r(),
                    interaction: i % 2,
                })
                .collect();
            let preds: Vec<Prediction> = (0..8).map(|i| pred(r(), r(), i % 2, 1.0 - 0.1 * i as f64)).collect();
            let flags = match_predictions(&preds, &gts, 0.5);
            for c in 0..2 {
                let tp = preds.iter().zip(&flags).filter(|(p, &f)| f && p.interaction == c).count();
                assert!(tp <= gts.iter().filter(|g| g.interaction == c).count());
            }
        }
    }

    #[test]
    fn ap_cases() {
        let all = ApMethod::AllPoint;
        assert_eq!(average_precision(&[true], 1, all), Some(1.0));
        let ap = average_precision(&[true, false, true], 2, all).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 3, all), Some(0.0));
        assert_eq!(average_precision(&[false], 0, all), None);
        assert_eq!(average_precision(&[], 2, all), Some(0.0));
        // 11-point: recall 0..0.5 at precision 1, 0.6..1 at 2/3.
        let ap11 = average_precision(&[true, false, true], 2, ApMethod::ElevenPoint).unwrap();
        assert!((ap11 - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_cases() {
        let c = |class, ap: Option<f64>, rare| ClassAp {
            class,
            ap,
            n_gt: 1,
            rare,
        };
        let r = mean_ap(vec![c(0, Some(1.0), false)], 1);
        assert_eq!(r.full, Some(1.0));
        assert_eq!(r.rare, None);
        let r = mean_ap(vec![c(0, Some(0.5), false), c(1, Some(1.0), true)], 2);
        assert_eq!((r.full, r.rare, r.non_rare), (Some(0.75), Some(1.0), Some(0.5)));
        let r = mean_ap(vec![c(0, Some(0.5), false), c(1, None, false)], 2);
        assert_eq!(r.full, Some(0.5));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let h = b(0.3, 0.3, 0.2, 0.2);
        let o = b(0.6, 0.6, 0.2, 0.2);
        let gts = vec![
            GtTriplet {
                human: h,
                object: o,
                interaction: 0,
            },
            GtTriplet {
                human: h,
                object: o,
                interaction: 2,
            },
        ];
        let preds = vec![pred(h, o, 0, 0.9), pred(h, o, 2, 0.8), pred(o, h, 1, 0.3)];
        let r = evaluate(&[(preds, gts)], &[false, true, false], &EvalSettings::default()).unwrap();
        assert_eq!(r.full, Some(1.0));
        assert_eq!(r.classes[1].ap, None);
        assert_eq!(r.rare, None);
        let csv = report_csv(&r);
        assert!(csv.starts_with("class_id,ap,n_gt,rare\n0,1.000000,1,0\n1,,0,1\n"));
        assert!(csv.ends_with("full,1.000000,2,\nrare,,0,1\nnon_rare,1.000000,2,0\n"));
    }

    #[test]
    fn score_composition() {
        use crate::numerics::Tensor;
        let out = OutputValues {
            boxes_h: Tensor::from_rows(&[vec![0.3, 0.3, 0.2, 0.2]]).unwrap(),
            boxes_o: Tensor::from_rows(&[vec![0.6, 0.6, 0.2, 0.2]]).unwrap(),
            obj_logits: Tensor::from_rows(&[vec![0.0, (3f64).ln(), 0.0]]).unwrap(),
            inter_logits: Tensor::from_rows(&[vec![0.0, 100.0]]).unwrap(),
        };
        let p = predictions_from_output(&out);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].object_class, 1);
        assert!((p[0].score - 0.5 * 0.6).abs() < 1e-12);
        assert!((p[1].score - 0.6).abs() < 1e-12);
    }

    #[test]
    fn dump_line_format() {
        let p = pred(b(0.3, 0.3, 0.2, 0.2), b(0.6, 0.6, 0.2, 0.2), 1, 0.25);
        assert_eq!(
            prediction_line(4, &p),
            "{\"seed\":4,\"human\":[0.300000,0.300000,0.200000,0.200000],\"object\":[0.600000,0.600000,0.200000,0.200000],\"object_class\":0,\"interaction\":1,\"score\":0.250000}"
        );
    }
}
