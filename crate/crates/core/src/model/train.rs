//! One optimization step: forward, match, loss, backward, AdamW.

use super::loss::{hoi_loss, LossComponents};
use super::matching::{cost_matrix, hungarian_match, Assignment};
use super::network::{HoiModel, ModelOutput, Routing};
use super::GtPair;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Gradients, Graph, ParamStore, Tensor, Var};

/// One training scene: rasterized features, positional embeddings and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub pos: Tensor,
    pub gts: Vec<GtPair>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    /// Learning rate is multiplied by `lr_drop` every this many epochs; 0 disables.
    pub lr_drop_every: usize,
    pub lr_drop: f64,
    pub adamw: AdamW,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_drop_every: 0,
            lr_drop: 0.1,
            adamw: AdamW::default(),
            clip_norm: 0.1,
        }
    }
}

/// Step schedule: `base * drop^(epoch / every)`.
pub fn lr_at_epoch(settings: &TrainSettings, epoch: usize) -> f64 {
    if settings.lr_drop_every == 0 {
        return settings.lr;
    }
    settings.lr * settings.lr_drop.powi((epoch / settings.lr_drop_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean over the batch.
    pub loss: LossComponents,
    /// Norm of the batch-mean gradient before clipping.
    pub grad_norm: f64,
}

/// Matches ground truth to queries for the current predictions.
pub fn assign(g: &Graph, model: &HoiModel, out: &ModelOutput, gts: &[GtPair]) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment {
            query: Vec::new(),
            cost: 0.0,
        });
    }
    let cost = cost_matrix(
        g.value(out.boxes_h),
        g.value(out.boxes_o),
        g.value(out.obj_logits),
        g.value(out.inter_logits),
        gts,
        &model.config.matching,
    )?;
    hungarian_match(&cost)
}

/// Ground truth repeated `repeats` times, capped so every copy still gets its
/// own query.
pub fn repeated_targets(gts: &[GtPair], repeats: usize, n_queries: usize) -> Vec<GtPair> {
    if gts.is_empty() {
        return Vec::new();
    }
    let r = repeats.min(n_queries / gts.len()).max(1);
    let mut out = Vec::with_capacity(r * gts.len());
    for _ in 0..r {
        out.extend_from_slice(gts);
    }
    out
}

/// Forward pass and loss for one scene. Passing `frozen` replays the discrete
/// grouping and matching decisions of an earlier pass.
pub fn scene_loss(
    g: &mut Graph,
    model: &HoiModel,
    store: &ParamStore,
    ex: &Example,
    frozen: Option<(&Routing, &Assignment)>,
) -> Result<(Var, LossComponents, Routing, Assignment)> {
    let (out, routing) = model.forward(g, store, &ex.features, &ex.pos, frozen.map(|f| f.0))?;
    let targets = repeated_targets(&ex.gts, model.config.match_repeats, model.config.n_queries);
    let assignment = match frozen {
        Some((_, a)) => a.clone(),
        None => assign(g, model, &out, &targets)?,
    };
    let (loss, comps) = hoi_loss(g, &out, &targets, &assignment, &model.config)?;
    Ok((loss, comps, routing, assignment))
}

/// Batch-mean gradient, reduced over examples in ascending index order.
pub fn batch_gradients(
    model: &HoiModel,
    store: &ParamStore,
    batch: &[Example],
) -> Result<(Gradients, LossComponents)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut grads = store.zero_grads();
    let mut mean = LossComponents::default();
    for ex in batch {
        let mut g = Graph::new();
        let (loss, c, _, _) = scene_loss(&mut g, model, store, ex, None)?;
        let adj = g.backward(loss)?;
        g.accumulate_param_grads(&adj, &mut grads);
        mean.box_l1 += c.box_l1;
        mean.giou += c.giou;
        mean.object += c.object;
        mean.interaction += c.interaction;
        mean.total += c.total;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    for v in [&mut mean.box_l1, &mut mean.giou, &mut mean.object, &mut mean.interaction, &mut mean.total] {
        *v *= inv;
    }
    Ok((grads, mean))
}

/// One AdamW update on the batch-mean loss at learning rate `lr`.
pub fn train_step(
    model: &HoiModel,
    store: &mut ParamStore,
    batch: &[Example],
    settings: &TrainSettings,
    lr: f64,
) -> Result<StepReport> {
    let (mut grads, loss) = batch_gradients(model, store, batch)?;
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            op: "train_step".into(),
            detail: format!("loss {:?}, step {}", loss, store.step()),
        });
    }
    let grad_norm = if settings.clip_norm > 0.0 {
        grads.clip_norm(settings.clip_norm)
    } else {
        grads.norm()
    };
    store.adamw_step(&grads, &settings.adamw, lr)?;
    Ok(StepReport { loss, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example(c: &ModelConfig, seed: u64, n_gt: usize) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 6;
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let features = Tensor::new(&[t, c.d_feature], r(t * c.d_feature)).unwrap();
        let pos = Tensor::new(&[t, c.d_entity], r(t * c.d_entity)).unwrap();
        let gts = (0..n_gt)
            .map(|i| GtPair {
                human: BBox::new(0.2 + 0.1 * i as f64, 0.4, 0.2, 0.3).unwrap(),
                object: BBox::new(0.6, 0.3 + 0.1 * i as f64, 0.1, 0.15).unwrap(),
                object_class: i % c.n_object_classes,
                interactions: vec![i % c.n_interactions],
            })
            .collect();
        Example { features, pos, gts }
    }

    fn build(c: &ModelConfig) -> (HoiModel, ParamStore) {
        let mut store = ParamStore::new();
        let m = HoiModel::new(c.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (m, store)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let c = ModelConfig::micro();
        let (m, mut store) = build(&c);
        let before = store.flatten();
        let settings = TrainSettings {
            adamw: AdamW {
                weight_decay: 0.0,
                ..AdamW::default()
            },
            ..TrainSettings::default()
        };
        let r = train_step(&m, &mut store, &[example(&c, 1, 1)], &settings, 0.0).unwrap();
        assert!(r.loss.total > 0.0);
        assert_eq!(store.flatten(), before);
    }

    #[test]
    fn repeated_step_is_bit_identical() {
        let c = ModelConfig::micro();
        let batch = vec![example(&c, 1, 2), example(&c, 2, 1)];
        let run = || {
            let (m, mut store) = build(&c);
            let r = train_step(&m, &mut store, &batch, &TrainSettings::default(), 1e-3).unwrap();
            (r.loss.total.to_bits(), store.flatten())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_ground_truth_only_has_object_term() {
        let c = ModelConfig::micro();
        let (m, store) = build(&c);
        let mut g = Graph::new();
        let (_, comps, _, a) = scene_loss(&mut g, &m, &store, &example(&c, 3, 0), None).unwrap();
        assert!(a.is_empty());
        assert_eq!(comps.box_l1, 0.0);
        assert_eq!(comps.giou, 0.0);
        assert_eq!(comps.interaction, 0.0);
        assert!(comps.object > 0.0);
    }

    #[test]
    fn schedule_drops_tenfold() {
        let s = TrainSettings {
            lr: 1e-3,
            lr_drop_every: 3,
            ..TrainSettings::default()
        };
        assert_eq!(lr_at_epoch(&s, 2), 1e-3);
        assert!((lr_at_epoch(&s, 3) - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&s, 7) - 1e-5).abs() < 1e-18);
    }
}
