//! Geometric-aware local transformer.
//!
//! Entities are grouped by the learned proximity score of their boxes, then
//! each entity aggregates its group with per-channel (vector) attention:
//!
//! ```text
//! p_ij  = delta(e_i - e_j)
//! t_ij  = softmax_j( gamma(phi1(q_i) - phi2(q_j) + p_ij) )      per channel
//! q~_i  = theta( sum_j t_ij * (phi3(q_j) + p_ij) ) + q_i
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    proximity_scores, select_geometric_neighbors, BBox, GeometricGroupIndex, ProximityWeights,
};
use crate::numerics::{Axis, Graph, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

/// Whether geometric groups may mix humans and objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    /// Humans group with humans, objects with objects.
    Intra,
    /// One pool over all entities.
    Mixed,
}

/// Input of the relative position encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeSource {
    /// Learned query position embeddings.
    Positional,
    /// Current entity embeddings.
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoConfig {
    pub k: usize,
    pub exclude_self: bool,
    pub squared_distance: bool,
    pub mode: GroupMode,
    pub pe_source: PeSource,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            k: 4,
            exclude_self: true,
            squared_distance: false,
            mode: GroupMode::Intra,
            pe_source: PeSource::Positional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeoLayerParams {
    pub delta: Mlp,
    pub phi1: Linear,
    pub phi2: Linear,
    pub phi3: Linear,
    pub gamma: Mlp,
    pub theta: Linear,
    /// `[w_dis, w_iou, bias]` of the proximity estimator.
    pub proximity: ParamId,
    pub dim: usize,
}

impl GeoLayerParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = ProximityWeights::default();
        Ok(Self {
            delta: Mlp::new(store, &format!("{name}.delta"), &[dim, dim, dim], rng)?,
            phi1: Linear::new(store, &format!("{name}.phi1"), dim, dim, rng)?,
            phi2: Linear::new(store, &format!("{name}.phi2"), dim, dim, rng)?,
            phi3: Linear::new(store, &format!("{name}.phi3"), dim, dim, rng)?,
            gamma: Mlp::new(store, &format!("{name}.gamma"), &[dim, dim, dim], rng)?,
            theta: Linear::new(store, &format!("{name}.theta"), dim, dim, rng)?,
            proximity: store.add(
                format!("{name}.proximity"),
                Tensor::row_vector(vec![w.w_dis, w.w_iou, w.bias])?,
            )?,
            dim,
        })
    }

    pub fn proximity_weights(&self, store: &ParamStore) -> ProximityWeights {
        let v = store.value(self.proximity).data();
        ProximityWeights {
            w_dis: v[0],
            w_iou: v[1],
            bias: v[2],
        }
    }

    pub fn numel(&self) -> usize {
        self.delta.numel()
            + self.phi1.numel()
            + self.phi2.numel()
            + self.phi3.numel()
            + self.gamma.numel()
            + self.theta.numel()
            + 3
    }
}

/// `delta(e_i - e_j)`; rows of `e_i` and `e_j` are paired one to one.
pub fn position_encoding(
    g: &mut Graph,
    store: &ParamStore,
    params: &GeoLayerParams,
    e_i: Var,
    e_j: Var,
) -> Result<Var> {
    let diff = g.sub(e_i, e_j)?;
    params.delta.forward(g, store, diff)
}

/// Dispatch weights of one entity over its `K` group members, softmax-normalized
/// per channel over the members.
pub fn dispatch_matrix(
    g: &mut Graph,
    store: &ParamStore,
    params: &GeoLayerParams,
    q_i: Var,
    neighbors: Var,
    p: Var,
) -> Result<Var> {
    if g.value(q_i).rows() != 1 {
        return Err(Error::dim("dispatch_matrix expects a single query row"));
    }
    let a = params.phi1.forward(g, store, q_i)?;
    let b = params.phi2.forward(g, store, neighbors)?;
    let rel = g.sub(p, b)?;
    let rel = g.add_row(rel, a)?;
    let logits = params.gamma.forward(g, store, rel)?;
    g.softmax(logits, Axis::Rows)
}

/// Pair position encodings for every `(owner, member)` of `groups`, in the
/// member order used by [`aggregate_geometric`]. Returns `None` when every
/// group is empty.
pub fn pair_position_encodings(
    g: &mut Graph,
    store: &ParamStore,
    params: &GeoLayerParams,
    source: Var,
    groups: &GeometricGroupIndex,
) -> Result<Option<Var>> {
    let pairs = sorted_pairs(groups);
    if pairs.members.is_empty() {
        return Ok(None);
    }
    let ei = g.gather_rows(source, &pairs.owners)?;
    let ej = g.gather_rows(source, &pairs.members)?;
    position_encoding(g, store, params, ei, ej).map(Some)
}

/// Members sorted ascending inside each group, which fixes the accumulation order.
fn sorted_pairs(groups: &GeometricGroupIndex) -> crate::geometry::GroupPairs {
    let sorted = GeometricGroupIndex::new(
        groups
            .groups()
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.sort_unstable();
                m
            })
            .collect(),
    );
    sorted.pairs()
}

/// Grouped vector attention with residual; entities with an empty group pass
/// through unchanged.
pub fn aggregate_geometric(
    g: &mut Graph,
    store: &ParamStore,
    params: &GeoLayerParams,
    q: Var,
    groups: &GeometricGroupIndex,
    p_pairs: Option<Var>,
) -> Result<Var> {
    let (n, d) = g.shape(q);
    groups.validate(n)?;
    let pairs = sorted_pairs(groups);
    let Some(p) = p_pairs else {
        if !pairs.members.is_empty() {
            return Err(Error::dim("position encodings missing for non-empty groups"));
        }
        return Ok(q);
    };
    if g.shape(p) != (pairs.members.len(), d) {
        return Err(Error::dim(format!(
            "position encodings {:?} for {} pairs of width {d}",
            g.shape(p),
            pairs.members.len()
        )));
    }
    let a = params.phi1.forward(g, store, q)?;
    let b = params.phi2.forward(g, store, q)?;
    let c = params.phi3.forward(g, store, q)?;
    let ai = g.gather_rows(a, &pairs.owners)?;
    let bj = g.gather_rows(b, &pairs.members)?;
    let cj = g.gather_rows(c, &pairs.members)?;
    let rel = g.sub(ai, bj)?;
    let rel = g.add(rel, p)?;
    let logits = params.gamma.forward(g, store, rel)?;
    let weights = g.segment_softmax(logits, &pairs.offsets)?;
    let values = g.add(cj, p)?;
    let weighted = g.mul(weights, values)?;
    let pooled = g.segment_sum(weighted, &pairs.offsets)?;
    let mut update = params.theta.forward(g, store, pooled)?;
    let empty: Vec<usize> = (0..n).filter(|&i| groups.group(i).is_empty()).collect();
    if !empty.is_empty() {
        let mut mask = Tensor::full(&[n, d], 1.0);
        for i in empty {
            mask.data_mut()[i * d..(i + 1) * d].fill(0.0);
        }
        let mask = g.constant(mask);
        update = g.mul(update, mask)?;
    }
    g.add(q, update)
}

/// Groups used by one geometric layer, kept so a pass can be replayed with
/// identical discrete choices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeoRouting {
    Intra {
        humans: GeometricGroupIndex,
        objects: GeometricGroupIndex,
    },
    Mixed(GeometricGroupIndex),
}

/// Builds groups from `boxes` using the layer's proximity estimator.
pub fn build_groups(
    store: &ParamStore,
    params: &GeoLayerParams,
    cfg: &GeoConfig,
    boxes: &[BBox],
) -> Result<GeometricGroupIndex> {
    let scores = proximity_scores(boxes, params.proximity_weights(store), cfg.squared_distance)?;
    select_geometric_neighbors(&scores, cfg.k, cfg.exclude_self, None)
}

pub struct GeoInputs<'a> {
    pub q_h: Var,
    pub q_o: Var,
    pub pos_h: Var,
    pub pos_o: Var,
    pub boxes_h: &'a [BBox],
    pub boxes_o: &'a [BBox],
}

/// Applies grouping and aggregation to the human and object query sets.
pub fn geometric_layer(
    g: &mut Graph,
    store: &ParamStore,
    params: &GeoLayerParams,
    cfg: &GeoConfig,
    inputs: GeoInputs<'_>,
    frozen: Option<&GeoRouting>,
) -> Result<(Var, Var, GeoRouting)> {
    if cfg.k == 0 {
        return Err(Error::config("geometric group size must be positive"));
    }
    let GeoInputs {
        q_h,
        q_o,
        pos_h,
        pos_o,
        boxes_h,
        boxes_o,
    } = inputs;
    let (nh, no) = (g.shape(q_h).0, g.shape(q_o).0);
    if boxes_h.len() != nh || boxes_o.len() != no {
        return Err(Error::dim("one box per query is required"));
    }
    let (src_h, src_o) = match cfg.pe_source {
        PeSource::Positional => (pos_h, pos_o),
        PeSource::Content => (q_h, q_o),
    };
    match cfg.mode {
        GroupMode::Intra => {
            let (gh, go) = match frozen {
                Some(GeoRouting::Intra { humans, objects }) => (humans.clone(), objects.clone()),
                Some(GeoRouting::Mixed(_)) => {
                    return Err(Error::config("frozen routing does not match group mode"))
                }
                None => (
                    build_groups(store, params, cfg, boxes_h)?,
                    build_groups(store, params, cfg, boxes_o)?,
                ),
            };
            let ph = pair_position_encodings(g, store, params, src_h, &gh)?;
            let out_h = aggregate_geometric(g, store, params, q_h, &gh, ph)?;
            let po = pair_position_encodings(g, store, params, src_o, &go)?;
            let out_o = aggregate_geometric(g, store, params, q_o, &go, po)?;
            Ok((
                out_h,
                out_o,
                GeoRouting::Intra {
                    humans: gh,
                    objects: go,
                },
            ))
        }
        GroupMode::Mixed => {
            let groups = match frozen {
                Some(GeoRouting::Mixed(gr)) => gr.clone(),
                Some(GeoRouting::Intra { .. }) => {
                    return Err(Error::config("frozen routing does not match group mode"))
                }
                None => {
                    let all: Vec<BBox> = boxes_h.iter().chain(boxes_o).copied().collect();
                    build_groups(store, params, cfg, &all)?
                }
            };
            let q = g.concat_rows(&[q_h, q_o])?;
            let src = g.concat_rows(&[src_h, src_o])?;
            let p = pair_position_encodings(g, store, params, src, &groups)?;
            let out = aggregate_geometric(g, store, params, q, &groups, p)?;
            let out_h = g.slice_rows(out, 0, nh)?;
            let out_o = g.slice_rows(out, nh, no)?;
            Ok((out_h, out_o, GeoRouting::Mixed(groups)))
        }
    }
}
