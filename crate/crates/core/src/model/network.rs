use rand::Rng;

use super::attention::{DecoderLayer, EncoderLayer};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::geo_attention::{geometric_layer, GeoInputs, GeoLayerParams, GeoRouting};
use crate::geometry::{BBox, SemanticGroupIndex};
use crate::numerics::{Graph, Linear, Mlp, Norm, NormKind, ParamId, ParamStore, Tensor, Var};
use crate::sem_group::{semantic_layer, SemLayerParams};

/// Discrete grouping decisions of one forward pass, per decoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Routing {
    pub geometric: Vec<GeoRouting>,
    pub semantic: Vec<SemanticGroupIndex>,
}

/// Box and object-class predictions read from instance embeddings.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub boxes_h: Var,
    pub boxes_o: Var,
    pub obj_logits: Var,
}

#[derive(Debug, Clone)]
pub struct InstanceOutput {
    /// Final normalized human and object embeddings.
    pub human: Var,
    pub object: Var,
    pub pos_h: Var,
    pub pos_o: Var,
    pub heads: HeadOutput,
    /// Predictions from the outputs of every layer but the last.
    pub aux: Vec<HeadOutput>,
    pub routing: Vec<GeoRouting>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub boxes_h: Var,
    pub boxes_o: Var,
    pub obj_logits: Var,
    pub inter_logits: Var,
    pub aux: Vec<HeadOutput>,
}

/// Plain values of a [`ModelOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputValues {
    pub boxes_h: Tensor,
    pub boxes_o: Tensor,
    pub obj_logits: Tensor,
    pub inter_logits: Tensor,
}

impl ModelOutput {
    pub fn values(&self, g: &Graph) -> OutputValues {
        OutputValues {
            boxes_h: g.value(self.boxes_h).clone(),
            boxes_o: g.value(self.boxes_o).clone(),
            obj_logits: g.value(self.obj_logits).clone(),
            inter_logits: g.value(self.inter_logits).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoiModel {
    pub config: ModelConfig,
    pub input_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub human_queries: ParamId,
    pub object_queries: ParamId,
    pub human_pos: ParamId,
    pub object_pos: ParamId,
    pub instance: Vec<DecoderLayer>,
    pub geometric: Vec<GeoLayerParams>,
    pub instance_norm: Norm,
    pub human_box: Mlp,
    pub object_box: Mlp,
    pub object_class: Linear,
    pub interaction: Vec<DecoderLayer>,
    pub semantic: Vec<SemLayerParams>,
    pub interaction_norm: Norm,
    pub interaction_class: Linear,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Result<Tensor> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl HoiModel {
    /// Registers every parameter in `store`. Parameter registration order is
    /// part of the checkpoint layout.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_entity;
        let di = c.d_interaction();
        let nq = c.n_queries;
        let ln = |store: &mut ParamStore, name: &str, dim| Norm::new(store, name, NormKind::Layer, dim);

        let input_proj = Linear::new(store, "input_proj", c.d_feature, d, rng)?;
        // Empty cells would otherwise project to pure noise, which the
        // encoder's normalization blows up to unit scale.
        *store.value_mut(input_proj.bias) = uniform(rng, 1, d, 1.0)?;
        let encoder = (0..c.encoder_layers)
            .map(|l| EncoderLayer::new(store, &format!("encoder.{l}"), d, c.heads, c.ffn_mult, rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = ln(store, "encoder.norm", d)?;
        let human_queries = store.add("queries.human", uniform(rng, nq, d, 1.0)?)?;
        let object_queries = store.add("queries.object", uniform(rng, nq, d, 1.0)?)?;
        let human_pos = store.add("queries.human_pos", uniform(rng, nq, d, 1.0)?)?;
        let object_pos = store.add("queries.object_pos", uniform(rng, nq, d, 1.0)?)?;
        let mut instance = Vec::new();
        let mut geometric = Vec::new();
        for l in 0..c.instance_layers {
            geometric.push(GeoLayerParams::new(store, &format!("instance.{l}.geo"), d, rng)?);
            instance.push(DecoderLayer::new(store, &format!("instance.{l}"), d, c.heads, c.ffn_mult, rng)?);
        }
        let instance_norm = ln(store, "instance.norm", d)?;
        let human_box = Mlp::new(store, "head.human_box", &[d, d, 4], rng)?;
        let object_box = Mlp::new(store, "head.object_box", &[d, d, 4], rng)?;
        let object_class = Linear::new(store, "head.object_class", d, c.n_object_classes + 1, rng)?;
        let mut interaction = Vec::new();
        let mut semantic = Vec::new();
        for l in 0..c.interaction_layers {
            semantic.push(SemLayerParams::new(store, &format!("interaction.{l}.sem"), di, c.sem_norm, rng)?);
            interaction.push(DecoderLayer::new(store, &format!("interaction.{l}"), di, c.heads, c.ffn_mult, rng)?);
        }
        let interaction_norm = ln(store, "interaction.norm", di)?;
        let interaction_class = Linear::new(store, "head.interaction_class", di, c.n_interactions, rng)?;
        // Residual blocks start as the identity so early training sees the
        // input features and learned queries unmixed.
        for l in &encoder {
            l.attn.output.zero(store);
            if let Some(last) = l.ffn.layers.last() {
                last.zero(store);
            }
        }
        for l in instance.iter().chain(&interaction) {
            l.zero_outputs(store);
        }
        Ok(Self {
            config,
            input_proj,
            encoder,
            encoder_norm,
            human_queries,
            object_queries,
            human_pos,
            object_pos,
            instance,
            geometric,
            instance_norm,
            human_box,
            object_box,
            object_class,
            interaction,
            semantic,
            interaction_norm,
            interaction_class,
        })
    }

    /// Stack of self-attention encoder layers; the identity with no layers.
    pub fn encode_scene(&self, g: &mut Graph, store: &ParamStore, features: Var, pos: Var) -> Result<Var> {
        if g.shape(features) != g.shape(pos) {
            return Err(Error::dim(format!(
                "features {:?} and positions {:?} differ",
                g.shape(features),
                g.shape(pos)
            )));
        }
        if self.encoder.is_empty() {
            return Ok(features);
        }
        let mut x = features;
        for layer in &self.encoder {
            x = layer.forward(g, store, x, pos)?;
        }
        self.encoder_norm.forward(g, store, x)
    }

    fn heads(&self, g: &mut Graph, store: &ParamStore, human: Var, object: Var) -> Result<HeadOutput> {
        let bh = self.human_box.forward(g, store, human)?;
        let bo = self.object_box.forward(g, store, object)?;
        Ok(HeadOutput {
            boxes_h: g.sigmoid(bh)?,
            boxes_o: g.sigmoid(bo)?,
            obj_logits: self.object_class.forward(g, store, object)?,
        })
    }

    /// Instance decoder. `memory_keyed` is the encoded scene plus its positional
    /// embedding. Each layer first regroups entities by the boxes predicted
    /// from its input embeddings.
    pub fn instance_decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory_keyed: Var,
        frozen: Option<&[GeoRouting]>,
    ) -> Result<InstanceOutput> {
        let nq = self.config.n_queries;
        let mut q_h = g.param(store, self.human_queries);
        let mut q_o = g.param(store, self.object_queries);
        let pos_h = g.param(store, self.human_pos);
        let pos_o = g.param(store, self.object_pos);
        let pos = g.concat_rows(&[pos_h, pos_o])?;
        let mut aux = Vec::new();
        let mut routing = Vec::new();
        for (l, layer) in self.instance.iter().enumerate() {
            let needs_heads = l < self.config.geo_layers || (l > 0 && self.config.aux_loss);
            if needs_heads {
                let hn = self.instance_norm.forward(g, store, q_h)?;
                let on = self.instance_norm.forward(g, store, q_o)?;
                let heads = self.heads(g, store, hn, on)?;
                if l > 0 && self.config.aux_loss {
                    aux.push(heads);
                }
                if l < self.config.geo_layers {
                    let boxes_h = boxes_from(g.value(heads.boxes_h));
                    let boxes_o = boxes_from(g.value(heads.boxes_o));
                    let inputs = GeoInputs {
                        q_h,
                        q_o,
                        pos_h,
                        pos_o,
                        boxes_h: &boxes_h,
                        boxes_o: &boxes_o,
                    };
                    let fixed = frozen.and_then(|f| f.get(l));
                    let (h, o, r) = geometric_layer(g, store, &self.geometric[l], &self.config.geo, inputs, fixed)?;
                    q_h = h;
                    q_o = o;
                    routing.push(r);
                }
            }
            let x = g.concat_rows(&[q_h, q_o])?;
            let x = layer.forward(g, store, x, pos, memory_keyed)?;
            q_h = g.slice_rows(x, 0, nq)?;
            q_o = g.slice_rows(x, nq, nq)?;
        }
        let human = self.instance_norm.forward(g, store, q_h)?;
        let object = self.instance_norm.forward(g, store, q_o)?;
        let heads = self.heads(g, store, human, object)?;
        Ok(InstanceOutput {
            human,
            object,
            pos_h,
            pos_o,
            heads,
            aux,
            routing,
        })
    }

    /// Interaction decoder over `q_int`; `memory_keyed` must already be widened
    /// to the interaction width. Returns the multi-label logits.
    pub fn interaction_decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory_keyed: Var,
        q_int: Var,
        pos_int: Var,
        frozen: Option<&[SemanticGroupIndex]>,
    ) -> Result<(Var, Vec<SemanticGroupIndex>)> {
        let mut x = q_int;
        let mut routing = Vec::new();
        for (l, layer) in self.interaction.iter().enumerate() {
            if l < self.config.sem_layers {
                let fixed = frozen.and_then(|f| f.get(l));
                let (y, r) = semantic_layer(g, store, &self.semantic[l], x, self.config.k_sem, fixed)?;
                x = y;
                routing.push(r);
            }
            x = layer.forward(g, store, x, pos_int, memory_keyed)?;
        }
        let x = self.interaction_norm.forward(g, store, x)?;
        let logits = self.interaction_class.forward(g, store, x)?;
        Ok((logits, routing))
    }

    /// Full forward pass on one scene. `features` is `tokens x d_feature`,
    /// `pos` is `tokens x d_entity`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
        pos: &Tensor,
        frozen: Option<&Routing>,
    ) -> Result<(ModelOutput, Routing)> {
        let c = &self.config;
        if features.cols() != c.d_feature || pos.cols() != c.d_entity || features.rows() != pos.rows() {
            return Err(Error::dim(format!(
                "scene features {:?} / positions {:?} do not fit widths {} / {}",
                features.shape(),
                pos.shape(),
                c.d_feature,
                c.d_entity
            )));
        }
        let f = g.constant(features.clone());
        let p = g.constant(pos.clone());
        let x = self.input_proj.forward(g, store, f)?;
        let memory = self.encode_scene(g, store, x, p)?;
        let memory_keyed = g.add(memory, p)?;
        let inst = self.instance_decode(g, store, memory_keyed, frozen.map(|r| r.geometric.as_slice()))?;
        let q_int = init_interaction_queries(g, inst.human, inst.object)?;
        let pos_int = init_interaction_queries(g, inst.pos_h, inst.pos_o)?;
        let memory_int = g.tile_cols(memory_keyed, 3)?;
        let (inter_logits, semantic) = self.interaction_decode(
            g,
            store,
            memory_int,
            q_int,
            pos_int,
            frozen.map(|r| r.semantic.as_slice()),
        )?;
        Ok((
            ModelOutput {
                boxes_h: inst.heads.boxes_h,
                boxes_o: inst.heads.boxes_o,
                obj_logits: inst.heads.obj_logits,
                inter_logits,
                aux: inst.aux,
            },
            Routing {
                geometric: inst.routing,
                semantic,
            },
        ))
    }

    /// Inference without gradient bookkeeping beyond the tape itself.
    pub fn predict(&self, store: &ParamStore, features: &Tensor, pos: &Tensor) -> Result<OutputValues> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, store, features, pos, None)?;
        Ok(out.values(&g))
    }
}

/// Reads model boxes; sigmoid outputs always lie strictly inside the frame.
fn boxes_from(t: &Tensor) -> Vec<BBox> {
    (0..t.rows())
        .map(|r| {
            let v = t.row(r);
            BBox::raw(v[0], v[1], v[2], v[3])
        })
        .collect()
}

/// Per-index mean of two query sets, tiled three times along the width.
pub fn init_interaction_queries(g: &mut Graph, human: Var, object: Var) -> Result<Var> {
    if g.shape(human) != g.shape(object) {
        return Err(Error::dim(format!(
            "human {:?} and object {:?} query sets differ",
            g.shape(human),
            g.shape(object)
        )));
    }
    let sum = g.add(human, object)?;
    let mean = g.scale(sum, 0.5)?;
    g.tile_cols(mean, 3)
}

/// Analytic floating point operation count of one forward pass, two per
/// multiply-accumulate of every matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    pub input: u64,
    pub encoder: u64,
    pub instance: u64,
    pub interaction: u64,
    pub heads: u64,
}

impl FlopEstimate {
    pub fn total(&self) -> u64 {
        self.input + self.encoder + self.instance + self.interaction + self.heads
    }
}

pub fn flop_estimate(c: &ModelConfig, tokens: usize) -> FlopEstimate {
    let t = tokens as u64;
    let d = c.d_entity as u64;
    let di = c.d_interaction() as u64;
    let q = c.n_queries as u64;
    let m = c.ffn_mult as u64;
    let ff = |n: u64, w: u64| 2 * n * w * m * w;
    let self_attn = |n: u64, w: u64| 4 * n * w * w + 2 * n * n * w;
    let cross_attn = |n: u64, w: u64| 2 * n * w * w + 2 * t * w * w + 2 * n * t * w;
    let box_heads = 2 * q * (d * d + 4 * d);
    let class_head = q * d * (c.n_object_classes as u64 + 1);
    let head_macs = box_heads + class_head;

    let enc = c.encoder_layers as u64 * (self_attn(t, d) + ff(t, d));
    let mut inst = 0;
    let mut heads = head_macs;
    for l in 0..c.instance_layers {
        let n = 2 * q;
        inst += self_attn(n, d) + cross_attn(n, d) + ff(n, d);
        if l < c.geo_layers {
            let (members, entities) = match c.geo.mode {
                crate::geo_attention::GroupMode::Intra => {
                    let k = (c.geo.k as u64).min(q.saturating_sub(1));
                    (2 * q * k, 2 * q)
                }
                crate::geo_attention::GroupMode::Mixed => {
                    let k = (c.geo.k as u64).min(2 * q - 1);
                    (2 * q * k, 2 * q)
                }
            };
            // Position MLP and logit MLP on pairs, three projections and the
            // output map on entities.
            inst += 4 * members * d * d + 4 * entities * d * d;
            heads += box_heads;
        } else if l > 0 && c.aux_loss {
            heads += head_macs;
        }
    }
    let mut inter = 0;
    for l in 0..c.interaction_layers {
        inter += self_attn(q, di) + cross_attn(q, di) + ff(q, di);
        if l < c.sem_layers {
            let k = (c.k_sem as u64).min(q.saturating_sub(1));
            inter += q * k * (2 * di * di + di * di) + 2 * q * di * di;
        }
    }
    heads += q * di * c.n_interactions as u64;
    FlopEstimate {
        input: 2 * t * c.d_feature as u64 * d,
        encoder: 2 * enc,
        instance: 2 * inst,
        interaction: 2 * inter,
        heads: 2 * heads,
    }
}
