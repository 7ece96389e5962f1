//! End-to-end set-prediction network: scene encoder, instance decoder with
//! geometric grouping, interaction decoder with semantic grouping, heads,
//! bipartite matching and the composite training loss.

mod attention;
mod checkpoint;
mod loss;
mod matching;
mod network;
mod train;

pub use attention::{feed_forward, multi_head_attention, DecoderLayer, EncoderLayer, MultiHeadAttention};
pub use checkpoint::{
    apply_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{
    asymmetric_cls_loss, focal_cls_loss, giou_loss, giou_loss_rows, hoi_loss, LossComponents, LossWeights,
};
pub use matching::{cost_matrix, hungarian_match, match_cost, Assignment, MatchWeights, PredictionView};
pub(crate) use matching::{sigmoid, softmax, tie_tolerance};
pub use network::{
    flop_estimate, init_interaction_queries, FlopEstimate, HeadOutput, HoiModel, InstanceOutput, ModelOutput,
    OutputValues, Routing,
};
pub use train::{assign, batch_gradients, lr_at_epoch, scene_loss, train_step, Example, StepReport, TrainSettings};

use crate::error::{Error, Result};
use crate::geo_attention::{GeoConfig, GroupMode, PeSource};
use crate::geometry::BBox;
use crate::numerics::NormKind;

/// Interaction classification loss family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClsLossKind {
    Asymmetric { gamma_pos: f64, gamma_neg: f64, clip: f64 },
    Focal { alpha: f64, gamma: f64 },
}

impl Default for ClsLossKind {
    fn default() -> Self {
        ClsLossKind::Asymmetric {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channels of the scene feature grid.
    pub d_feature: usize,
    pub d_entity: usize,
    /// Queries per branch (humans and objects each).
    pub n_queries: usize,
    pub encoder_layers: usize,
    pub instance_layers: usize,
    pub interaction_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub n_object_classes: usize,
    pub n_interactions: usize,
    pub geo: GeoConfig,
    pub k_sem: usize,
    /// Instance decoder layers, counted from the first, that apply geometric grouping.
    pub geo_layers: usize,
    /// Interaction decoder layers, counted from the first, that apply semantic grouping.
    pub sem_layers: usize,
    pub sem_norm: NormKind,
    pub loss: LossWeights,
    pub cls_loss: ClsLossKind,
    /// Cross-entropy weight of the "no object" class.
    pub eos_weight: f64,
    pub matching: MatchWeights,
    /// Adds box and object-class losses on intermediate instance decoder layers.
    pub aux_loss: bool,
    /// Training-time copies of each ground truth in the matching; 1 is the
    /// plain one-to-one assignment.
    pub match_repeats: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            d_feature: 32,
            d_entity: 32,
            n_queries: 16,
            encoder_layers: 2,
            instance_layers: 2,
            interaction_layers: 2,
            heads: 2,
            ffn_mult: 2,
            n_object_classes: 5,
            n_interactions: 6,
            geo: GeoConfig::default(),
            k_sem: 2,
            geo_layers: 2,
            sem_layers: 2,
            sem_norm: NormKind::Layer,
            loss: LossWeights::default(),
            cls_loss: ClsLossKind::default(),
            eos_weight: 0.1,
            matching: MatchWeights::default(),
            aux_loss: true,
            match_repeats: 1,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: width 256, 64 queries, 6/3/3 layers.
    pub fn full_scale() -> Self {
        Self {
            d_feature: 256,
            d_entity: 256,
            n_queries: 64,
            encoder_layers: 6,
            instance_layers: 3,
            interaction_layers: 3,
            heads: 8,
            ffn_mult: 8,
            geo_layers: 3,
            sem_layers: 3,
            ..Self::default()
        }
    }

    /// Smallest configuration used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_feature: 4,
            d_entity: 4,
            n_queries: 2,
            encoder_layers: 1,
            instance_layers: 1,
            interaction_layers: 1,
            heads: 2,
            ffn_mult: 2,
            n_object_classes: 2,
            n_interactions: 3,
            geo: GeoConfig { k: 1, ..GeoConfig::default() },
            k_sem: 1,
            geo_layers: 1,
            sem_layers: 1,
            ..Self::default()
        }
    }

    pub fn d_interaction(&self) -> usize {
        3 * self.d_entity
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_feature", self.d_feature),
            ("d_entity", self.d_entity),
            ("n_queries", self.n_queries),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("n_object_classes", self.n_object_classes),
            ("n_interactions", self.n_interactions),
            ("k_geo", self.geo.k),
            ("k_sem", self.k_sem),
            ("match_repeats", self.match_repeats),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_entity.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_entity {} is not divisible by {} heads",
                self.d_entity, self.heads
            )));
        }
        if self.geo_layers > self.instance_layers {
            return Err(Error::config("geo_layers exceeds instance_layers"));
        }
        if self.sem_layers > self.interaction_layers {
            return Err(Error::config("sem_layers exceeds interaction_layers"));
        }
        let w = &self.loss;
        if [w.box_l1, w.giou, w.object, w.interaction, self.eos_weight]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Fields that determine the parameter layout; two configs with equal keys
    /// can share a checkpoint.
    pub fn architecture_key(&self) -> String {
        format!(
            "d_feature={};d_entity={};n_queries={};encoder_layers={};instance_layers={};interaction_layers={};heads={};ffn_mult={};n_object_classes={};n_interactions={};sem_norm={}",
            self.d_feature,
            self.d_entity,
            self.n_queries,
            self.encoder_layers,
            self.instance_layers,
            self.interaction_layers,
            self.heads,
            self.ffn_mult,
            self.n_object_classes,
            self.n_interactions,
            match self.sem_norm {
                NormKind::Layer => "layer",
                NormKind::Batch => "batch",
            }
        )
    }

    pub fn group_mode_name(&self) -> &'static str {
        match self.geo.mode {
            GroupMode::Intra => "intra",
            GroupMode::Mixed => "mixed",
        }
    }

    pub fn pe_source_name(&self) -> &'static str {
        match self.geo.pe_source {
            PeSource::Positional => "positional",
            PeSource::Content => "content",
        }
    }
}

/// One annotated human-object pair with all its interaction labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPair {
    pub human: BBox,
    pub object: BBox,
    pub object_class: usize,
    pub interactions: Vec<usize>,
}
