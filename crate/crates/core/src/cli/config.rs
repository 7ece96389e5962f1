//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Every
//! key has a default and unknown keys are rejected. [`RunConfig::to_text`]
//! writes the resolved configuration in a fixed key order; its hash
//! identifies a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{ApMethod, EvalSettings};
use crate::geo_attention::{GroupMode, PeSource};
use crate::model::{ClsLossKind, ModelConfig, TrainSettings};
use crate::numerics::NormKind;
use crate::synth::{SynthConfig, INTERACTION_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset directory; empty means `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub eval: EvalSettings,
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
    pub bench_runs: usize,
    pub bench_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let synth = SynthConfig {
            channels: model.d_feature,
            pos_dim: model.d_entity,
            n_object_classes: model.n_object_classes,
            n_interactions: model.n_interactions,
            ..SynthConfig::default()
        };
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data_dir: None,
            n_train: 500,
            n_val: 100,
            synth,
            model,
            train: TrainSettings {
                lr_drop_every: 24,
                ..TrainSettings::default()
            },
            batch_size: 8,
            epochs: 32,
            max_steps: 2000,
            eval: EvalSettings::default(),
            gradcheck_h: 1e-4,
            gradcheck_tol: 1e-4,
            bench_runs: 100,
            bench_warmup: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn interaction_id(key: &str, v: &str) -> Result<usize> {
    INTERACTION_NAMES
        .iter()
        .position(|n| *n == v)
        .or_else(|| v.parse().ok().filter(|&i: &usize| i < INTERACTION_NAMES.len()))
        .ok_or_else(|| Error::config(format!("{key}: unknown interaction `{v}`")))
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:?}")
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {k}", i + 1)));
            }
            c.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies one setting. Keys shared by the generator and the model set both.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "n_train" => self.n_train = parse(key, v)?,
            "n_val" => self.n_val = parse(key, v)?,

            "grid_h" => s.grid_h = parse(key, v)?,
            "grid_w" => s.grid_w = parse(key, v)?,
            "d_feature" => {
                m.d_feature = parse(key, v)?;
                s.channels = m.d_feature;
            }
            "min_humans" => s.min_humans = parse(key, v)?,
            "max_humans" => s.max_humans = parse(key, v)?,
            "min_objects" => s.min_objects = parse(key, v)?,
            "max_objects" => s.max_objects = parse(key, v)?,
            "n_object_classes" => {
                m.n_object_classes = parse(key, v)?;
                s.n_object_classes = m.n_object_classes;
            }
            "n_interactions" => {
                m.n_interactions = parse(key, v)?;
                s.n_interactions = m.n_interactions;
            }
            "noise" => s.noise = parse(key, v)?,
            "play_radius" => s.play_radius = parse(key, v)?,
            "human_separation" => s.human_separation = parse(key, v)?,
            "rare_interaction" => {
                s.rare_interaction = match v {
                    "" | "none" => None,
                    _ => Some(interaction_id(key, v)?),
                }
            }
            "rare_weight" => s.rare_weight = parse(key, v)?,
            "disabled_rules" => {
                s.rules = vec![true; INTERACTION_NAMES.len()];
                for name in v.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                    s.rules[interaction_id(key, name)?] = false;
                }
            }

            "d_entity" => {
                m.d_entity = parse(key, v)?;
                s.pos_dim = m.d_entity;
            }
            "n_queries" => m.n_queries = parse(key, v)?,
            "encoder_layers" => m.encoder_layers = parse(key, v)?,
            "instance_layers" => m.instance_layers = parse(key, v)?,
            "interaction_layers" => m.interaction_layers = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ffn_mult" => m.ffn_mult = parse(key, v)?,
            "k_geo" => m.geo.k = parse(key, v)?,
            "k_sem" => m.k_sem = parse(key, v)?,
            "geo_layers" => m.geo_layers = parse(key, v)?,
            "sem_layers" => m.sem_layers = parse(key, v)?,
            "group_mode" => {
                m.geo.mode = match v {
                    "intra" => GroupMode::Intra,
                    "mixed" => GroupMode::Mixed,
                    _ => return Err(Error::config(format!("{key}: expected intra or mixed, got `{v}`"))),
                }
            }
            "pe_source" => {
                m.geo.pe_source = match v {
                    "positional" => PeSource::Positional,
                    "content" => PeSource::Content,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected positional or content, got `{v}`"
                        )))
                    }
                }
            }
            "exclude_self" => m.geo.exclude_self = parse_bool(key, v)?,
            "squared_distance" => m.geo.squared_distance = parse_bool(key, v)?,
            "sem_norm" => {
                m.sem_norm = match v {
                    "layer" => NormKind::Layer,
                    "batch" => NormKind::Batch,
                    _ => return Err(Error::config(format!("{key}: expected layer or batch, got `{v}`"))),
                }
            }
            "aux_loss" => m.aux_loss = parse_bool(key, v)?,
            "match_repeats" => m.match_repeats = parse(key, v)?,
            "loss_box_l1" => m.loss.box_l1 = parse(key, v)?,
            "loss_giou" => m.loss.giou = parse(key, v)?,
            "loss_object" => m.loss.object = parse(key, v)?,
            "loss_interaction" => m.loss.interaction = parse(key, v)?,
            "eos_weight" => m.eos_weight = parse(key, v)?,
            "cls_loss" => {
                m.cls_loss = match v {
                    "asymmetric" => ClsLossKind::default(),
                    "focal" => ClsLossKind::Focal { alpha: 0.25, gamma: 2.0 },
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected asymmetric or focal, got `{v}`"
                        )))
                    }
                }
            }
            "asl_gamma_pos" | "asl_gamma_neg" | "asl_clip" => {
                let x: f64 = parse(key, v)?;
                match &mut m.cls_loss {
                    ClsLossKind::Asymmetric { gamma_pos, gamma_neg, clip } => match key {
                        "asl_gamma_pos" => *gamma_pos = x,
                        "asl_gamma_neg" => *gamma_neg = x,
                        _ => *clip = x,
                    },
                    ClsLossKind::Focal { .. } => {
                        return Err(Error::config(format!("{key} needs cls_loss = asymmetric set before it")))
                    }
                }
            }
            "focal_alpha" | "focal_gamma" => {
                let x: f64 = parse(key, v)?;
                match &mut m.cls_loss {
                    ClsLossKind::Focal { alpha, gamma } => match key {
                        "focal_alpha" => *alpha = x,
                        _ => *gamma = x,
                    },
                    ClsLossKind::Asymmetric { .. } => {
                        return Err(Error::config(format!("{key} needs cls_loss = focal set before it")))
                    }
                }
            }
            "match_object" => m.matching.object = parse(key, v)?,
            "match_interaction" => m.matching.interaction = parse(key, v)?,
            "match_box_l1" => m.matching.box_l1 = parse(key, v)?,
            "match_giou" => m.matching.giou = parse(key, v)?,

            "lr" => t.lr = parse(key, v)?,
            "lr_drop_every" => t.lr_drop_every = parse(key, v)?,
            "lr_drop" => t.lr_drop = parse(key, v)?,
            "weight_decay" => t.adamw.weight_decay = parse(key, v)?,
            "beta1" => t.adamw.beta1 = parse(key, v)?,
            "beta2" => t.adamw.beta2 = parse(key, v)?,
            "adam_eps" => t.adamw.eps = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,

            "nms_iou" => self.eval.nms_iou = parse(key, v)?,
            "top_k" => self.eval.top_k = parse(key, v)?,
            "match_iou" => self.eval.match_iou = parse(key, v)?,
            "ap_method" => {
                self.eval.method = match v {
                    "all-point" => ApMethod::AllPoint,
                    "11-point" => ApMethod::ElevenPoint,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected all-point or 11-point, got `{v}`"
                        )))
                    }
                }
            }

            "gradcheck_h" => self.gradcheck_h = parse(key, v)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(key, v)?,
            "bench_runs" => self.bench_runs = parse(key, v)?,
            "bench_warmup" => self.bench_warmup = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        let t = &self.train;
        let a = &t.adamw;
        if !(t.lr >= 0.0 && t.lr.is_finite() && t.lr_drop > 0.0 && t.lr_drop.is_finite()) {
            return Err(Error::config("lr and lr_drop must be finite, lr non-negative, lr_drop positive"));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and adam_eps be positive"));
        }
        if !(a.weight_decay >= 0.0 && t.clip_norm >= 0.0) {
            return Err(Error::config("weight_decay and clip_norm must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::config("n_train and n_val must be positive"));
        }
        let e = &self.eval;
        if !((0.0..=1.0).contains(&e.nms_iou) && (0.0..=1.0).contains(&e.match_iou)) {
            return Err(Error::config("nms_iou and match_iou must lie in [0, 1]"));
        }
        if !(self.gradcheck_h > 0.0 && self.gradcheck_h.is_finite()) || self.gradcheck_tol.is_nan() {
            return Err(Error::config("gradcheck_h must be positive and gradcheck_tol a number"));
        }
        if self.bench_runs == 0 {
            return Err(Error::config("bench_runs must be positive"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    /// Every key in a fixed order with its resolved value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.synth;
        let t = &self.train;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("data_dir", self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()));
        kv("n_train", self.n_train.to_string());
        kv("n_val", self.n_val.to_string());
        kv("grid_h", s.grid_h.to_string());
        kv("grid_w", s.grid_w.to_string());
        kv("d_feature", m.d_feature.to_string());
        kv("min_humans", s.min_humans.to_string());
        kv("max_humans", s.max_humans.to_string());
        kv("min_objects", s.min_objects.to_string());
        kv("max_objects", s.max_objects.to_string());
        kv("n_object_classes", m.n_object_classes.to_string());
        kv("n_interactions", m.n_interactions.to_string());
        kv("noise", fmt_f(s.noise));
        kv("play_radius", fmt_f(s.play_radius));
        kv("human_separation", fmt_f(s.human_separation));
        kv(
            "rare_interaction",
            s.rare_interaction.map_or("none".into(), |i| INTERACTION_NAMES[i].to_string()),
        );
        kv("rare_weight", fmt_f(s.rare_weight));
        let disabled: Vec<&str> = s
            .rules
            .iter()
            .zip(INTERACTION_NAMES)
            .filter(|(on, _)| !**on)
            .map(|(_, n)| n)
            .collect();
        kv("disabled_rules", disabled.join(","));
        kv("d_entity", m.d_entity.to_string());
        kv("n_queries", m.n_queries.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("instance_layers", m.instance_layers.to_string());
        kv("interaction_layers", m.interaction_layers.to_string());
        kv("heads", m.heads.to_string());
        kv("ffn_mult", m.ffn_mult.to_string());
        kv("k_geo", m.geo.k.to_string());
        kv("k_sem", m.k_sem.to_string());
        kv("geo_layers", m.geo_layers.to_string());
        kv("sem_layers", m.sem_layers.to_string());
        kv("group_mode", m.group_mode_name().into());
        kv("pe_source", m.pe_source_name().into());
        kv("exclude_self", m.geo.exclude_self.to_string());
        kv("squared_distance", m.geo.squared_distance.to_string());
        kv(
            "sem_norm",
            match m.sem_norm {
                NormKind::Layer => "layer",
                NormKind::Batch => "batch",
            }
            .into(),
        );
        kv("aux_loss", m.aux_loss.to_string());
        kv("match_repeats", m.match_repeats.to_string());
        kv("loss_box_l1", fmt_f(m.loss.box_l1));
        kv("loss_giou", fmt_f(m.loss.giou));
        kv("loss_object", fmt_f(m.loss.object));
        kv("loss_interaction", fmt_f(m.loss.interaction));
        kv("eos_weight", fmt_f(m.eos_weight));
        match m.cls_loss {
            ClsLossKind::Asymmetric { gamma_pos, gamma_neg, clip } => {
                kv("cls_loss", "asymmetric".into());
                kv("asl_gamma_pos", fmt_f(gamma_pos));
                kv("asl_gamma_neg", fmt_f(gamma_neg));
                kv("asl_clip", fmt_f(clip));
            }
            ClsLossKind::Focal { alpha, gamma } => {
                kv("cls_loss", "focal".into());
                kv("focal_alpha", fmt_f(alpha));
                kv("focal_gamma", fmt_f(gamma));
            }
        }
        kv("match_object", fmt_f(m.matching.object));
        kv("match_interaction", fmt_f(m.matching.interaction));
        kv("match_box_l1", fmt_f(m.matching.box_l1));
        kv("match_giou", fmt_f(m.matching.giou));
        kv("lr", fmt_f(t.lr));
        kv("lr_drop_every", t.lr_drop_every.to_string());
        kv("lr_drop", fmt_f(t.lr_drop));
        kv("weight_decay", fmt_f(t.adamw.weight_decay));
        kv("beta1", fmt_f(t.adamw.beta1));
        kv("beta2", fmt_f(t.adamw.beta2));
        kv("adam_eps", fmt_f(t.adamw.eps));
        kv("clip_norm", fmt_f(t.clip_norm));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("nms_iou", fmt_f(self.eval.nms_iou));
        kv("top_k", self.eval.top_k.to_string());
        kv("match_iou", fmt_f(self.eval.match_iou));
        kv(
            "ap_method",
            match self.eval.method {
                ApMethod::AllPoint => "all-point",
                ApMethod::ElevenPoint => "11-point",
            }
            .into(),
        );
        kv("gradcheck_h", fmt_f(self.gradcheck_h));
        kv("gradcheck_tol", fmt_f(self.gradcheck_tol));
        kv("bench_runs", self.bench_runs.to_string());
        kv("bench_warmup", self.bench_warmup.to_string());
        o
    }

    /// SHA-256 of [`RunConfig::to_text`], lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let c = RunConfig::from_text("# a comment\n\nk_geo = 3   # trailing\nrare_interaction = team-play\n").unwrap();
        assert_eq!(c.model.geo.k, 3);
        assert_eq!(c.synth.rare_interaction, Some(1));
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn shared_keys_reach_generator_and_model() {
        let c = RunConfig::from_text("d_entity = 16\nd_feature = 40\nheads = 2").unwrap();
        assert_eq!((c.synth.pos_dim, c.synth.channels), (16, 40));
        assert_eq!((c.model.d_entity, c.model.d_feature), (16, 40));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for bad in ["bogus = 1", "k_geo = 2\nk_geo = 3", "k_geo", "k_geo = two", "group_mode = diagonal", "k_geo = 0"] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn disabled_rules_by_name() {
        let c = RunConfig::from_text("disabled_rules = hold, carry").unwrap();
        assert_eq!(c.synth.rules, vec![false, true, true, true, true, false]);
        assert!(c.to_text().contains("disabled_rules = hold,carry\n"));
    }
}
