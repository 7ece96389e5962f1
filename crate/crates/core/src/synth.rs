//! Deterministic synthetic scenes: humans and objects placed by interaction
//! motifs, labeled by geometric rules, rasterized into a feature grid.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, BBox};
use crate::model::{Example, GtPair};
use crate::numerics::Tensor;

pub const BALL: usize = 0;
pub const CUP: usize = 1;
pub const BIKE: usize = 2;
pub const CHAIR: usize = 3;
pub const BAG: usize = 4;

pub const HOLD: usize = 0;
pub const TEAM_PLAY: usize = 1;
pub const SOLO_PLAY: usize = 2;
pub const RIDE: usize = 3;
pub const SIT_ON: usize = 4;
pub const CARRY: usize = 5;

pub const INTERACTION_NAMES: [&str; 6] = ["hold", "team-play", "solo-play", "ride", "sit-on", "carry"];
pub const OBJECT_NAMES: [&str; 5] = ["ball", "cup", "bike", "chair", "bag"];

/// Schema tag written on the first line of every dataset file.
pub const DATASET_SCHEMA: &str = "hoi-groups-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub human: usize,
    pub object: usize,
    pub interaction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub humans: Vec<BBox>,
    pub objects: Vec<SceneObject>,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Feature channels per grid cell.
    pub channels: usize,
    /// Width of the positional embedding.
    pub pos_dim: usize,
    pub min_humans: usize,
    pub max_humans: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_object_classes: usize,
    pub n_interactions: usize,
    /// Additive Gaussian noise on every feature.
    pub noise: f64,
    /// Ball-to-human radius of the play rules.
    pub play_radius: f64,
    /// Minimum distance between human centers.
    pub human_separation: f64,
    /// Interaction whose motif is down-weighted, if any.
    pub rare_interaction: Option<usize>,
    /// Relative sampling weight of the rare motif.
    pub rare_weight: f64,
    /// Per-interaction switch; a disabled rule never produces labels or motifs.
    pub rules: Vec<bool>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            channels: 32,
            pos_dim: 32,
            min_humans: 1,
            max_humans: 6,
            min_objects: 1,
            max_objects: 6,
            n_object_classes: 5,
            n_interactions: 6,
            noise: 0.02,
            play_radius: 0.2,
            human_separation: 0.25,
            rare_interaction: None,
            rare_weight: 0.02,
            rules: vec![true; 6],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h * self.grid_w < 4 {
            return Err(Error::config("grid needs at least 4 cells"));
        }
        if !(2..=INTERACTION_NAMES.len()).contains(&self.n_interactions) {
            return Err(Error::config(format!(
                "n_interactions must be in 2..={}",
                INTERACTION_NAMES.len()
            )));
        }
        if self.n_object_classes == 0 {
            return Err(Error::config("n_object_classes must be positive"));
        }
        if self.channels < KIND_CHANNELS * (1 + self.n_object_classes) {
            return Err(Error::config(format!(
                "{} channels cannot hold {} entity kinds ({KIND_CHANNELS} channels each)",
                self.channels,
                1 + self.n_object_classes
            )));
        }
        if self.pos_dim == 0 || !self.pos_dim.is_multiple_of(4) {
            return Err(Error::config("pos_dim must be a positive multiple of 4"));
        }
        if self.min_humans > self.max_humans || self.min_objects > self.max_objects {
            return Err(Error::config("count range is empty"));
        }
        if self.max_humans == 0 {
            return Err(Error::config("scenes need at least one human slot"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        if !(self.play_radius > 0.0 && self.human_separation >= 0.0) {
            return Err(Error::config("play_radius must be positive"));
        }
        if let Some(r) = self.rare_interaction {
            if r >= self.n_interactions {
                return Err(Error::config(format!("rare interaction {r} out of range")));
            }
        }
        if !(self.rare_weight >= 0.0 && self.rare_weight.is_finite()) {
            return Err(Error::config("rare_weight must be finite and non-negative"));
        }
        if self.rules.len() != INTERACTION_NAMES.len() {
            return Err(Error::config(format!("rules needs {} switches", INTERACTION_NAMES.len())));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn rule_on(&self, interaction: usize) -> bool {
        interaction < self.n_interactions && self.rules[interaction]
    }
}

/// Evaluates every labeling rule on a finished scene.
pub fn label_scene(humans: &[BBox], objects: &[SceneObject], cfg: &SynthConfig) -> Vec<Triplet> {
    let mut out = BTreeSet::new();
    let mut add = |h, o, a| {
        if cfg.rule_on(a) {
            out.insert(Triplet {
                human: h,
                object: o,
                interaction: a,
            });
        }
    };
    for (o, obj) in objects.iter().enumerate() {
        let b = &obj.bbox;
        match obj.class {
            BALL => {
                let near: Vec<usize> = (0..humans.len())
                    .filter(|&h| center_distance(&humans[h], b) <= cfg.play_radius)
                    .collect();
                let a = if near.len() >= 2 { TEAM_PLAY } else { SOLO_PLAY };
                for h in near {
                    add(h, o, a);
                }
            }
            CUP => (0..humans.len())
                .filter(|&h| humans[h].contains_point(b.cx, b.cy))
                .for_each(|h| add(h, o, HOLD)),
            BIKE => (0..humans.len())
                .filter(|&h| {
                    let dy = b.cy - humans[h].cy;
                    (b.cx - humans[h].cx).abs() <= 0.5 * humans[h].w && dy > 0.0 && dy <= 0.25
                })
                .for_each(|h| add(h, o, RIDE)),
            CHAIR => (0..humans.len())
                .filter(|&h| iou(&humans[h], b).is_ok_and(|v| v >= 0.1))
                .for_each(|h| add(h, o, SIT_ON)),
            BAG => (0..humans.len())
                .filter(|&h| center_distance(&humans[h], b) <= 0.15)
                .for_each(|h| add(h, o, CARRY)),
            _ => {}
        }
    }
    out.into_iter().collect()
}

const ATTEMPTS: usize = 200;
const SCENE_RESTARTS: usize = 50;

struct Placer<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    humans: Vec<BBox>,
    objects: Vec<SceneObject>,
}

fn clamp_center(v: f64) -> f64 {
    v.clamp(0.03, 0.97)
}

impl Placer<'_> {
    fn human_box(&mut self, cx: f64, cy: f64) -> BBox {
        let w = self.rng.gen_range(0.14..0.22);
        let h = self.rng.gen_range(0.25..0.4);
        BBox::raw(cx, cy, w, h)
    }

    fn object_box(&mut self, class: usize, cx: f64, cy: f64) -> BBox {
        let (w, h) = match class {
            BIKE => (self.rng.gen_range(0.18..0.26), self.rng.gen_range(0.12..0.18)),
            CHAIR => (self.rng.gen_range(0.14..0.2), self.rng.gen_range(0.14..0.2)),
            _ => (self.rng.gen_range(0.1..0.16), self.rng.gen_range(0.1..0.16)),
        };
        BBox::raw(clamp_center(cx), clamp_center(cy), w, h)
    }

    fn free_for_human(&self, cx: f64, cy: f64, extra: &[(f64, f64)]) -> bool {
        let sep = self.cfg.human_separation;
        self.humans
            .iter()
            .map(|h| (h.cx, h.cy))
            .chain(extra.iter().copied())
            .all(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() >= sep)
            && self
                .objects
                .iter()
                .filter(|o| o.class == BALL)
                .all(|o| ((o.bbox.cx - cx).powi(2) + (o.bbox.cy - cy).powi(2)).sqrt() > self.cfg.play_radius)
    }

    fn human_center(&mut self) -> Option<(f64, f64)> {
        for _ in 0..ATTEMPTS {
            let c = (self.rng.gen_range(0.12..0.88), self.rng.gen_range(0.12..0.8));
            if self.free_for_human(c.0, c.1, &[]) {
                return Some(c);
            }
        }
        None
    }

    fn add_human(&mut self) -> Option<usize> {
        let (cx, cy) = self.human_center()?;
        let b = self.human_box(cx, cy);
        self.humans.push(b);
        Some(self.humans.len() - 1)
    }

    fn add_object(&mut self, class: usize, cx: f64, cy: f64) {
        let bbox = self.object_box(class, cx, cy);
        self.objects.push(SceneObject { bbox, class });
    }

    fn polar(&mut self, lo: f64, hi: f64) -> (f64, f64) {
        let r = self.rng.gen_range(lo..hi);
        let t = self.rng.gen_range(0.0..std::f64::consts::TAU);
        (r * t.cos(), r * t.sin())
    }

    /// Places one motif; returns false when no room was found.
    fn motif(&mut self, interaction: usize) -> bool {
        if interaction == TEAM_PLAY {
            for _ in 0..ATTEMPTS {
                let Some((x1, y1)) = self.human_center() else { return false };
                let (dx, dy) = self.polar(0.3, 0.36);
                let (x2, y2) = (x1 + dx, y1 + dy);
                if !(0.1..=0.9).contains(&x2) || !(0.12..=0.8).contains(&y2) {
                    continue;
                }
                if !self.free_for_human(x2, y2, &[(x1, y1)]) {
                    continue;
                }
                let a = self.human_box(x1, y1);
                let b = self.human_box(x2, y2);
                self.humans.push(a);
                self.humans.push(b);
                let (jx, jy) = self.polar(0.0, 0.02);
                self.add_object(BALL, 0.5 * (x1 + x2) + jx, 0.5 * (y1 + y2) + jy);
                return true;
            }
            return false;
        }
        let Some(h) = self.add_human() else { return false };
        let hb = self.humans[h];
        match interaction {
            HOLD => {
                let x = hb.cx + self.rng.gen_range(-0.3..0.3) * hb.w;
                let y = hb.cy + self.rng.gen_range(-0.3..0.3) * hb.h;
                self.add_object(CUP, x, y);
            }
            SOLO_PLAY => {
                // Prefer a spot no other human can reach.
                let mut spot = (hb.cx, hb.cy);
                for _ in 0..ATTEMPTS {
                    let (dx, dy) = self.polar(0.06, 0.14);
                    spot = (clamp_center(hb.cx + dx), clamp_center(hb.cy + dy));
                    let reach = self.humans[..h].iter().any(|o| {
                        ((o.cx - spot.0).powi(2) + (o.cy - spot.1).powi(2)).sqrt() <= self.cfg.play_radius
                    });
                    if !reach {
                        break;
                    }
                }
                self.add_object(BALL, spot.0, spot.1);
            }
            RIDE => {
                let x = hb.cx + self.rng.gen_range(-0.3..0.3) * hb.w;
                let y = hb.cy + self.rng.gen_range(0.12..0.22);
                self.add_object(BIKE, x, y);
            }
            SIT_ON => {
                let x = hb.cx + self.rng.gen_range(-0.25..0.25) * hb.w;
                let y = hb.cy + self.rng.gen_range(0.0..0.3) * hb.h;
                self.add_object(CHAIR, x, y);
            }
            CARRY => {
                let (dx, dy) = self.polar(0.04, 0.11);
                self.add_object(BAG, hb.cx + dx, hb.cy + dy);
            }
            _ => {}
        }
        true
    }

    /// Places motifs while both humans and objects remain, then the leftovers
    /// alone. Returns false when the humans do not fit.
    fn fill(&mut self, n_h: usize, n_o: usize, weights: &[f64]) -> bool {
        let total_w: f64 = weights.iter().sum();
        while self.humans.len() < n_h && self.objects.len() < n_o && total_w > 0.0 {
            let mut pick = self.rng.gen_range(0.0..total_w);
            let mut motif = 0;
            for (a, &w) in weights.iter().enumerate() {
                motif = a;
                if pick < w {
                    break;
                }
                pick -= w;
            }
            if motif == TEAM_PLAY && self.humans.len() + 2 > n_h {
                if weights[SOLO_PLAY] == 0.0 {
                    break;
                }
                motif = SOLO_PLAY;
            }
            if !self.motif(motif) {
                return false;
            }
        }
        while self.humans.len() < n_h {
            if self.add_human().is_none() {
                return false;
            }
        }
        while self.objects.len() < n_o {
            let class = self.rng.gen_range(0..self.cfg.n_object_classes);
            self.background_object(class);
        }
        true
    }

    /// Object far from every human, so no rule fires for it.
    fn background_object(&mut self, class: usize) {
        for _ in 0..ATTEMPTS {
            let (x, y) = (self.rng.gen_range(0.08..0.92), self.rng.gen_range(0.08..0.92));
            if self
                .humans
                .iter()
                .all(|h| ((h.cx - x).powi(2) + (h.cy - y).powi(2)).sqrt() > 0.32)
            {
                self.add_object(class, x, y);
                return;
            }
        }
        let (x, y) = (self.rng.gen_range(0.08..0.92), self.rng.gen_range(0.08..0.92));
        self.add_object(class, x, y);
    }
}

/// Object class a motif places.
fn motif_class(interaction: usize) -> usize {
    match interaction {
        HOLD => CUP,
        TEAM_PLAY | SOLO_PLAY => BALL,
        RIDE => BIKE,
        SIT_ON => CHAIR,
        _ => BAG,
    }
}

/// Builds one scene from `seed`. Counts are drawn first, motifs are placed
/// while both humans and objects remain, then the leftovers are placed alone.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_h = rng.gen_range(cfg.min_humans..=cfg.max_humans);
    let n_o = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let weights: Vec<f64> = (0..INTERACTION_NAMES.len())
        .map(|a| {
            if !cfg.rule_on(a) || motif_class(a) >= cfg.n_object_classes {
                0.0
            } else if cfg.rare_interaction == Some(a) {
                cfg.rare_weight
            } else {
                1.0
            }
        })
        .collect();
    let mut p = Placer {
        cfg,
        rng,
        humans: Vec::new(),
        objects: Vec::new(),
    };
    let mut placed = false;
    for _ in 0..SCENE_RESTARTS {
        p.humans.clear();
        p.objects.clear();
        if p.fill(n_h, n_o, &weights) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::data(format!(
            "scene {seed}: no room for {n_h} humans with separation {}",
            cfg.human_separation
        )));
    }
    let triplets = label_scene(&p.humans, &p.objects, cfg);
    Ok(Scene {
        seed,
        humans: p.humans,
        objects: p.objects,
        triplets,
    })
}

/// Channels per entity kind: presence, then the box as cx, cy, w, h. The box
/// channels stand in for the localization cues of a detection backbone.
pub const KIND_CHANNELS: usize = 5;

/// Fixed per-kind signature on the channels past the presence/size block.
fn kind_codes(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let kinds = 1 + cfg.n_object_classes;
    let extra = cfg.channels - KIND_CHANNELS * kinds;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b69_6e64);
    (0..kinds)
        .map(|_| (0..extra).map(|_| if rng.gen::<bool>() { 0.5 } else { -0.5 }).collect())
        .collect()
}

/// 2-D sinusoidal embedding of every cell center; half the width encodes the
/// row, half the column, each as sine/cosine pairs on a geometric frequency ladder.
pub fn positional_embedding(cfg: &SynthConfig) -> Result<Tensor> {
    let (gh, gw, d) = (cfg.grid_h, cfg.grid_w, cfg.pos_dim);
    let per_axis = d / 2;
    let n_freq = per_axis / 2;
    let freqs: Vec<f64> = (0..n_freq)
        .map(|i| std::f64::consts::PI * 2f64.powf(i as f64 * 3.5 / (n_freq.max(2) - 1) as f64))
        .collect();
    let mut data = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            let y = (r as f64 + 0.5) / gh as f64;
            let x = (c as f64 + 0.5) / gw as f64;
            for v in [y, x] {
                for &f in &freqs {
                    data.push((f * v).sin());
                    data.push((f * v).cos());
                }
            }
        }
    }
    Tensor::new(&[gh * gw, d], data)
}

/// Splat width of a box in normalized units.
fn splat_sigma(b: &BBox, cfg: &SynthConfig) -> f64 {
    let cell = 1.0 / cfg.grid_h.max(cfg.grid_w) as f64;
    (0.3 * b.w.min(b.h)).max(0.5 * cell)
}

/// Feature grid of a scene (`cells x channels`, row-major cells) plus noise
/// drawn from a stream derived from the scene seed.
pub fn rasterize(scene: &Scene, cfg: &SynthConfig) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (gh, gw, ch) = (cfg.grid_h, cfg.grid_w, cfg.channels);
    let codes = kind_codes(cfg);
    let mut data = vec![0.0; gh * gw * ch];
    let entities = scene
        .humans
        .iter()
        .map(|b| (b, 0))
        .chain(scene.objects.iter().map(|o| (&o.bbox, 1 + o.class)));
    for (b, kind) in entities {
        if kind > cfg.n_object_classes {
            return Err(Error::data(format!("object class {} out of range", kind - 1)));
        }
        let sigma = splat_sigma(b, cfg);
        let mut sig = vec![0.0; ch];
        let base = KIND_CHANNELS * kind;
        sig[base..base + KIND_CHANNELS].copy_from_slice(&[1.0, b.cx, b.cy, b.w, b.h]);
        sig[KIND_CHANNELS * (1 + cfg.n_object_classes)..].copy_from_slice(&codes[kind]);
        for r in 0..gh {
            let y = (r as f64 + 0.5) / gh as f64;
            for c in 0..gw {
                let x = (c as f64 + 0.5) / gw as f64;
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut data[(r * gw + c) * ch..(r * gw + c + 1) * ch];
                cell.iter_mut().zip(&sig).for_each(|(v, s)| *v += a * s);
            }
        }
    }
    if cfg.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(1);
        // Box-Muller keeps the noise stream independent of distribution crates.
        for pair in data.chunks_mut(2) {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let rad = (-2.0 * u1.ln()).sqrt();
            let t = std::f64::consts::TAU * u2;
            pair[0] += cfg.noise * rad * t.cos();
            if pair.len() > 1 {
                pair[1] += cfg.noise * rad * t.sin();
            }
        }
    }
    Ok((Tensor::new(&[gh * gw, ch], data)?, positional_embedding(cfg)?))
}

/// Ground-truth pairs of a scene, one per distinct (human, object) with all
/// interactions of that pair, in ascending pair order.
pub fn scene_targets(scene: &Scene) -> Vec<GtPair> {
    let mut out: Vec<GtPair> = Vec::new();
    let mut last: Option<(usize, usize)> = None;
    for t in &scene.triplets {
        if last == Some((t.human, t.object)) {
            out.last_mut().expect("pair exists").interactions.push(t.interaction);
        } else {
            out.push(GtPair {
                human: scene.humans[t.human],
                object: scene.objects[t.object].bbox,
                object_class: scene.objects[t.object].class,
                interactions: vec![t.interaction],
            });
            last = Some((t.human, t.object));
        }
    }
    out
}

pub fn scene_example(scene: &Scene, cfg: &SynthConfig) -> Result<Example> {
    let (features, pos) = rasterize(scene, cfg)?;
    Ok(Example {
        features,
        pos,
        gts: scene_targets(scene),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    split: String,
    count: usize,
    config: SynthConfig,
}

/// Seed of scene `index` in `split`; the two splits use disjoint ranges.
pub fn scene_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1 << 31,
    };
    base_seed
        .wrapping_mul(1 << 32)
        .wrapping_add(offset)
        .wrapping_add(index as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn write_dataset(path: &Path, split: Split, scenes: &[Scene], cfg: &SynthConfig) -> Result<()> {
    let mut out = Vec::new();
    let header = Header {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
        split: split.name().into(),
        count: scenes.len(),
        config: cfg.clone(),
    };
    let ser = |e: serde_json::Error| Error::data(e.to_string());
    out.extend(serde_json::to_string(&header).map_err(ser)?.into_bytes());
    out.push(b'\n');
    for s in scenes {
        out.extend(serde_json::to_string(s).map_err(ser)?.into_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a dataset file, returning its generator config and scenes.
pub fn read_dataset(path: &Path) -> Result<(SynthConfig, Vec<Scene>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::data("empty dataset"))?)
        .map_err(|e| Error::data(format!("{}: bad header: {e}", path.display())))?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(Error::data(format!(
            "{}: schema {} v{} is not {DATASET_SCHEMA} v{DATASET_VERSION}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    header.config.validate()?;
    let scenes = lines
        .enumerate()
        .map(|(i, l)| {
            let s: Scene = serde_json::from_str(l)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 2)))?;
            validate_scene(&s, &header.config)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 2)))?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    if scenes.len() != header.count {
        return Err(Error::data(format!(
            "{}: header count {} but {} scenes",
            path.display(),
            header.count,
            scenes.len()
        )));
    }
    Ok((header.config, scenes))
}

fn validate_scene(s: &Scene, cfg: &SynthConfig) -> Result<()> {
    for b in s.humans.iter().chain(s.objects.iter().map(|o| &o.bbox)) {
        b.validate()?;
    }
    if let Some(o) = s.objects.iter().find(|o| o.class >= cfg.n_object_classes) {
        return Err(Error::data(format!("object class {} out of range", o.class)));
    }
    for t in &s.triplets {
        if t.human >= s.humans.len() || t.object >= s.objects.len() || t.interaction >= cfg.n_interactions {
            return Err(Error::data(format!("triplet {t:?} out of range")));
        }
    }
    Ok(())
}

/// Number of triplets of every interaction class.
pub fn interaction_counts(scenes: &[Scene], n_interactions: usize) -> Vec<usize> {
    let mut counts = vec![0; n_interactions];
    for t in scenes.iter().flat_map(|s| &s.triplets) {
        counts[t.interaction] += 1;
    }
    counts
}

/// Classes with fewer than this many training triplets form the rare split.
pub const RARE_THRESHOLD: usize = 10;

pub fn rare_set(train_counts: &[usize]) -> Vec<bool> {
    train_counts.iter().map(|&c| c < RARE_THRESHOLD).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub counts: PathBuf,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
}

pub fn generate_split(cfg: &SynthConfig, split: Split, n: usize, base_seed: u64) -> Result<Vec<Scene>> {
    if n >= 1 << 31 {
        return Err(Error::config("split too large"));
    }
    (0..n).map(|i| generate_scene(scene_seed(base_seed, split, i), cfg)).collect()
}

/// Writes `train.jsonl`, `val.jsonl` and `counts.csv` into `dir`.
pub fn make_splits(cfg: &SynthConfig, n_train: usize, n_val: usize, base_seed: u64, dir: &Path) -> Result<SplitFiles> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::config("both splits need at least one scene"));
    }
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = generate_split(cfg, Split::Train, n_train, base_seed)?;
    let val = generate_split(cfg, Split::Val, n_val, base_seed)?;
    let files = SplitFiles {
        train: dir.join("train.jsonl"),
        val: dir.join("val.jsonl"),
        counts: dir.join("counts.csv"),
        train_counts: interaction_counts(&train, cfg.n_interactions),
        val_counts: interaction_counts(&val, cfg.n_interactions),
    };
    write_dataset(&files.train, Split::Train, &train, cfg)?;
    write_dataset(&files.val, Split::Val, &val, cfg)?;
    let rare = rare_set(&files.train_counts);
    let mut csv = String::from("interaction_id,name,train_count,val_count,rare\n");
    for a in 0..cfg.n_interactions {
        csv.push_str(&format!(
            "{a},{},{},{},{}\n",
            INTERACTION_NAMES[a], files.train_counts[a], files.val_counts[a], rare[a] as u8
        ));
    }
    fs::write(&files.counts, csv).map_err(|e| Error::io(&files.counts, e))?;
    Ok(files)
}

/// Reads `counts.csv` train counts written by [`make_splits`].
pub fn read_train_counts(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data(format!("{}: bad row `{l}`", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        for seed in 0..20 {
            assert_eq!(generate_scene(seed, &cfg).unwrap(), generate_scene(seed, &cfg).unwrap());
        }
    }

    #[test]
    fn counts_stay_in_range_and_labels_follow_rules() {
        let cfg = SynthConfig::default();
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!((cfg.min_humans..=cfg.max_humans).contains(&s.humans.len()));
            assert!((cfg.min_objects..=cfg.max_objects).contains(&s.objects.len()));
            assert_eq!(s.triplets, label_scene(&s.humans, &s.objects, &cfg));
            for b in s.humans.iter().chain(s.objects.iter().map(|o| &o.bbox)) {
                b.validate().unwrap();
            }
        }
    }

    #[test]
    fn forced_hold_scene() {
        let cfg = SynthConfig {
            min_humans: 1,
            max_humans: 1,
            min_objects: 1,
            max_objects: 1,
            rules: vec![true, false, false, false, false, false],
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert_eq!(
                s.triplets,
                vec![Triplet {
                    human: 0,
                    object: 0,
                    interaction: HOLD
                }]
            );
        }
    }

    #[test]
    fn every_interaction_occurs() {
        let cfg = SynthConfig::default();
        let scenes: Vec<Scene> = (0..300).map(|s| generate_scene(s, &cfg).unwrap()).collect();
        let counts = interaction_counts(&scenes, 6);
        assert!(counts.iter().all(|&c| c >= 30), "{counts:?}");
    }

    #[test]
    fn rare_knob_makes_a_rare_class() {
        let cfg = SynthConfig {
            rare_interaction: Some(TEAM_PLAY),
            rare_weight: 0.005,
            ..SynthConfig::default()
        };
        let scenes = generate_split(&cfg, Split::Train, 200, 0).unwrap();
        let counts = interaction_counts(&scenes, 6);
        assert!(counts[TEAM_PLAY] < RARE_THRESHOLD, "{counts:?}");
        assert!(rare_set(&counts)[TEAM_PLAY]);
    }

    #[test]
    fn raster_cases() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let empty = Scene {
            seed: 3,
            humans: vec![],
            objects: vec![],
            triplets: vec![],
        };
        let (f, p) = rasterize(&empty, &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(p, positional_embedding(&cfg).unwrap());

        let one = Scene {
            humans: vec![BBox::new(0.33, 0.71, 0.2, 0.3).unwrap()],
            ..empty
        };
        let (f, _) = rasterize(&one, &cfg).unwrap();
        let norms: Vec<f64> = (0..f.rows()).map(|r| f.row(r).iter().map(|v| v * v).sum()).collect();
        let arg = (0..norms.len()).fold(0, |b, i| if norms[i] > norms[b] { i } else { b });
        assert_eq!((arg / 16, arg % 16), ((0.71f64 * 16.0) as usize, (0.33f64 * 16.0) as usize));
    }

    #[test]
    fn seeds_are_disjoint_between_splits() {
        let train: BTreeSet<u64> = (0..1000).map(|i| scene_seed(7, Split::Train, i)).collect();
        assert!((0..1000).all(|i| !train.contains(&scene_seed(7, Split::Val, i))));
    }

    #[test]
    fn targets_group_labels_by_pair() {
        let h = BBox::new(0.5, 0.5, 0.2, 0.3).unwrap();
        let o = BBox::new(0.5, 0.55, 0.1, 0.1).unwrap();
        let s = Scene {
            seed: 0,
            humans: vec![h],
            objects: vec![SceneObject { bbox: o, class: 1 }],
            triplets: vec![
                Triplet {
                    human: 0,
                    object: 0,
                    interaction: 0,
                },
                Triplet {
                    human: 0,
                    object: 0,
                    interaction: 5,
                },
            ],
        };
        let t = scene_targets(&s);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].interactions, vec![0, 5]);
    }
}
