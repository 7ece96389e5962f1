//! Finite-difference checks of every differentiable operation and module.
//!
//! Each check builds a scalar `sum(out * R)` with a fixed random `R`, takes
//! the reverse-mode gradient with respect to all inputs and parameters, and
//! compares it against central differences. Inputs of piecewise operations
//! are drawn away from their kinks so the differences stay valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo_attention::{geometric_layer, GeoConfig, GeoInputs, GeoLayerParams, GroupMode};
use crate::geometry::{BBox, GroupIndex};
use crate::model::{
    asymmetric_cls_loss, focal_cls_loss, giou_loss_rows, scene_loss, DecoderLayer, EncoderLayer, Example,
    GtPair, HoiModel, ModelConfig, MultiHeadAttention,
};
use crate::numerics::{
    finite_diff_check, Axis, Graph, Linear, Mlp, Norm, NormKind, NormMlp, ParamStore, Tensor, Var,
};
use crate::sem_group::{semantic_layer, SemLayerParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSettings {
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    /// Largest accepted relative error; infinity accepts everything.
    pub tol: f64,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 1e-4,
            tol: 1e-4,
        }
    }
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

struct Suite {
    rng: ChaCha8Rng,
    settings: SuiteSettings,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn uniform(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(&[rows, cols], data).expect("shape matches data")
    }

    /// Values with magnitude in `[0.2, 1.5)` and random sign, away from zero.
    fn nonzero(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let m = self.rng.gen_range(0.2..1.5);
                if self.rng.gen() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(&[rows, cols], data).expect("shape matches data")
    }

    /// Distinct values at least 0.3 apart in random order.
    fn distinct(&mut self, rows: usize, cols: usize) -> Tensor {
        let n = rows * cols;
        let mut data: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.15 * n as f64).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            data.swap(i, j);
        }
        Tensor::new(&[rows, cols], data).expect("shape matches data")
    }

    fn check(&mut self, name: &str, store: &ParamStore, inputs: Vec<Tensor>, build: &Build<'_>) -> Result<()> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        let (m, n) = g.shape(out);
        let weights = self.uniform(m, n, -1.0, 1.0);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod)?;
        let adj = g.backward(loss)?;

        let mut grads = store.zero_grads();
        g.accumulate_param_grads(&adj, &mut grads);
        let mut analytic = grads.flatten();
        let mut x = store.flatten();
        for (v, t) in vars.iter().zip(&inputs) {
            match adj.wrt(*v) {
                Some(d) => analytic.extend_from_slice(d),
                None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
            }
            x.extend_from_slice(t.data());
        }

        let n_params = store.numel();
        let mut probe_store = store.clone();
        let mut probe_inputs = inputs.clone();
        let f = |p: &[f64]| -> Result<f64> {
            probe_store.unflatten(&p[..n_params])?;
            let mut off = n_params;
            for t in probe_inputs.iter_mut() {
                let len = t.len();
                t.data_mut().copy_from_slice(&p[off..off + len]);
                off += len;
            }
            let mut g = Graph::new();
            let vars: Vec<Var> = probe_inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &probe_store, &vars)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            let loss = g.sum_all(prod)?;
            Ok(g.value(loss).item())
        };
        let r = finite_diff_check(f, &x, &analytic, self.settings.h, self.settings.tol)?;
        self.rows.push(CheckRow {
            name: name.to_string(),
            coords: r.coords,
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            passed: r.passed,
        });
        Ok(())
    }

    fn op(&mut self, name: &str, inputs: Vec<Tensor>, build: &Build<'_>) -> Result<()> {
        self.check(name, &ParamStore::new(), inputs, build)
    }
}

fn ops(s: &mut Suite) -> Result<()> {
    let a = s.uniform(3, 4, -1.0, 1.0);
    let b = s.uniform(4, 2, -1.0, 1.0);
    let c = s.uniform(3, 4, -1.0, 1.0);
    s.op("matmul", vec![a.clone(), b.clone()], &|g, _, v| g.matmul(v[0], v[1]))?;
    s.op("matmul_t", vec![a.clone(), c.clone()], &|g, _, v| g.matmul_t(v[0], v[1]))?;
    let bt = s.uniform(3, 2, -1.0, 1.0);
    s.op("matmul_ta", vec![a.clone(), bt], &|g, _, v| g.matmul_ex(v[0], v[1], true, false))?;
    s.op("add", vec![a.clone(), c.clone()], &|g, _, v| g.add(v[0], v[1]))?;
    s.op("sub", vec![a.clone(), c.clone()], &|g, _, v| g.sub(v[0], v[1]))?;
    s.op("mul", vec![a.clone(), c.clone()], &|g, _, v| g.mul(v[0], v[1]))?;
    let den = s.nonzero(3, 4);
    s.op("div", vec![a.clone(), den], &|g, _, v| g.div(v[0], v[1]))?;

    // Pairs separated by at least 0.2 so min/max never switch under a probe.
    let gap = s.nonzero(3, 4);
    let other = Tensor::new(
        &[3, 4],
        a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect(),
    )?;
    s.op("min", vec![a.clone(), other.clone()], &|g, _, v| g.min(v[0], v[1]))?;
    s.op("max", vec![a.clone(), other], &|g, _, v| g.max(v[0], v[1]))?;

    let row = s.uniform(1, 4, -1.0, 1.0);
    s.op("add_row", vec![a.clone(), row], &|g, _, v| g.add_row(v[0], v[1]))?;
    s.op("scale", vec![a.clone()], &|g, _, v| g.scale(v[0], -1.7))?;
    s.op("add_scalar", vec![a.clone()], &|g, _, v| g.add_scalar(v[0], 0.3))?;
    s.op("neg", vec![a.clone()], &|g, _, v| g.neg(v[0]))?;
    let away = s.nonzero(3, 4);
    s.op("relu", vec![away.clone()], &|g, _, v| g.relu(v[0]))?;
    s.op("abs", vec![away.clone()], &|g, _, v| g.abs(v[0]))?;
    s.op("clamp_min", vec![away], &|g, _, v| g.clamp_min(v[0], 0.0))?;
    s.op("sigmoid", vec![a.clone()], &|g, _, v| g.sigmoid(v[0]))?;
    s.op("exp", vec![a.clone()], &|g, _, v| g.exp(v[0]))?;
    s.op("log_sigmoid", vec![a.clone()], &|g, _, v| g.log_sigmoid(v[0]))?;
    let pos = s.uniform(3, 4, 0.2, 2.0);
    s.op("ln", vec![pos.clone()], &|g, _, v| g.ln(v[0]))?;
    s.op("pow_const", vec![pos], &|g, _, v| g.pow_const(v[0], 2.5))?;
    s.op("softmax_cols", vec![a.clone()], &|g, _, v| g.softmax(v[0], Axis::Cols))?;
    s.op("softmax_rows", vec![a.clone()], &|g, _, v| g.softmax(v[0], Axis::Rows))?;
    s.op("log_softmax_rows", vec![a.clone()], &|g, _, v| g.log_softmax_rows(v[0]))?;

    let gain = s.uniform(1, 4, 0.5, 1.5);
    let bias = s.uniform(1, 4, -0.5, 0.5);
    let x = s.uniform(5, 4, -1.0, 1.0);
    s.op("layer_norm", vec![x.clone(), gain.clone(), bias.clone()], &|g, _, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    s.op("batch_norm", vec![x.clone(), gain, bias], &|g, _, v| {
        g.batch_norm(v[0], v[1], v[2], 1e-5)
    })?;

    s.op("gather_rows", vec![x.clone()], &|g, _, v| g.gather_rows(v[0], &[4, 0, 0, 2, 1, 4]))?;
    let offsets = [0, 2, 2, 5, 6];
    let seg = s.uniform(6, 3, -1.0, 1.0);
    s.op("segment_softmax", vec![seg.clone()], &|g, _, v| g.segment_softmax(v[0], &offsets))?;
    s.op("segment_sum", vec![seg], &|g, _, v| g.segment_sum(v[0], &offsets))?;
    let spread = s.distinct(6, 3);
    s.op("segment_max", vec![spread.clone()], &|g, _, v| g.segment_max(v[0], &[0, 2, 5, 6]))?;
    s.op("channel_max", vec![spread], &|g, _, v| g.channel_max(v[0]))?;
    s.op("concat_cols", vec![a.clone(), c.clone()], &|g, _, v| g.concat_cols(&[v[0], v[1]]))?;
    s.op("concat_rows", vec![a.clone(), c.clone()], &|g, _, v| g.concat_rows(&[v[0], v[1]]))?;
    s.op("slice_cols", vec![a.clone()], &|g, _, v| g.slice_cols(v[0], 1, 2))?;
    s.op("slice_rows", vec![a.clone()], &|g, _, v| g.slice_rows(v[0], 1, 2))?;
    s.op("tile_cols", vec![a.clone()], &|g, _, v| g.tile_cols(v[0], 3))?;
    s.op("transpose", vec![a.clone()], &|g, _, v| g.transpose(v[0]))?;
    s.op("sum_all", vec![a.clone()], &|g, _, v| g.sum_all(v[0]))?;
    s.op("mean_all", vec![a.clone()], &|g, _, v| g.mean_all(v[0]))?;
    s.op("select", vec![a], &|g, _, v| g.select(v[0], &[(0, 1), (2, 3), (0, 1)]))?;
    Ok(())
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.1..0.3),
                rng.gen_range(0.1..0.3),
            )
            .expect("box inside the frame")
        })
        .collect()
}

fn modules(s: &mut Suite) -> Result<()> {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng.gen());

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", d, 3, &mut rng)?;
    let x = s.uniform(5, d, -1.0, 1.0);
    s.check("linear", &store, vec![x.clone()], &|g, st, v| lin.forward(g, st, v[0]))?;

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[d, 6, 3], &mut rng)?;
    s.check("mlp", &store, vec![x.clone()], &|g, st, v| mlp.forward(g, st, v[0]))?;

    for (kind, name) in [(NormKind::Layer, "norm_mlp_layer"), (NormKind::Batch, "norm_mlp_batch")] {
        let mut store = ParamStore::new();
        let net = NormMlp::new(&mut store, name, &[d, 6, 3], kind, true, &mut rng)?;
        s.check(name, &store, vec![x.clone()], &|g, st, v| net.forward(g, st, v[0]))?;
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, name, kind, d)?;
        let label = format!("{name}_affine");
        s.check(&label, &store, vec![x.clone()], &|g, st, v| norm.forward(g, st, v[0]))?;
    }

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", d, 2, &mut rng)?;
    let q = s.uniform(3, d, -1.0, 1.0);
    s.check("multi_head_attention", &store, vec![q.clone(), x.clone()], &|g, st, v| {
        mha.forward(g, st, v[0], v[1], v[1])
    })?;

    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, "enc", d, 2, 2, &mut rng)?;
    let pos = s.uniform(5, d, -1.0, 1.0);
    s.check("encoder_layer", &store, vec![x.clone(), pos], &|g, st, v| {
        enc.forward(g, st, v[0], v[1])
    })?;

    let mut store = ParamStore::new();
    let dec = DecoderLayer::new(&mut store, "dec", d, 2, 2, &mut rng)?;
    let qpos = s.uniform(3, d, -1.0, 1.0);
    s.check("decoder_layer", &store, vec![q.clone(), qpos, x.clone()], &|g, st, v| {
        dec.forward(g, st, v[0], v[1], v[2])
    })?;

    let boxes_h = random_boxes(&mut rng, 4);
    let boxes_o = random_boxes(&mut rng, 4);
    for (mode, name) in [(GroupMode::Intra, "geometric_layer_intra"), (GroupMode::Mixed, "geometric_layer_mixed")] {
        let mut store = ParamStore::new();
        let params = GeoLayerParams::new(&mut store, "geo", d, &mut rng)?;
        let cfg = GeoConfig {
            k: 2,
            mode,
            ..GeoConfig::default()
        };
        let ins: Vec<Tensor> = (0..4).map(|_| s.uniform(4, d, -1.0, 1.0)).collect();
        // Group membership is a discrete choice of the box geometry and does
        // not depend on any checked coordinate.
        let build = |g: &mut Graph, st: &ParamStore, v: &[Var]| -> Result<Var> {
            let inputs = GeoInputs {
                q_h: v[0],
                q_o: v[1],
                pos_h: v[2],
                pos_o: v[3],
                boxes_h: &boxes_h,
                boxes_o: &boxes_o,
            };
            let (h, o, _) = geometric_layer(g, st, &params, &cfg, inputs, None)?;
            g.concat_rows(&[h, o])
        };
        s.check(name, &store, ins, &build)?;
    }

    for (kind, name) in [(NormKind::Layer, "semantic_layer_layer"), (NormKind::Batch, "semantic_layer_batch")] {
        let mut store = ParamStore::new();
        let params = SemLayerParams::new(&mut store, "sem", 3 * d, kind, &mut rng)?;
        let q = s.uniform(5, 3 * d, -1.0, 1.0);
        let groups = GroupIndex::new(vec![vec![1, 2], vec![0, 3], vec![4, 0], vec![2, 1], vec![3, 2]]);
        s.check(name, &store, vec![q], &|g, st, v| {
            Ok(semantic_layer(g, st, &params, v[0], 2, Some(&groups))?.0)
        })?;
    }
    Ok(())
}

fn losses(s: &mut Suite) -> Result<()> {
    let raw = s.uniform(3, 4, -2.0, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng.gen());
    let target = Tensor::from_rows(
        &random_boxes(&mut rng, 3)
            .iter()
            .map(|b| b.to_array().to_vec())
            .collect::<Vec<_>>(),
    )?;
    s.op("giou_loss", vec![raw], &|g, _, v| {
        let b = g.sigmoid(v[0])?;
        giou_loss_rows(g, b, &target)
    })?;

    let labels = Tensor::new(&[4, 3], (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
    // Keep the clipped probability p - clip away from zero, where relu kinks.
    let logits = Tensor::new(
        &[4, 3],
        (0..12)
            .map(|i| {
                let m = rng.gen_range(0.0..2.0);
                if i % 2 == 0 {
                    m
                } else {
                    -1.5 - m
                }
            })
            .collect(),
    )?;
    s.op("asymmetric_loss", vec![logits.clone()], &|g, _, v| {
        asymmetric_cls_loss(g, v[0], &labels, 1.0, 4.0, 0.05)
    })?;
    s.op("asymmetric_loss_unclipped", vec![logits.clone()], &|g, _, v| {
        asymmetric_cls_loss(g, v[0], &labels, 0.0, 0.0, 0.0)
    })?;
    s.op("focal_loss", vec![logits], &|g, _, v| focal_cls_loss(g, v[0], &labels, 0.25, 2.0))?;
    Ok(())
}

/// Full micro model and composite loss with respect to every parameter. The
/// grouping and matching decisions of the first pass are replayed.
fn full_model(s: &mut Suite) -> Result<()> {
    let c = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng.gen());
    let mut store = ParamStore::new();
    let model = HoiModel::new(c.clone(), &mut store, &mut rng)?;
    // Residual outputs start at zero, which would hide the attention
    // gradients; jitter every parameter away from its init.
    let jittered: Vec<f64> = store.flatten().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
    store.unflatten(&jittered)?;
    let t = 6;
    let features = s.uniform(t, c.d_feature, -1.0, 1.0);
    let pos = s.uniform(t, c.d_entity, -1.0, 1.0);
    let boxes = random_boxes(&mut rng, 2);
    let ex = Example {
        features,
        pos,
        gts: vec![GtPair {
            human: boxes[0],
            object: boxes[1],
            object_class: 1,
            interactions: vec![0, 2],
        }],
    };
    let mut g = Graph::new();
    let (loss, _, routing, assignment) = scene_loss(&mut g, &model, &store, &ex, None)?;
    let adj = g.backward(loss)?;
    let mut grads = store.zero_grads();
    g.accumulate_param_grads(&adj, &mut grads);
    let mut probe = store.clone();
    let f = |p: &[f64]| -> Result<f64> {
        probe.unflatten(p)?;
        let mut g = Graph::new();
        let (l, ..) = scene_loss(&mut g, &model, &probe, &ex, Some((&routing, &assignment)))?;
        Ok(g.value(l).item())
    };
    let r = finite_diff_check(f, &store.flatten(), &grads.flatten(), s.settings.h, s.settings.tol)?;
    s.rows.push(CheckRow {
        name: "full_micro_model".into(),
        coords: r.coords,
        max_rel_err: r.max_rel_err,
        max_abs_err: r.max_abs_err,
        passed: r.passed,
    });
    Ok(())
}

/// Runs every check; rows come back in a fixed order for a given seed.
pub fn gradcheck_suite(settings: SuiteSettings) -> Result<Vec<CheckRow>> {
    if !(settings.h > 0.0 && settings.h.is_finite()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    if settings.tol.is_nan() || settings.tol < 0.0 {
        return Err(Error::config("tolerance must be non-negative"));
    }
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(settings.seed),
        settings,
        rows: Vec::new(),
    };
    ops(&mut s)?;
    modules(&mut s)?;
    losses(&mut s)?;
    full_model(&mut s)?;
    Ok(s.rows)
}

/// `name,coords,max_rel_err,max_abs_err,passed` rows.
pub fn gradcheck_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("name,coords,max_rel_err,max_abs_err,passed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6e},{:.6e},{}\n",
            r.name, r.coords, r.max_rel_err, r.max_abs_err, r.passed as u8
        ));
    }
    out
}
