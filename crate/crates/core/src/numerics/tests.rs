use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, m: usize, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(&[m, n], (0..m * n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-hi, -gap] U [gap, hi]`, kept away from kinks at zero.
fn random_off_zero(rng: &mut ChaCha8Rng, m: usize, n: usize, gap: f64, hi: f64) -> Tensor {
    let data = (0..m * n)
        .map(|_| {
            let v = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(&[m, n], data).unwrap()
}

/// Gradient-checks `sum(f(inputs) * weights)` w.r.t. every input.
fn check_op<F>(inputs: &[Tensor], f: F, rng: &mut ChaCha8Rng) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let y = f(&mut g, &vars).unwrap();
        g.value(y).clone()
    };
    let weights = random(rng, probe.rows(), probe.cols(), -1.0, 1.0);
    let build = |xs: &[Tensor], g: &mut Graph| -> crate::Result<(Vec<Var>, Var)> {
        let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
        let y = f(g, &vars)?;
        let w = g.constant(weights.clone());
        let p = g.mul(y, w)?;
        Ok((vars, g.sum_all(p)?))
    };
    let mut g = Graph::new();
    let (vars, loss) = build(inputs, &mut g).unwrap();
    let adj = g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, x)| adj.wrt(v).map_or(vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|x| x.data().to_vec()).collect();
    finite_diff_check(
        |p| {
            let mut off = 0;
            let xs: Vec<Tensor> = inputs
                .iter()
                .map(|x| {
                    let n = x.len();
                    let v = Tensor::new(x.shape(), p[off..off + n].to_vec()).unwrap();
                    off += n;
                    v
                })
                .collect();
            let mut g = Graph::new();
            let (_, loss) = build(&xs, &mut g)?;
            Ok(g.value(loss).item())
        },
        &flat,
        &analytic,
        1e-4,
        1e-4,
    )
    .unwrap()
}

#[test]
fn matmul_hand_cases() {
    let mut g = Graph::new();
    let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = g.constant(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
    let i2 = g.constant(Tensor::identity(2));
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    let ia = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(ia).data(), g.value(a).data());
    let za = g.matmul(z, a).unwrap();
    assert!(g.value(za).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    assert!(g.matmul_t(a, b).is_ok());
}

#[test]
fn softmax_hand_cases() {
    let mut g = Graph::new();
    let c = g.constant(t(&[vec![2.5, 2.5, 2.5]]));
    let s = g.softmax(c, Axis::Cols).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let one = g.constant(t(&[vec![-4.0]]));
    let s = g.softmax(one, Axis::Cols).unwrap();
    assert_eq!(g.value(s).data(), &[1.0]);
    let two = g.constant(t(&[vec![0.0, 2f64.ln()]]));
    let s = g.softmax(two, Axis::Cols).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-12 && (v[1] - 2.0 / 3.0).abs() < 1e-12);
    // Down the rows the same values give the same split.
    let col = g.constant(t(&[vec![0.0], vec![2f64.ln()]]));
    let s = g.softmax(col, Axis::Rows).unwrap();
    assert!((g.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_is_normalized_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = rng.gen_range(1..6);
        let n = rng.gen_range(1..9);
        let x = random(&mut rng, m, n, -1e3, 1e3);
        let mut g = Graph::new();
        let v = g.constant(x);
        for axis in [Axis::Cols, Axis::Rows] {
            let s = g.softmax(v, axis).unwrap();
            let y = g.value(s);
            assert!(y.data().iter().all(|&p| p >= 0.0));
            match axis {
                Axis::Cols => {
                    for r in 0..m {
                        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    }
                }
                Axis::Rows => {
                    for c in 0..n {
                        let s: f64 = (0..m).map(|r| y.get(r, c)).sum();
                        assert!((s - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn layer_norm_hand_cases() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[1, 2], 1.0));
    let bias = g.constant(Tensor::zeros(&[1, 2]));
    let x = g.constant(t(&[vec![1.0, 3.0]]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

    let gain3 = g.constant(Tensor::full(&[1, 3], 1.0));
    let bias3 = g.constant(Tensor::zeros(&[1, 3]));
    let c = g.constant(t(&[vec![4.0, 4.0, 4.0]]));
    let y = g.layer_norm(c, gain3, bias3, NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let a = g.constant(t(&[vec![0.3, -1.2, 2.0]]));
    let shifted = g.add_scalar(a, 17.5).unwrap();
    let ya = g.layer_norm(a, gain3, bias3, NORM_EPS).unwrap();
    let ys = g.layer_norm(shifted, gain3, bias3, NORM_EPS).unwrap();
    assert!(g.value(ya).max_abs_diff(g.value(ys)) < 1e-12);
}

#[test]
fn affine_relu_stack_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let l = Linear::new(&mut store, "l", 2, 2, &mut rng).unwrap();
    *store.value_mut(l.weight) = Tensor::identity(2);
    let l2 = Linear::new(&mut store, "l2", 2, 2, &mut rng).unwrap();
    *store.value_mut(l2.weight) = Tensor::identity(2);

    let mut g = Graph::new();
    let x = g.constant(t(&[vec![1.0, -2.0]]));
    let single = affine_relu_stack(&mut g, &store, x, &[l], true).unwrap();
    assert_eq!(g.value(single).data(), &[1.0, -2.0]);
    let both = affine_relu_stack(&mut g, &store, x, &[l, l2], true).unwrap();
    assert_eq!(g.value(both).data(), &[1.0, 0.0]);

    l.zero(&mut store);
    l2.zero(&mut store);
    store.value_mut(l2.bias).data_mut().copy_from_slice(&[0.25, -0.5]);
    let mut g = Graph::new();
    let x = g.constant(t(&[vec![1.0, -2.0], vec![3.0, 4.0]]));
    let y = affine_relu_stack(&mut g, &store, x, &[l, l2], true).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -0.5, 0.25, -0.5]);

    let l3 = Linear::new(&mut store, "l3", 3, 2, &mut rng).unwrap();
    assert!(affine_relu_stack(&mut g, &store, x, &[l3], true).is_err());
}

#[test]
fn gather_rows_hand_cases() {
    let x = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let same = g.gather_rows(v, &[0, 1, 2]).unwrap();
    assert_eq!(g.value(same), &x);
    let rev = g.gather_rows(v, &[2, 1, 0]).unwrap();
    assert_eq!(g.value(rev).data(), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
    assert!(matches!(g.gather_rows(v, &[3]), Err(Error::Index { index: 3, len: 3 })));

    let dup = g.gather_rows(v, &[1, 1]).unwrap();
    let s = g.sum_all(dup).unwrap();
    let adj = g.backward(s).unwrap();
    assert_eq!(adj.wrt(v).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
}

#[test]
fn gather_backward_matches_dense_selection_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=8);
        let idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
        let x = random(&mut rng, n, d, -1.0, 1.0);
        let w = random(&mut rng, k, d, -1.0, 1.0);

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let gathered = g.gather_rows(xv, &idx).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(gathered, wv).unwrap();
        let s = g.sum_all(p).unwrap();
        let adj = g.backward(s).unwrap();

        // Dense route: gather = S x with S[k][idx[k]] = 1, so dL/dx = S^T w.
        let mut sel = Tensor::zeros(&[k, n]);
        for (r, &i) in idx.iter().enumerate() {
            sel.data_mut()[r * n + i] = 1.0;
        }
        let mut h = Graph::new();
        let sv = h.constant(sel);
        let wv = h.constant(w);
        let dense = h.matmul_ex(sv, wv, true, false).unwrap();
        let got = adj.wrt(xv).unwrap();
        for (a, b) in got.iter().zip(h.value(dense).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn channel_max_hand_cases() {
    let mut g = Graph::new();
    let one = g.input(t(&[vec![0.5, -1.0]]));
    let m = g.channel_max(one).unwrap();
    assert_eq!(g.value(m).data(), &[0.5, -1.0]);

    let x = g.input(t(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
    let m = g.channel_max(x).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);

    let eq = g.input(t(&[vec![2.0, 2.0], vec![2.0, 2.0], vec![2.0, 2.0]]));
    let m = g.channel_max(eq).unwrap();
    assert_eq!(g.value(m).data(), &[2.0, 2.0]);
    let s = g.sum_all(m).unwrap();
    let adj = g.backward(s).unwrap();
    assert_eq!(adj.wrt(eq).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn segment_max_rejects_empty_segment() {
    let mut g = Graph::new();
    let x = g.input(t(&[vec![1.0], vec![2.0]]));
    assert!(matches!(g.segment_max(x, &[0, 2, 2]), Err(Error::EmptyGroup(_))));
}

#[test]
fn non_finite_results_abort() {
    let mut g = Graph::new();
    let x = g.input(t(&[vec![0.0, 1.0]]));
    let err = g.ln(x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref op, .. } if op == "ln"));
}

#[test]
fn every_op_matches_central_differences() {
    type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<usize>)>);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = |rng: &mut ChaCha8Rng| (rng.gen_range(1..5), rng.gen_range(1..5));

    let cases: Vec<Case> = vec![
        ("matmul", Box::new(move |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..5);
            (vec![random(r, m, k, -1.0, 1.0), random(r, k, n, -1.0, 1.0)], vec![])
        })),
        ("elementwise", Box::new(move |r| {
            let (m, n) = dims(r);
            (vec![random(r, m, n, -2.0, 2.0), random_off_zero(r, m, n, 0.5, 2.0)], vec![])
        })),
        ("unary_smooth", Box::new(move |r| {
            let (m, n) = dims(r);
            (vec![random(r, m, n, -3.0, 3.0)], vec![])
        })),
        ("unary_kinked", Box::new(move |r| {
            let (m, n) = dims(r);
            (vec![random_off_zero(r, m, n, 0.05, 2.0), random_off_zero(r, m, n, 0.05, 2.0)], vec![])
        })),
        ("positive", Box::new(move |r| {
            let (m, n) = dims(r);
            (vec![random(r, m, n, 0.2, 2.0)], vec![])
        })),
        ("norms", Box::new(move |r| {
            let m = r.gen_range(2..5);
            let n = r.gen_range(2..6);
            (vec![random(r, m, n, -2.0, 2.0), random(r, 1, n, 0.5, 1.5), random(r, 1, n, -0.5, 0.5)], vec![])
        })),
        ("structural", Box::new(move |r| {
            let (m, n) = dims(r);
            let idx: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..m)).collect();
            (vec![random(r, m, n, -1.0, 1.0), random(r, m, n, -1.0, 1.0), random(r, 1, n, -1.0, 1.0)], idx)
        })),
        ("segments", Box::new(move |r| {
            let segs = r.gen_range(1..5);
            let sizes: Vec<usize> = (0..segs).map(|_| r.gen_range(1..4)).collect();
            let rows: usize = sizes.iter().sum();
            let n = r.gen_range(1..5);
            (vec![random(r, rows, n, -2.0, 2.0)], sizes)
        })),
    ];

    let mut checked = 0;
    for round in 0..20 {
        for (name, make) in &cases {
            let (inputs, aux) = make(&mut rng);
            let aux2 = aux.clone();
            let report = match *name {
                "matmul" => check_op(&inputs, |g, v| {
                    let ab = g.matmul(v[0], v[1])?;
                    let bt = g.transpose(v[1])?;
                    let ab2 = g.matmul_t(v[0], bt)?;
                    let at = g.transpose(v[0])?;
                    let ab3 = g.matmul_ex(at, v[1], true, false)?;
                    let s = g.add(ab, ab2)?;
                    g.add(s, ab3)
                }, &mut rng),
                "elementwise" => check_op(&inputs, |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let s = g.sub(v[0], v[1])?;
                    let m = g.mul(a, s)?;
                    let d = g.div(m, v[1])?;
                    let sc = g.scale(d, -0.7)?;
                    g.add_scalar(sc, 0.3)
                }, &mut rng),
                "unary_smooth" => check_op(&inputs, |g, v| {
                    let s = g.sigmoid(v[0])?;
                    let e = g.exp(v[0])?;
                    let l = g.log_sigmoid(v[0])?;
                    let sm = g.softmax(v[0], Axis::Cols)?;
                    let sr = g.softmax(v[0], Axis::Rows)?;
                    let ls = g.log_softmax_rows(v[0])?;
                    let parts = [s, e, l, sm, sr, ls];
                    g.concat_cols(&parts)
                }, &mut rng),
                "unary_kinked" => check_op(&inputs, |g, v| {
                    let r = g.relu(v[0])?;
                    let a = g.abs(v[0])?;
                    let c = g.clamp_min(v[0], 0.0)?;
                    let mn = g.min(v[0], v[1])?;
                    let mx = g.max(v[0], v[1])?;
                    g.concat_cols(&[r, a, c, mn, mx])
                }, &mut rng),
                "positive" => check_op(&inputs, |g, v| {
                    let l = g.ln(v[0])?;
                    let p = g.pow_const(v[0], 2.5)?;
                    let p0 = g.pow_const(v[0], 0.0)?;
                    let p1 = g.pow_const(v[0], 1.0)?;
                    g.concat_cols(&[l, p, p0, p1])
                }, &mut rng),
                "norms" => check_op(&inputs, |g, v| {
                    let a = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let b = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
                    g.concat_cols(&[a, b])
                }, &mut rng),
                "structural" => check_op(&inputs, move |g, v| {
                    let gathered = g.gather_rows(v[0], &aux2)?;
                    let gs = g.sum_all(gathered)?;
                    let rows = g.concat_rows(&[v[0], v[1]])?;
                    let n = g.value(v[0]).cols();
                    let m = g.value(v[0]).rows();
                    let sl = g.slice_rows(rows, m, m)?;
                    let cols = g.concat_cols(&[sl, v[0]])?;
                    let sc = g.slice_cols(cols, n / 2, n)?;
                    let tiled = g.tile_cols(sc, 3)?;
                    let ar = g.add_row(v[1], v[2])?;
                    let sel = g.select(tiled, &[(0, 0), (m - 1, 3 * n - 1), (0, 0)])?;
                    let ss = g.sum_all(sel)?;
                    let tot = g.add(gs, ss)?;
                    let tt = g.tile_cols(tot, 1)?;
                    let arsum = g.sum_all(ar)?;
                    let out = g.add(tt, arsum)?;
                    let t2 = g.sum_all(tiled)?;
                    g.add(out, t2)
                }, &mut rng),
                "segments" => {
                    let mut offsets = vec![0];
                    for s in &aux {
                        offsets.push(offsets.last().unwrap() + s);
                    }
                    let off2 = offsets.clone();
                    check_op(&inputs, move |g, v| {
                        let sm = g.segment_softmax(v[0], &off2)?;
                        let w = g.mul(sm, v[0])?;
                        let ss = g.segment_sum(w, &off2)?;
                        let mx = g.segment_max(v[0], &off2)?;
                        g.concat_cols(&[ss, mx])
                    }, &mut rng)
                }
                _ => unreachable!(),
            };
            assert!(report.passed, "{name} round {round}: {report:?}");
            checked += 1;
        }
    }
    assert!(checked >= 100);
}

/// Reference AdamW on a single scalar, written independently of `ParamStore`.
fn scalar_adam(w: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let mh = *m / (1.0 - b1.powi(t));
    let vh = *v / (1.0 - b2.powi(t));
    *w -= lr * mh / (vh.sqrt() + eps);
}

#[test]
fn adamw_matches_scalar_reference_over_many_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let init: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[1, 5], init.clone()).unwrap()).unwrap();
    let hp = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut w = init;
    let mut m = [0.0; 5];
    let mut v = [0.0; 5];
    for step in 1..=1000 {
        let grad: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lr = rng.gen_range(1e-4..1e-2);
        let mut gr = store.zero_grads();
        gr.add(id, &grad);
        store.adamw_step(&gr, &hp, lr).unwrap();
        for i in 0..5 {
            scalar_adam(&mut w[i], &mut m[i], &mut v[i], step, grad[i], lr);
        }
    }
    for (a, b) in store.value(id).data().iter().zip(&w) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn gather_identity_is_identity(m in 1usize..8, n in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, m, n, -5.0, 5.0);
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let idx: Vec<usize> = (0..m).collect();
            let y = g.gather_rows(v, &idx).unwrap();
            prop_assert_eq!(g.value(y), &x);
        }

        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
            let mut g = Graph::new();
            let v = g.constant(Tensor::row_vector(xs).unwrap());
            let s = g.softmax(v, Axis::Cols).unwrap();
            let total: f64 = g.value(s).data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
