//! Semantic grouping: each entity pools edge features over its `K` most
//! similar peers (cosine similarity of embeddings) and adds the pooled
//! context back through a small network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{select_top_k, SemanticGroupIndex};
use crate::numerics::{Graph, NormKind, NormMlp, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemLayerParams {
    /// Edge network over `[q_i, q_j - q_i]`.
    pub edge: NormMlp,
    /// Context integration network.
    pub integrate: NormMlp,
    pub dim: usize,
}

impl SemLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            edge: NormMlp::new(store, &format!("{name}.edge"), &[2 * dim, dim, dim], norm, false, rng)?,
            integrate: NormMlp::new(store, &format!("{name}.integrate"), &[dim, dim, dim], norm, true, rng)?,
            dim,
        })
    }

    pub fn numel(&self) -> usize {
        self.edge.numel() + self.integrate.numel()
    }
}

/// Pairwise cosine similarity of the rows of `q`; rows with zero norm have
/// similarity 0 with everything.
pub fn cosine_sim_matrix(q: &Tensor) -> Tensor {
    let (n, d) = (q.rows(), q.cols());
    let norms: Vec<f64> = (0..n)
        .map(|i| q.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = (0..d).map(|c| q.get(i, c) * q.get(j, c)).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            s.data_mut()[i * n + j] = v;
            s.data_mut()[j * n + i] = v;
        }
    }
    s
}

/// The `k` most similar other entities per row, best first, ties to the lower index.
pub fn select_semantic_neighbors(sim: &Tensor, k: usize) -> Result<SemanticGroupIndex> {
    select_top_k(sim, k, false, |i, j| i != j)
}

/// Channel-wise max of the edge features of one entity over its group.
pub fn semantic_context(
    g: &mut Graph,
    store: &ParamStore,
    params: &SemLayerParams,
    q_i: Var,
    group: Var,
) -> Result<Var> {
    if g.shape(q_i).0 != 1 {
        return Err(Error::dim("semantic_context expects a single query row"));
    }
    let k = g.shape(group).0;
    let owner = g.gather_rows(q_i, &vec![0; k])?;
    let rel = g.sub(group, owner)?;
    let edge_in = g.concat_cols(&[owner, rel])?;
    let edges = params.edge.forward(g, store, edge_in)?;
    g.channel_max(edges)
}

/// `q + integrate(m)`.
pub fn integrate_context(
    g: &mut Graph,
    store: &ParamStore,
    params: &SemLayerParams,
    q: Var,
    context: Var,
) -> Result<Var> {
    let update = params.integrate.forward(g, store, context)?;
    g.add(q, update)
}

/// Semantic grouping over all rows of `q`. A single entity has no peers and
/// passes through unchanged.
pub fn semantic_layer(
    g: &mut Graph,
    store: &ParamStore,
    params: &SemLayerParams,
    q: Var,
    k: usize,
    frozen: Option<&SemanticGroupIndex>,
) -> Result<(Var, SemanticGroupIndex)> {
    if k == 0 {
        return Err(Error::config("semantic group size must be positive"));
    }
    let n = g.shape(q).0;
    let groups = match frozen {
        Some(gr) => {
            gr.validate(n)?;
            gr.clone()
        }
        None => select_semantic_neighbors(&cosine_sim_matrix(g.value(q)), k)?,
    };
    let pairs = groups.pairs();
    if pairs.members.is_empty() {
        return Ok((q, groups));
    }
    if (0..n).any(|i| groups.group(i).is_empty()) {
        return Err(Error::EmptyGroup("semantic group without members".into()));
    }
    let owners = g.gather_rows(q, &pairs.owners)?;
    let members = g.gather_rows(q, &pairs.members)?;
    let rel = g.sub(members, owners)?;
    let edge_in = g.concat_cols(&[owners, rel])?;
    let edges = params.edge.forward(g, store, edge_in)?;
    let context = g.segment_max(edges, &pairs.offsets)?;
    let out = integrate_context(g, store, params, q, context)?;
    Ok((out, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(&[m, n], (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(d: usize, norm: NormKind, seed: u64) -> (ParamStore, SemLayerParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = SemLayerParams::new(&mut store, "sem", d, norm, &mut rng).unwrap();
        (store, p, rng)
    }

    #[test]
    fn cosine_cases() {
        let q = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let s = cosine_sim_matrix(&q);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(0, 2), 1.0);
        assert_eq!(s.get(0, 3), -1.0);
        assert_eq!(s.get(4, 0), 0.0);
        assert_eq!(s.get(4, 4), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
    }

    #[test]
    fn cosine_of_diagonal_is_inverse_sqrt_two() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!((cosine_sim_matrix(&q).get(0, 1) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn top_two_of_a_row_with_a_tie() {
        let mut sim = Tensor::identity(4);
        sim.data_mut()[..4].copy_from_slice(&[1.0, 0.9, 0.1, 0.9]);
        let groups = select_semantic_neighbors(&sim, 2).unwrap();
        assert_eq!(groups.group(0), &[1, 3]);
    }

    #[test]
    fn integration_adds_the_update() {
        let (mut store, p, _) = setup(2, NormKind::Layer, 8);
        p.integrate.zero(&mut store);
        let last = &p.integrate.blocks.last().unwrap().0;
        *store.value_mut(last.bias) = Tensor::row_vector(vec![0.5, -0.5]).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Tensor::row_vector(vec![1.0, 1.0]).unwrap());
        let m = g.constant(Tensor::row_vector(vec![0.3, -2.0]).unwrap());
        let out = integrate_context(&mut g, &store, &p, q, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, 0.5]);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(2..12);
            let q = random(&mut rng, n, 5);
            let mut scaled = q.clone();
            for i in 0..n {
                let c = rng.gen_range(0.01..100.0);
                let d = scaled.cols();
                scaled.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|x| *x *= c);
            }
            let a = cosine_sim_matrix(&q);
            let b = cosine_sim_matrix(&scaled);
            assert!(a.max_abs_diff(&b) <= 1e-12);
            let k = rng.gen_range(1..n);
            assert_eq!(
                select_semantic_neighbors(&a, k).unwrap(),
                select_semantic_neighbors(&b, k).unwrap()
            );
        }
    }

    #[test]
    fn neighbor_selection_cases() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let groups = select_semantic_neighbors(&cosine_sim_matrix(&q), 2).unwrap();
        assert_eq!(groups.group(0), &[3, 1]);
        assert_eq!(groups.group(3), &[0, 1]);
        // k above n - 1 keeps every other entity.
        let groups = select_semantic_neighbors(&cosine_sim_matrix(&q), 10).unwrap();
        assert!(groups.groups().iter().all(|g| g.len() == 3));
        assert!(select_semantic_neighbors(&cosine_sim_matrix(&q), 0).is_err());
    }

    #[test]
    fn context_of_single_neighbor_is_its_edge_feature() {
        let (mut store, p, mut rng) = setup(3, NormKind::Layer, 1);
        let mut g = Graph::new();
        let qi = g.constant(random(&mut rng, 1, 3));
        let qj = g.constant(random(&mut rng, 1, 3));
        let m = semantic_context(&mut g, &store, &p, qi, qj).unwrap();
        let rel = g.sub(qj, qi).unwrap();
        let x = g.concat_cols(&[qi, rel]).unwrap();
        let direct = p.edge.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(m), g.value(direct));

        // Zeroed integration network gives the identity.
        p.integrate.zero(&mut store);
        let out = integrate_context(&mut g, &store, &p, qi, m).unwrap();
        assert_eq!(g.value(out), g.value(qi));
    }

    #[test]
    fn context_is_channelwise_max() {
        let (store, p, mut rng) = setup(4, NormKind::Layer, 2);
        let mut g = Graph::new();
        let qi = g.constant(random(&mut rng, 1, 4));
        let members = g.constant(random(&mut rng, 3, 4));
        let m = semantic_context(&mut g, &store, &p, qi, members).unwrap();
        let mut want = [f64::NEG_INFINITY; 4];
        for r in 0..3 {
            let row = g.gather_rows(members, &[r]).unwrap();
            let single = semantic_context(&mut g, &store, &p, qi, row).unwrap();
            for c in 0..4 {
                want[c] = want[c].max(g.value(single).get(0, c));
            }
        }
        assert_eq!(g.value(m).data(), &want[..]);
    }

    #[test]
    fn layer_matches_per_entity_evaluation() {
        let (store, p, mut rng) = setup(4, NormKind::Layer, 3);
        let q = random(&mut rng, 6, 4);
        let mut g = Graph::new();
        let qv = g.constant(q);
        let (out, groups) = semantic_layer(&mut g, &store, &p, qv, 2, None).unwrap();
        for i in 0..6 {
            let qi = g.gather_rows(qv, &[i]).unwrap();
            let nb = g.gather_rows(qv, groups.group(i)).unwrap();
            let m = semantic_context(&mut g, &store, &p, qi, nb).unwrap();
            let o = integrate_context(&mut g, &store, &p, qi, m).unwrap();
            let diff: f64 = g
                .value(o)
                .data()
                .iter()
                .zip(g.value(out).row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12);
        }
    }

    #[test]
    fn single_entity_and_zero_network_identities() {
        let (mut store, p, mut rng) = setup(4, NormKind::Layer, 4);
        let mut g = Graph::new();
        let one = g.constant(random(&mut rng, 1, 4));
        let (out, _) = semantic_layer(&mut g, &store, &p, one, 3, None).unwrap();
        assert_eq!(g.value(out), g.value(one));

        p.integrate.zero(&mut store);
        let q = g.constant(random(&mut rng, 5, 4));
        let (out, _) = semantic_layer(&mut g, &store, &p, q, 2, None).unwrap();
        assert_eq!(g.value(out), g.value(q));
    }

    #[test]
    fn permutation_equivariance() {
        let (store, p, mut rng) = setup(4, NormKind::Layer, 5);
        for _ in 0..30 {
            let n = rng.gen_range(2..=16);
            let q = random(&mut rng, n, 4);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let mut moved = Tensor::zeros(&[n, 4]);
            for i in 0..n {
                moved.data_mut()[perm[i] * 4..(perm[i] + 1) * 4].copy_from_slice(q.row(i));
            }
            let run = |t: &Tensor| {
                let mut g = Graph::new();
                let v = g.constant(t.clone());
                let (o, _) = semantic_layer(&mut g, &store, &p, v, 3, None).unwrap();
                g.value(o).clone()
            };
            let (a, b) = (run(&q), run(&moved));
            for i in 0..n {
                for c in 0..4 {
                    assert!((a.get(i, c) - b.get(perm[i], c)).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for norm in [NormKind::Layer, NormKind::Batch] {
            let (store, p, mut rng) = setup(3, norm, 6);
            let q0 = random(&mut rng, 5, 3);
            let w = random(&mut rng, 5, 3);
            let k = 2;
            let groups = {
                let mut g = Graph::new();
                let v = g.constant(q0.clone());
                semantic_layer(&mut g, &store, &p, v, k, None).unwrap().1
            };
            let eval = |x: &[f64], params: &ParamStore, want: bool| -> Result<(f64, Vec<f64>)> {
                let mut g = Graph::new();
                let qv = g.input(Tensor::new(&[5, 3], x.to_vec())?);
                let (o, _) = semantic_layer(&mut g, params, &p, qv, k, Some(&groups))?;
                let wv = g.constant(w.clone());
                let prod = g.mul(o, wv)?;
                let loss = g.sum_all(prod)?;
                let mut grad = Vec::new();
                if want {
                    let adj = g.backward(loss)?;
                    grad.extend_from_slice(adj.wrt(qv).unwrap());
                    let mut gp = params.zero_grads();
                    g.accumulate_param_grads(&adj, &mut gp);
                    grad.extend(gp.flatten());
                }
                Ok((g.value(loss).item(), grad))
            };
            let (_, analytic) = eval(q0.data(), &store, true).unwrap();
            let mut point = q0.data().to_vec();
            point.extend(store.flatten());
            let mut scratch = store.clone();
            let report = finite_diff_check(
                |z| {
                    scratch.unflatten(&z[15..])?;
                    Ok(eval(&z[..15], &scratch, false)?.0)
                },
                &point,
                &analytic,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{norm:?}: {report:?}");
        }
    }

    #[test]
    fn network_widths() {
        let (_, p, _) = setup(6, NormKind::Layer, 7);
        let first: &Linear = &p.edge.blocks[0].0;
        assert_eq!(first.d_in, 12);
        assert_eq!(p.integrate.d_out(), 6);
    }
}
