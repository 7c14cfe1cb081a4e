//! The topology-aware gated scan block and the graph aggregation block.

mod gia;
mod ta_mamba;

pub use gia::{aggregate_values, gia_forward, gia_isolated_node, neighbor_aggregate, GiaBlock, GIA_EPSILON};
pub use ta_mamba::{ta_mamba_forward, Affine, BlockDims, Branch, ScanningStrategy, TaMambaBlock};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::graph::{invert_permutation, WsiGraph};
    use crate::numerics::{check_gradients, sigmoid, Tape, Tensor, DEFAULT_STEP};
    use crate::params::{Bound, ParamStore};
    use crate::ssm::bi_ssm;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: BlockDims = BlockDims {
        model_dim: 4,
        inner_dim: 8,
        heads: 2,
        state_dim: 3,
    };

    fn block(seed: u64, strategy: ScanningStrategy) -> (ParamStore, TaMambaBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = TaMambaBlock::init(&mut store, "blk", DIMS, strategy, false, &mut rng).unwrap();
        // non-trivial Δ projections and norm affine
        for br in &b.branches {
            for ssm in std::iter::once(&br.fwd).chain(br.bwd.as_ref()) {
                *store.get_mut(ssm.w_dt) = Tensor::randn(&[8, 2], &mut rng).map(|v| 0.3 * v);
            }
        }
        *store.get_mut(b.gamma) = Tensor::uniform(&[8], 0.5, 1.5, &mut rng);
        *store.get_mut(b.beta) = Tensor::randn(&[8], &mut rng);
        (store, b)
    }

    fn random_orders(m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        (0..4)
            .map(|_| {
                let mut o: Vec<usize> = (0..m).collect();
                o.shuffle(rng);
                o
            })
            .collect()
    }

    fn forward(store: &ParamStore, b: &TaMambaBlock, x: &Tensor, orders: &[Vec<usize>]) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = ta_mamba_forward(&mut tape, &p, b, xv, orders).unwrap();
        tape.value(y).clone()
    }

    fn affine(store: &ParamStore, a: &Affine, x: &Tensor) -> Tensor {
        let (w, b) = (store.get(a.w), store.get(a.b));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|i| {
                (0..dout)
                    .map(|j| b.data()[j] + (0..din).map(|k| x.get2(i, k) * w.get2(k, j)).sum::<f64>())
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn bi_ssm_value(store: &ParamStore, br: &Branch, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bi_ssm(&mut tape, &p, &br.fwd, br.bwd.as_ref().unwrap(), xv).unwrap();
        tape.value(y).clone()
    }

    fn gather(x: &Tensor, order: &[usize]) -> Tensor {
        Tensor::from_rows(&order.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Gate, normalise with the block's affine, project out.
    fn finish(store: &ParamStore, b: &TaMambaBlock, zbar: &Tensor, fused: &Tensor) -> Tensor {
        let (g, be) = (store.get(b.gamma).data(), store.get(b.beta).data());
        let rows: Vec<Vec<f64>> = (0..fused.rows())
            .map(|i| {
                let v: Vec<f64> = (0..8)
                    .map(|k| {
                        let z = zbar.get2(i, k);
                        z * sigmoid(z) * fused.get2(i, k)
                    })
                    .collect();
                let mean = v.iter().sum::<f64>() / 8.0;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
                (0..8)
                    .map(|k| (v[k] - mean) / (var + 1e-5).sqrt() * g[k] + be[k])
                    .collect()
            })
            .collect();
        affine(store, &b.proj_out, &Tensor::from_rows(&rows).unwrap())
    }

    #[test]
    fn compositional_oracle_six_instances() {
        let (store, b) = block(1, ScanningStrategy::TopologyAware);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 4], &mut rng);
        let orders = random_orders(6, &mut rng);
        let xbar = affine(&store, &b.proj_x, &x);
        let zbar = affine(&store, &b.proj_z, &x);
        let mut fused = Tensor::zeros(&[6, 8]);
        for (br, order) in b.branches.iter().zip(&orders) {
            let y = bi_ssm_value(&store, br, &gather(&xbar, order));
            let back = gather(&y, &invert_permutation(order).unwrap());
            fused
                .data_mut()
                .iter_mut()
                .zip(back.data())
                .for_each(|(f, v)| *f += 0.25 * v);
        }
        let expected = finish(&store, &b, &zbar, &fused);
        assert!(forward(&store, &b, &x, &orders).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn identity_orders_with_tied_branches_reduce_to_single_path() {
        let (store, mut b) = block(2, ScanningStrategy::TopologyAware);
        let first = b.branches[0].clone();
        for br in b.branches.iter_mut().skip(1) {
            *br = first.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let id: Vec<usize> = (0..5).collect();
        let y4 = forward(&store, &b, &x, &vec![id.clone(); 4]);
        let xbar = affine(&store, &b.proj_x, &x);
        let zbar = affine(&store, &b.proj_z, &x);
        let single = bi_ssm_value(&store, &first, &xbar);
        assert!(y4.max_abs_diff(&finish(&store, &b, &zbar, &single)) < 1e-12);
    }

    #[test]
    fn closed_gate_yields_projected_beta() {
        let (mut store, b) = block(3, ScanningStrategy::TopologyAware);
        *store.get_mut(b.proj_z.w) = Tensor::zeros(&[4, 8]);
        *store.get_mut(b.proj_z.b) = Tensor::zeros(&[8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 4], &mut rng);
        let y = forward(&store, &b, &x, &random_orders(4, &mut rng));
        let beta = Tensor::new(vec![1, 8], store.get(b.beta).data().to_vec()).unwrap();
        let expected = affine(&store, &b.proj_out, &beta);
        for i in 0..4 {
            for (a, e) in y.row(i).iter().zip(expected.row(0)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unidirectional_block_has_one_forward_branch() {
        let (store, b) = block(4, ScanningStrategy::Unidirectional);
        assert_eq!(b.branches.len(), 1);
        assert!(b.branches[0].bwd.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let y = forward(&store, &b, &x, &[vec![0, 1, 2]]);
        assert!(y.is_finite());
    }

    #[test]
    fn mismatched_order_length_is_a_dimension_error() {
        let (store, b) = block(5, ScanningStrategy::TopologyAware);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let orders = vec![vec![0, 1, 2], vec![0, 1, 2], vec![0, 1], vec![0, 1, 2]];
        assert!(matches!(
            ta_mamba_forward(&mut tape, &p, &b, x, &orders),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn residual_flag_adds_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let plain =
            TaMambaBlock::init(&mut store, "b", DIMS, ScanningStrategy::Bidirectional, false, &mut rng).unwrap();
        let mut with_res = plain.clone();
        with_res.residual = true;
        let x = Tensor::randn(&[4, 4], &mut rng);
        let id = vec![(0..4).collect::<Vec<_>>()];
        let a = forward(&store, &plain, &x, &id);
        let b = forward(&store, &with_res, &x, &id);
        for k in 0..16 {
            assert!((b.data()[k] - a.data()[k] - x.data()[k]).abs() < 1e-14);
        }
    }

    fn grad_inputs(store: &ParamStore, x: &Tensor) -> Vec<Tensor> {
        std::iter::once(x.clone())
            .chain(store.values().iter().cloned())
            .collect()
    }

    #[test]
    fn ta_mamba_gradient_matches_differences() {
        let (store, b) = block(7, ScanningStrategy::TopologyAware);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let orders = random_orders(5, &mut rng);
        let w = Tensor::randn(&[5, 4], &mut rng);
        let r = check_gradients(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = ta_mamba_forward(t, &p, &b, v[0], &orders)?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &grad_inputs(&store, &x),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn layer_norm_direction_ignores_positive_gate_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Tensor::randn(&[3, 6], &mut rng);
        let run = |scale: f64| {
            let mut t = Tape::new();
            let x = t.constant(v.map(|a| a * scale));
            let g = t.constant(Tensor::full(&[6], 1.0));
            let b = t.constant(Tensor::zeros(&[6]));
            let y = t.layer_norm(x, g, b, 1e-12).unwrap();
            t.value(y).clone()
        };
        for s in [0.01, 0.5, 3.0, 250.0] {
            assert!(run(1.0).max_abs_diff(&run(s)) < 1e-6);
        }
    }

    fn gia(seed: u64) -> (ParamStore, GiaBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = GiaBlock::init(&mut store, "gia", 4, &mut rng);
        (store, b)
    }

    fn gia_value(store: &ParamStore, b: &GiaBlock, x: &Tensor, g: &WsiGraph) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = gia_forward(&mut tape, &p, b, xv, g).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn gia_epsilon_is_fixed() {
        let (_, b) = gia(0);
        assert_eq!(b.epsilon, 1e-7);
        assert_eq!(GIA_EPSILON, 1e-7);
    }

    #[test]
    fn gia_single_bag_is_mlp_of_input() {
        let (store, b) = gia(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 4], &mut rng);
        let g = WsiGraph::from_edges(1, []).unwrap();
        let y = gia_value(&store, &b, &x, &g);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let iso = gia_isolated_node(&mut tape, &p, &b, xv).unwrap();
        assert_eq!(&y, tape.value(iso));
    }

    #[test]
    fn disconnected_node_matches_isolated_update() {
        let (store, b) = gia(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 4], &mut rng);
        let g = WsiGraph::from_edges(4, [(0, 1, 0.1), (1, 2, 0.1)]).unwrap();
        let y = gia_value(&store, &b, &x, &g);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(Tensor::new(vec![1, 4], x.row(3).to_vec()).unwrap());
        let iso = gia_isolated_node(&mut tape, &p, &b, xv).unwrap();
        assert_eq!(y.row(3), tape.value(iso).data());
    }

    #[test]
    fn gia_is_equivariant_under_relabeling() {
        let (store, b) = gia(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[6, 4], &mut rng);
        let edges = [(0, 1), (0, 2), (2, 3), (3, 4), (4, 5), (1, 5), (2, 5)];
        let g = WsiGraph::from_edges(6, edges.iter().map(|&(a, c)| (a, c, 0.5))).unwrap();
        let mut relabel: Vec<usize> = (0..6).collect();
        relabel.shuffle(&mut rng);
        // node i becomes relabel[i]
        let inv = invert_permutation(&relabel).unwrap();
        let x2 = gather(&x, &inv);
        let g2 = WsiGraph::from_edges(6, edges.iter().map(|&(a, c)| (relabel[a], relabel[c], 0.5))).unwrap();
        let y = gia_value(&store, &b, &x, &g);
        let y2 = gather(&gia_value(&store, &b, &x2, &g2), &relabel);
        assert!(y.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn gia_gradient_matches_differences() {
        let (store, b) = gia(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[5, 4], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let g = WsiGraph::from_edges(5, [(0, 1, 0.1), (0, 2, 0.2), (2, 3, 0.3), (1, 3, 0.1)]).unwrap();
        let w = Tensor::randn(&[5, 4], &mut rng);
        let r = check_gradients(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = gia_forward(t, &p, &b, v[0], &g)?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &grad_inputs(&store, &x),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
