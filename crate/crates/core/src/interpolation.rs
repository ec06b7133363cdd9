//! Learned convex interpolation over a fixed neighbor graph. For every
//! point and every replica the network predicts a softmax weighting of the
//! point's k nearest neighbors; applying those weights to latent rows yields
//! upsampled latents that stay inside the convex hull of their neighborhood.
//! The weight net starts at zero, so initial weights are exactly uniform.

use rand::Rng;

use crate::diffcore::{DiffError, Mlp, NodeId, ParamStore, Tape, Tensor};
use crate::embedding::{edge_center_index, EdgeConvUnit};
use crate::geometry::KnnGraph;
use crate::scalar::Real;

/// Architecture of the interpolation network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpConfig {
    /// Neighbors blended per upsampled row (self included).
    pub k: usize,
    /// Replicas generated per input point.
    pub ratio: usize,
    /// Output width of each of the two context units.
    pub unit_width: usize,
    /// Hidden width of the weight net.
    pub hidden: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            k: 16,
            ratio: 4,
            unit_width: 16,
            hidden: 128,
        }
    }
}

/// Weight predictor plus the gather/blend machinery.
pub struct InterpNet {
    cfg: InterpConfig,
    unit0: EdgeConvUnit,
    unit1: EdgeConvUnit,
    weight_net: Mlp,
}

impl InterpNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: InterpConfig,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if cfg.ratio < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "interp_new",
                detail: format!("ratio {} below 2", cfg.ratio),
            });
        }
        if cfg.k < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "interp_new",
                detail: format!("k {} below 2", cfg.k),
            });
        }
        let w = cfg.unit_width;
        let unit0 = EdgeConvUnit::new(store, "interp.unit0", 3, 1, w, w, rng)?;
        let unit1 = EdgeConvUnit::new(store, "interp.unit1", w, 2, w, w, rng)?;
        let context_width = 2 * w;
        let weight_net = Mlp::new(
            store,
            "interp.weights",
            &[cfg.k * context_width, cfg.hidden, cfg.ratio * cfg.k],
            true,
            rng,
        )?;
        Ok(InterpNet {
            cfg,
            unit0,
            unit1,
            weight_net,
        })
    }

    pub fn config(&self) -> &InterpConfig {
        &self.cfg
    }

    /// Maps upsampled row `i * ratio + r` back to its source point `i`.
    pub fn source_map(&self, n: usize) -> Vec<usize> {
        let mut map = Vec::with_capacity(n * self.cfg.ratio);
        for i in 0..n {
            map.extend(std::iter::repeat(i).take(self.cfg.ratio));
        }
        map
    }

    /// Convex blend weights for every upsampled row: (N*ratio) x k rows of a
    /// softmax, one per replica. The net sees, per point, its own context
    /// feature followed by each neighbor's feature relative to it.
    pub fn weights<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        points: NodeId,
        graph: &KnnGraph,
    ) -> Result<NodeId, DiffError> {
        let n = tape.value(points).rows();
        if graph.k != self.cfg.k {
            return Err(DiffError::ShapeMismatch {
                op: "interp_weights",
                detail: format!("graph has k {}, config wants {}", graph.k, self.cfg.k),
            });
        }
        let s0 = self.unit0.forward(tape, store, points, graph)?;
        let s1 = self.unit1.forward(tape, store, s0, graph)?;
        let s = tape.concat_cols(&[s0, s1])?;
        let c = tape.value(s).cols();

        // Edge features: self feature at slot 0, neighbor - self elsewhere.
        // The self slot of `rel` is exactly zero, so adding the masked
        // centers restores the absolute feature only there.
        let centers = tape.gather_rows(s, &edge_center_index(n, graph.k))?;
        let nbrs = tape.gather_rows(s, graph.flat())?;
        let rel = tape.sub(nbrs, centers)?;
        let mut mask = Tensor::zeros(n * graph.k, c);
        for i in 0..n {
            for j in 0..c {
                mask.set(i * graph.k, j, F::one());
            }
        }
        let mask = tape.input(mask)?;
        let self_only = tape.mul(centers, mask)?;
        let feat = tape.add(rel, self_only)?;

        let stacked = tape.reshape(feat, n, graph.k * c)?;
        let logits = self.weight_net.forward(tape, store, stacked)?;
        let per_replica = tape.reshape(logits, n * self.cfg.ratio, self.cfg.k)?;
        tape.softmax_rows(per_replica)
    }

    /// Blends `rows` (N x C, aligned with the graph) into (N*ratio) x C
    /// upsampled rows using precomputed weights.
    pub fn interpolate<F: Real>(
        &self,
        tape: &mut Tape<F>,
        weights: NodeId,
        rows: NodeId,
        graph: &KnnGraph,
    ) -> Result<NodeId, DiffError> {
        let n = tape.value(rows).rows();
        let c = tape.value(rows).cols();
        let r = self.cfg.ratio;
        let k = self.cfg.k;
        if tape.value(weights).shape() != [n * r, k] {
            return Err(DiffError::ShapeMismatch {
                op: "interp_apply",
                detail: format!(
                    "weights shape {:?} does not match {} rows at ratio {r}",
                    tape.value(weights).shape(),
                    n
                ),
            });
        }
        // Neighbor index for flattened slot (i*r + rep)*k + j.
        let mut idx = Vec::with_capacity(n * r * k);
        for i in 0..n {
            for _ in 0..r {
                idx.extend_from_slice(graph.row(i));
            }
        }
        let gathered = tape.gather_rows(rows, &idx)?;
        let w_flat = tape.reshape(weights, n * r * k, 1)?;
        let w_wide = tape.broadcast_col(w_flat, c)?;
        let weighted = tape.mul(gathered, w_wide)?;
        tape.segment_sum(weighted, k)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::diffcore::check_gradient;
    use crate::geometry::knn_graph;

    use super::*;

    fn small_cfg() -> InterpConfig {
        InterpConfig {
            k: 4,
            ratio: 3,
            unit_width: 5,
            hidden: 8,
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn to_tensor(points: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_vec(points.len(), 3, points.iter().flatten().copied().collect()).unwrap()
    }

    fn randomize_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.4..0.4);
            }
        }
    }

    #[test]
    fn weights_start_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut store = ParamStore::<f64>::new();
        let cfg = small_cfg();
        let net = InterpNet::new(&mut store, cfg, &mut rng).unwrap();
        let points = random_cloud(&mut rng, 9);
        let graph = knn_graph(&points, cfg.k).unwrap();
        let mut tape = Tape::new();
        let p = tape.input(to_tensor(&points)).unwrap();
        let w = net.weights(&mut tape, &store, p, &graph).unwrap();
        let t = tape.value(w);
        assert_eq!(t.shape(), [9 * cfg.ratio, cfg.k]);
        for v in t.data() {
            assert!((v - 1.0 / cfg.k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_are_convex_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut store = ParamStore::<f64>::new();
        let cfg = small_cfg();
        let net = InterpNet::new(&mut store, cfg, &mut rng).unwrap();
        randomize_params(&mut store, &mut rng);
        let points = random_cloud(&mut rng, 11);
        let graph = knn_graph(&points, cfg.k).unwrap();
        let mut tape = Tape::new();
        let p = tape.input(to_tensor(&points)).unwrap();
        let w = net.weights(&mut tape, &store, p, &graph).unwrap();
        let t = tape.value(w);
        let mut spread = 0.0f64;
        for i in 0..t.rows() {
            let row = t.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            assert!(row.iter().all(|&v| v >= 0.0));
            spread = spread.max(row.iter().cloned().fold(0.0, f64::max) - row[0]);
        }
        assert!(spread > 1e-4, "randomized net should not stay uniform");
    }

    #[test]
    fn interpolation_matches_naive_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut store = ParamStore::<f64>::new();
        let cfg = small_cfg();
        let net = InterpNet::new(&mut store, cfg, &mut rng).unwrap();
        randomize_params(&mut store, &mut rng);
        let points = random_cloud(&mut rng, 8);
        let graph = knn_graph(&points, cfg.k).unwrap();
        let latent_t = {
            let data = (0..8 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::<f64>::from_vec(8, 3, data).unwrap()
        };
        let mut tape = Tape::new();
        let p = tape.input(to_tensor(&points)).unwrap();
        let z = tape.input(latent_t.clone()).unwrap();
        let w = net.weights(&mut tape, &store, p, &graph).unwrap();
        let out = net.interpolate(&mut tape, w, z, &graph).unwrap();
        let w_t = tape.value(w).clone();
        let out_t = tape.value(out).clone();
        assert_eq!(out_t.shape(), [8 * cfg.ratio, 3]);
        for i in 0..8 {
            for rep in 0..cfg.ratio {
                let row = i * cfg.ratio + rep;
                for c in 0..3 {
                    let mut expect = 0.0;
                    for (j, &nbr) in graph.row(i).iter().enumerate() {
                        expect += w_t.at(row, j) * latent_t.at(nbr, c);
                    }
                    let got = out_t.at(row, c);
                    assert!(
                        (got - expect).abs() < 1e-12,
                        "row {row} col {c}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn source_map_repeats_each_point_ratio_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let mut store = ParamStore::<f64>::new();
        let net = InterpNet::new(&mut store, small_cfg(), &mut rng).unwrap();
        assert_eq!(net.source_map(3), vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let mut store = ParamStore::<f64>::new();
        let cfg = InterpConfig {
            k: 3,
            ratio: 2,
            unit_width: 3,
            hidden: 4,
        };
        let net = InterpNet::new(&mut store, cfg, &mut rng).unwrap();
        randomize_params(&mut store, &mut rng);
        let points = random_cloud(&mut rng, 5);
        let graph = knn_graph(&points, cfg.k).unwrap();
        let latent_t = {
            let data = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::<f64>::from_vec(5, 3, data).unwrap()
        };
        let probe_t = {
            let data = (0..5 * cfg.ratio * 3)
                .map(|_| rng.gen_range(0.5..1.5))
                .collect();
            Tensor::<f64>::from_vec(5 * cfg.ratio, 3, data).unwrap()
        };

        let eval = |store: &ParamStore<f64>,
                    latent: &Tensor<f64>|
         -> (f64, Tape<f64>, NodeId, NodeId) {
            let mut tape = Tape::new();
            let p = tape.input(to_tensor(&points)).unwrap();
            let z = tape.input(latent.clone()).unwrap();
            let w = net.weights(&mut tape, &store, p, &graph).unwrap();
            let out = net.interpolate(&mut tape, w, z, &graph).unwrap();
            let probe = tape.input(probe_t.clone()).unwrap();
            let prod = tape.mul(out, probe).unwrap();
            let loss = tape.sum(prod).unwrap();
            (tape.value(loss).item(), tape, loss, z)
        };

        // Latent input gradient.
        let (_, tape, loss, z_node) = eval(&store, &latent_t);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.node(z_node).unwrap().clone();
        let mut f = |t: &Tensor<f64>| Ok(eval(&store, t).0);
        let err = check_gradient(&mut f, &latent_t, &analytic, 1e-6).unwrap();
        assert!(err < 1e-5, "latent grad err {err}");

        // Weight-net parameter gradient. A larger step keeps roundoff from
        // dominating coordinates whose true derivative is tiny.
        let pid = store.id("interp.weights.layer0.w").unwrap();
        let mut probe_store = store.clone();
        probe_store.zero_grads();
        grads.accumulate_params(&tape, &mut probe_store).unwrap();
        let analytic = probe_store.grad(pid).clone();
        let point = store.value(pid).clone();
        let mut f = |cand: &Tensor<f64>| {
            let mut s = store.clone();
            *s.value_mut(pid) = cand.clone();
            Ok(eval(&s, &latent_t).0)
        };
        let err = check_gradient(&mut f, &point, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "param grad err {err}");
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = small_cfg();
        cfg.ratio = 1;
        assert!(InterpNet::new(&mut store, cfg, &mut rng).is_err());
        let mut cfg = small_cfg();
        cfg.k = 1;
        assert!(InterpNet::new(&mut store, cfg, &mut rng).is_err());
    }
}
