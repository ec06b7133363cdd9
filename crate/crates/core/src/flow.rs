//! Invertible conditional flow between patch coordinates and a latent
//! Gaussian space. Each block applies, in order: a per-channel affine
//! normalization, an invertible 3x3 mixing, a condition-driven affine
//! injection, and a conditional affine coupling over a channel split.
//! Every piece has a closed-form inverse and a cheap log-determinant, so
//! densities are exact in both directions.

use rand::Rng;

use crate::diffcore::{
    DiffError, Mlp, NodeId, ParamId, ParamStore, Tape, Tensor,
};
use crate::rng::random_rotation;
use crate::scalar::{real, Real};

/// Architecture of the flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// Number of blocks; valid from 2 to 12.
    pub blocks: usize,
    /// Width of the per-block condition features.
    pub cond_width: usize,
    /// Hidden width of the scale/shift networks.
    pub hidden: usize,
    /// Soft clamp bound applied to every predicted log-scale.
    pub s_clamp: f64,
    /// Channels passed through unchanged by the coupling (out of 3).
    pub passthrough: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            blocks: 8,
            cond_width: 32,
            hidden: 64,
            s_clamp: 10.0,
            passthrough: 1,
        }
    }
}

/// How fresh parameters are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowInit {
    /// Random rotation mixing, zero-initialized final layers; normalization
    /// statistics await data-dependent initialization.
    Training,
    /// Every transform starts as the identity map.
    Identity,
}

/// Gaussian log density at the origin-centered unit normal, per point:
/// -0.5 * |z|^2 - (3/2) ln(2 pi).
pub const LOG_NORM_CONST_3D: f64 = -2.756_815_599_614_018_5;

struct FlowBlock {
    norm_mean: ParamId,
    norm_log_scale: ParamId,
    mix: ParamId,
    inj_scale: Mlp,
    inj_shift: Mlp,
    cpl_scale: Mlp,
    cpl_shift: Mlp,
}

/// The flow network. Parameters live in the shared store; this struct only
/// holds their handles plus the architecture.
pub struct FlowNet {
    cfg: FlowConfig,
    blocks: Vec<FlowBlock>,
}

impl FlowNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: FlowConfig,
        init: FlowInit,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if cfg.blocks < 2 || cfg.blocks > 12 {
            return Err(DiffError::ShapeMismatch {
                op: "flow_new",
                detail: format!("block count {} outside 2..=12", cfg.blocks),
            });
        }
        if cfg.passthrough == 0 || cfg.passthrough >= 3 {
            return Err(DiffError::ShapeMismatch {
                op: "flow_new",
                detail: format!("passthrough {} outside 1..=2", cfg.passthrough),
            });
        }
        let d = cfg.passthrough;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let prefix = format!("flow.block{l}");
            let norm_mean = store.add(&format!("{prefix}.norm.mean"), Tensor::zeros(1, 3))?;
            let norm_log_scale =
                store.add(&format!("{prefix}.norm.log_scale"), Tensor::zeros(1, 3))?;
            let mix_value = match init {
                FlowInit::Training => {
                    let rot: [[F; 3]; 3] = random_rotation(rng);
                    Tensor::from_vec(3, 3, rot.iter().flatten().copied().collect())?
                }
                FlowInit::Identity => Tensor::identity(3),
            };
            let mix = store.add(&format!("{prefix}.mix.w"), mix_value)?;
            let zero_final = true;
            let inj_scale = Mlp::new(
                store,
                &format!("{prefix}.inject.scale"),
                &[cfg.cond_width, cfg.hidden, cfg.hidden, 3],
                zero_final,
                rng,
            )?;
            let inj_shift = Mlp::new(
                store,
                &format!("{prefix}.inject.shift"),
                &[cfg.cond_width, cfg.hidden, cfg.hidden, 3],
                zero_final,
                rng,
            )?;
            let cpl_in = d + cfg.cond_width;
            let cpl_scale = Mlp::new(
                store,
                &format!("{prefix}.couple.scale"),
                &[cpl_in, cfg.hidden, cfg.hidden, 3 - d],
                zero_final,
                rng,
            )?;
            let cpl_shift = Mlp::new(
                store,
                &format!("{prefix}.couple.shift"),
                &[cpl_in, cfg.hidden, cfg.hidden, 3 - d],
                zero_final,
                rng,
            )?;
            blocks.push(FlowBlock {
                norm_mean,
                norm_log_scale,
                mix,
                inj_scale,
                inj_shift,
                cpl_scale,
                cpl_shift,
            });
        }
        Ok(FlowNet { cfg, blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    /// Handles of the per-block normalization parameters, for
    /// data-dependent initialization.
    pub fn norm_params(&self, block: usize) -> (ParamId, ParamId) {
        (self.blocks[block].norm_mean, self.blocks[block].norm_log_scale)
    }

    /// Soft clamp keeping log-scales inside (-s_clamp, s_clamp).
    fn clamp_log_scale<F: Real>(
        &self,
        tape: &mut Tape<F>,
        raw: NodeId,
    ) -> Result<NodeId, DiffError> {
        let bound = real::<F>(self.cfg.s_clamp);
        let shrunk = tape.scale(raw, F::one() / bound)?;
        let squashed = tape.tanh(shrunk)?;
        tape.scale(squashed, bound)
    }

    /// One block of the forward (coordinates to latent) direction.
    /// Returns the transformed rows and the per-row log-determinant.
    pub fn forward_block<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        block: usize,
        h: NodeId,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId), DiffError> {
        let blk = &self.blocks[block];
        let n = tape.value(h).rows();
        let d = self.cfg.passthrough;

        // Per-channel normalization: (h - mean) * exp(-log_scale).
        let mean = tape.param(store, blk.norm_mean)?;
        let log_scale = tape.param(store, blk.norm_log_scale)?;
        let mean_b = tape.broadcast_row(mean, n)?;
        let centered = tape.sub(h, mean_b)?;
        let neg_ls = tape.scale(log_scale, -F::one())?;
        let inv_scale = tape.exp(neg_ls)?;
        let inv_scale_b = tape.broadcast_row(inv_scale, n)?;
        let h = tape.mul(centered, inv_scale_b)?;
        let ls_sum = tape.sum(log_scale)?;
        let ld_norm_scalar = tape.scale(ls_sum, -F::one())?;
        let mut log_det = tape.broadcast_row(ld_norm_scalar, n)?;

        // Invertible mixing: h @ W^T.
        let w = tape.param(store, blk.mix)?;
        let w_t = tape.transpose(w)?;
        let h = tape.matmul(h, w_t)?;
        let ld_mix = tape.log_abs_det(w)?;
        let ld_mix_b = tape.broadcast_row(ld_mix, n)?;
        log_det = tape.add(log_det, ld_mix_b)?;

        // Condition-driven affine injection: h * exp(s) + b.
        let s_raw = blk.inj_scale.forward(tape, store, cond)?;
        let s = self.clamp_log_scale(tape, s_raw)?;
        let b = blk.inj_shift.forward(tape, store, cond)?;
        let es = tape.exp(s)?;
        let scaled = tape.mul(h, es)?;
        let h = tape.add(scaled, b)?;
        let ld_inj = tape.row_sum(s)?;
        log_det = tape.add(log_det, ld_inj)?;

        // Conditional coupling over the channel split [0, d) | [d, 3).
        let h1 = tape.slice_cols(h, 0, d)?;
        let h2 = tape.slice_cols(h, d, 3 - d)?;
        let net_in = tape.concat_cols(&[h1, cond])?;
        let s_raw = blk.cpl_scale.forward(tape, store, net_in)?;
        let s = self.clamp_log_scale(tape, s_raw)?;
        let b = blk.cpl_shift.forward(tape, store, net_in)?;
        let es = tape.exp(s)?;
        let scaled = tape.mul(h2, es)?;
        let h2 = tape.add(scaled, b)?;
        let h = tape.concat_cols(&[h1, h2])?;
        let ld_cpl = tape.row_sum(s)?;
        log_det = tape.add(log_det, ld_cpl)?;

        Ok((h, log_det))
    }

    fn inverse_block<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        block: usize,
        y: NodeId,
        cond: NodeId,
    ) -> Result<NodeId, DiffError> {
        let blk = &self.blocks[block];
        let n = tape.value(y).rows();
        let d = self.cfg.passthrough;

        // Coupling inverse: the passthrough channels drive the nets.
        let y1 = tape.slice_cols(y, 0, d)?;
        let y2 = tape.slice_cols(y, d, 3 - d)?;
        let net_in = tape.concat_cols(&[y1, cond])?;
        let s_raw = blk.cpl_scale.forward(tape, store, net_in)?;
        let s = self.clamp_log_scale(tape, s_raw)?;
        let b = blk.cpl_shift.forward(tape, store, net_in)?;
        let shifted = tape.sub(y2, b)?;
        let neg_s = tape.scale(s, -F::one())?;
        let es = tape.exp(neg_s)?;
        let h2 = tape.mul(shifted, es)?;
        let y = tape.concat_cols(&[y1, h2])?;

        // Injection inverse.
        let s_raw = blk.inj_scale.forward(tape, store, cond)?;
        let s = self.clamp_log_scale(tape, s_raw)?;
        let b = blk.inj_shift.forward(tape, store, cond)?;
        let shifted = tape.sub(y, b)?;
        let neg_s = tape.scale(s, -F::one())?;
        let es = tape.exp(neg_s)?;
        let y = tape.mul(shifted, es)?;

        // Mixing inverse: y @ (W^-1)^T.
        let w = tape.param(store, blk.mix)?;
        let w_inv = tape.mat_inv(w)?;
        let w_inv_t = tape.transpose(w_inv)?;
        let y = tape.matmul(y, w_inv_t)?;

        // Normalization inverse: y * exp(log_scale) + mean.
        let mean = tape.param(store, blk.norm_mean)?;
        let log_scale = tape.param(store, blk.norm_log_scale)?;
        let ls_exp = tape.exp(log_scale)?;
        let ls_b = tape.broadcast_row(ls_exp, n)?;
        let scaled = tape.mul(y, ls_b)?;
        let mean_b = tape.broadcast_row(mean, n)?;
        tape.add(scaled, mean_b)
    }

    /// Maps Nx3 coordinates to latent rows. `cond` holds one NxC condition
    /// per block. Returns the latent node and the per-row log-determinant of
    /// the full map.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: NodeId,
        cond: &[NodeId],
    ) -> Result<FlowPass, DiffError> {
        self.check_cond("flow_forward", tape, x, cond)?;
        let mut h = x;
        let mut total: Option<NodeId> = None;
        for (l, &c) in cond.iter().enumerate() {
            let (next, ld) = self.forward_block(tape, store, l, h, c)?;
            h = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld)?,
                None => ld,
            });
        }
        Ok(FlowPass {
            z: h,
            log_det: total.expect("at least two blocks"),
        })
    }

    /// Exact inverse of [`forward`]: latent rows back to coordinates. The
    /// condition stack must already be aligned with the latent rows (use
    /// gathered conditions when rows were multiplied).
    pub fn inverse<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        z: NodeId,
        cond: &[NodeId],
    ) -> Result<NodeId, DiffError> {
        self.check_cond("flow_inverse", tape, z, cond)?;
        let mut h = z;
        for (l, &c) in cond.iter().enumerate().rev() {
            h = self.inverse_block(tape, store, l, h, c)?;
        }
        Ok(h)
    }

    /// Per-row log density of the latent rows under the standard normal,
    /// plus the change of variables: Nx1.
    pub fn log_prob<F: Real>(
        &self,
        tape: &mut Tape<F>,
        pass: &FlowPass,
    ) -> Result<NodeId, DiffError> {
        let sq = tape.mul(pass.z, pass.z)?;
        let sq_norm = tape.row_sum(sq)?;
        let half_neg = tape.scale(sq_norm, real::<F>(-0.5))?;
        let base = tape.add_scalar(half_neg, real::<F>(LOG_NORM_CONST_3D))?;
        tape.add(base, pass.log_det)
    }

    fn check_cond<F: Real>(
        &self,
        op: &'static str,
        tape: &Tape<F>,
        x: NodeId,
        cond: &[NodeId],
    ) -> Result<(), DiffError> {
        if cond.len() != self.cfg.blocks {
            return Err(DiffError::ShapeMismatch {
                op,
                detail: format!(
                    "expected {} condition tensors, got {}",
                    self.cfg.blocks,
                    cond.len()
                ),
            });
        }
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != 3 {
            return Err(DiffError::ShapeMismatch {
                op,
                detail: format!("points must be Nx3, got {:?}", tape.value(x).shape()),
            });
        }
        for (l, &c) in cond.iter().enumerate() {
            let shape = tape.value(c).shape();
            if shape != [rows, self.cfg.cond_width] {
                return Err(DiffError::ShapeMismatch {
                    op,
                    detail: format!(
                        "condition {l} has shape {shape:?}, expected [{rows}, {}]",
                        self.cfg.cond_width
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Forward pass outputs: the latent rows and the per-row log-determinant.
pub struct FlowPass {
    pub z: NodeId,
    pub log_det: NodeId,
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::diffcore::check_gradient;

    use super::*;

    fn small_cfg() -> FlowConfig {
        FlowConfig {
            blocks: 3,
            cond_width: 4,
            hidden: 6,
            s_clamp: 10.0,
            passthrough: 1,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Gives every parameter a nontrivial value so tests exercise real
    /// transforms rather than identity maps.
    fn randomize_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amount: f64) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v += rng.gen_range(-amount..amount);
            }
        }
    }

    fn build(
        rng: &mut ChaCha8Rng,
        cfg: FlowConfig,
        randomize: f64,
    ) -> (ParamStore<f64>, FlowNet) {
        let mut store = ParamStore::new();
        let net = FlowNet::new(&mut store, cfg, FlowInit::Training, rng).unwrap();
        if randomize > 0.0 {
            randomize_params(&mut store, rng, randomize);
        }
        (store, net)
    }

    fn conditions(
        tape: &mut Tape<f64>,
        rng: &mut ChaCha8Rng,
        n: usize,
        cfg: &FlowConfig,
    ) -> Vec<NodeId> {
        (0..cfg.blocks)
            .map(|_| tape.input(rand_tensor(rng, n, cfg.cond_width)).unwrap())
            .collect()
    }

    #[test]
    fn identity_init_is_the_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut store = ParamStore::<f64>::new();
        let net = FlowNet::new(&mut store, small_cfg(), FlowInit::Identity, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x_t = rand_tensor(&mut rng, 5, 3);
        let x = tape.input(x_t.clone()).unwrap();
        let cond = conditions(&mut tape, &mut rng, 5, net.config());
        let pass = net.forward(&mut tape, &store, x, &cond).unwrap();
        assert_eq!(tape.value(pass.z).data(), x_t.data());
        assert!(tape.value(pass.log_det).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_undoes_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for trial in 0..5 {
            let (store, net) = build(&mut rng, small_cfg(), 0.3);
            let mut tape = Tape::new();
            let x_t = rand_tensor(&mut rng, 8, 3);
            let x = tape.input(x_t.clone()).unwrap();
            let cond = conditions(&mut tape, &mut rng, 8, net.config());
            let pass = net.forward(&mut tape, &store, x, &cond).unwrap();
            let back = net.inverse(&mut tape, &store, pass.z, &cond).unwrap();
            for (a, b) in tape.value(back).data().iter().zip(x_t.data()) {
                assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_log_det_matches_numerical_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..5 {
            let (store, net) = build(&mut rng, small_cfg(), 0.3);
            let n = 4;
            let x_t = rand_tensor(&mut rng, n, 3);
            let cond_t: Vec<Tensor<f64>> = (0..net.config().blocks)
                .map(|_| rand_tensor(&mut rng, n, net.config().cond_width))
                .collect();

            let run = |pts: &Tensor<f64>| -> (Tensor<f64>, Tensor<f64>) {
                let mut tape = Tape::new();
                let x = tape.input(pts.clone()).unwrap();
                let cond: Vec<NodeId> = cond_t
                    .iter()
                    .map(|c| tape.input(c.clone()).unwrap())
                    .collect();
                let pass = net.forward(&mut tape, &store, x, &cond).unwrap();
                (tape.value(pass.z).clone(), tape.value(pass.log_det).clone())
            };
            let (_, log_det) = run(&x_t);

            // Numerical 3x3 Jacobian per point; rows are independent.
            let h = 1e-6;
            for i in 0..n {
                let mut jac = Tensor::<f64>::zeros(3, 3);
                for c in 0..3 {
                    let mut up = x_t.clone();
                    up.set(i, c, x_t.at(i, c) + h);
                    let mut down = x_t.clone();
                    down.set(i, c, x_t.at(i, c) - h);
                    let (zu, _) = run(&up);
                    let (zd, _) = run(&down);
                    for r in 0..3 {
                        jac.set(r, c, (zu.at(i, r) - zd.at(i, r)) / (2.0 * h));
                    }
                }
                let (_, det) = jac.invert_square().unwrap();
                let expect = det.abs().ln();
                let got = log_det.at(i, 0);
                let rel = (got - expect).abs() / (expect.abs() + 1e-8);
                assert!(rel < 1e-5, "point {i}: log det {got} vs numeric {expect}");
            }
        }
    }

    #[test]
    fn log_prob_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let (store, net) = build(&mut rng, small_cfg(), 0.2);
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor(&mut rng, 6, 3)).unwrap();
        let cond = conditions(&mut tape, &mut rng, 6, net.config());
        let pass = net.forward(&mut tape, &store, x, &cond).unwrap();
        let lp = net.log_prob(&mut tape, &pass).unwrap();
        let z = tape.value(pass.z).clone();
        let ld = tape.value(pass.log_det).clone();
        for i in 0..6 {
            let row = z.row(i);
            let sq: f64 = row.iter().map(|v| v * v).sum();
            let expect = -0.5 * sq + LOG_NORM_CONST_3D + ld.at(i, 0);
            assert!((tape.value(lp).at(i, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_log_density_constant_is_correct() {
        let expect = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((LOG_NORM_CONST_3D - expect).abs() < 1e-15);
    }

    #[test]
    fn flow_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let cfg = FlowConfig {
            blocks: 2,
            cond_width: 3,
            hidden: 4,
            s_clamp: 10.0,
            passthrough: 1,
        };
        let (store, net) = build(&mut rng, cfg, 0.2);
        let x_t = rand_tensor(&mut rng, 4, 3);
        let cond_t: Vec<Tensor<f64>> = (0..cfg.blocks)
            .map(|_| rand_tensor(&mut rng, 4, cfg.cond_width))
            .collect();

        let eval = |store: &ParamStore<f64>| -> (f64, Tape<f64>, NodeId) {
            let mut tape = Tape::new();
            let x = tape.input(x_t.clone()).unwrap();
            let cond: Vec<NodeId> = cond_t
                .iter()
                .map(|c| tape.input(c.clone()).unwrap())
                .collect();
            let pass = net.forward(&mut tape, store, x, &cond).unwrap();
            let lp = net.log_prob(&mut tape, &pass).unwrap();
            let loss = tape.mean(lp).unwrap();
            (tape.value(loss).item(), tape, loss)
        };

        // Analytic gradients for every parameter in one backward pass.
        let mut probe = store.clone();
        {
            let (_, tape, loss) = eval(&store);
            let grads = tape.backward(loss).unwrap();
            probe.zero_grads();
            grads.accumulate_params(&tape, &mut probe).unwrap();
        }

        // Check a few structurally different parameters against central
        // differences of the scalar loss.
        for name in [
            "flow.block0.mix.w",
            "flow.block0.norm.log_scale",
            "flow.block1.couple.scale.layer0.w",
            "flow.block1.inject.shift.layer2.b",
        ] {
            let pid = store.id(name).unwrap();
            let analytic = probe.grad(pid).clone();
            let point = store.value(pid).clone();
            let mut f = |cand: &Tensor<f64>| {
                let mut s = store.clone();
                *s.value_mut(pid) = cand.clone();
                Ok(eval(&s).0)
            };
            let err = check_gradient(&mut f, &point, &analytic, 1e-6).unwrap();
            assert!(err < 1e-5, "{name}: grad err {err}");
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = small_cfg();
        cfg.blocks = 1;
        assert!(FlowNet::new(&mut store, cfg, FlowInit::Identity, &mut rng).is_err());
        let mut cfg = small_cfg();
        cfg.blocks = 13;
        assert!(FlowNet::new(&mut store, cfg, FlowInit::Identity, &mut rng).is_err());
        let mut cfg = small_cfg();
        cfg.passthrough = 0;
        assert!(FlowNet::new(&mut store, cfg, FlowInit::Identity, &mut rng).is_err());
    }
}
