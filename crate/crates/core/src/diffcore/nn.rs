use rand::Rng;

use crate::rng::normal;
use crate::scalar::{real, Real};

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::{DiffError, Tensor};

/// Weight initialization for a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// He-style normal init scaled by sqrt(2 / fan_in); zero bias.
    He,
    /// Zero weights and bias. Used for final layers so fresh networks start
    /// as identity-like maps.
    Zero,
}

/// Slope shared by every hidden activation in the toolkit.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Affine layer `x @ W + b` with `W` stored as fan_in x fan_out.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        init: InitMode,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let w = match init {
            InitMode::He => {
                let scale = real::<F>((2.0 / fan_in as f64).sqrt());
                let data = (0..fan_in * fan_out)
                    .map(|_| normal::<F, _>(rng) * scale)
                    .collect();
                Tensor::from_vec(fan_in, fan_out, data)?
            }
            InitMode::Zero => Tensor::zeros(fan_in, fan_out),
        };
        let w = store.add(&format!("{prefix}.w"), w)?;
        let b = store.add(&format!("{prefix}.b"), Tensor::zeros(1, fan_out))?;
        Ok(Linear { w, b })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId, DiffError> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let y = tape.matmul(x, w)?;
        let rows = tape.value(y).rows();
        let b_rows = tape.broadcast_row(b, rows)?;
        tape.add(y, b_rows)
    }
}

/// Stack of linear layers with leaky ReLU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. `[33, 64, 64, 2]`.
    /// With `final_zero` the last layer starts at zero so the whole net
    /// initially outputs zeros.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dims: &[usize],
        final_zero: bool,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if dims.len() < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_new",
                detail: format!("need at least input and output widths, got {dims:?}"),
            });
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let last = i == dims.len() - 2;
            let init = if last && final_zero {
                InitMode::Zero
            } else {
                InitMode::He
            };
            layers.push(Linear::new(
                store,
                &format!("{prefix}.layer{i}"),
                pair[0],
                pair[1],
                init,
                rng,
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId, DiffError> {
        let slope = real::<F>(LEAKY_SLOPE);
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, slope)?;
            }
        }
        Ok(h)
    }
}

/// Row-wise layer normalization with learned per-channel gain and shift,
/// composed from tape primitives.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        width: usize,
    ) -> Result<Self, DiffError> {
        let gain = store.add(&format!("{prefix}.gain"), Tensor::full(1, width, F::one()))?;
        let shift = store.add(&format!("{prefix}.shift"), Tensor::zeros(1, width))?;
        Ok(LayerNorm { gain, shift })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId, DiffError> {
        let cols = tape.value(x).cols();
        let inv_c = F::one() / real::<F>(cols as f64);
        let row_sum = tape.row_sum(x)?;
        let mean = tape.scale(row_sum, inv_c)?;
        let mean_b = tape.broadcast_col(mean, cols)?;
        let centered = tape.sub(x, mean_b)?;
        let sq = tape.mul(centered, centered)?;
        let var_sum = tape.row_sum(sq)?;
        let var = tape.scale(var_sum, inv_c)?;
        let var_eps = tape.add_scalar(var, real::<F>(1e-6))?;
        let log_var = tape.ln(var_eps)?;
        let neg_half_log = tape.scale(log_var, real::<F>(-0.5))?;
        let rstd = tape.exp(neg_half_log)?;
        let rstd_b = tape.broadcast_col(rstd, cols)?;
        let normed = tape.mul(centered, rstd_b)?;
        let rows = tape.value(x).rows();
        let gain = tape.param(store, self.gain)?;
        let gain_b = tape.broadcast_row(gain, rows)?;
        let shift = tape.param(store, self.shift)?;
        let shift_b = tape.broadcast_row(shift, rows)?;
        let scaled = tape.mul(normed, gain_b)?;
        tape.add(scaled, shift_b)
    }
}
