//! The assembled upsampler: condition extractor, invertible flow, and
//! convex latent interpolation behind one parameter store. A patch runs
//! sparse points -> latent rows -> blended latent rows -> inverse flow,
//! with conditions computed once and shared by both flow directions.

use std::error::Error;
use std::fmt;

use rand::Rng;

use crate::diffcore::{DiffError, NodeId, ParamStore, Tape, Tensor};
use crate::embedding::{tiled_condition, EmbedConfig, EmbedNet};
use crate::flow::{FlowConfig, FlowInit, FlowNet};
use crate::geometry::{knn_graph, GeometryError};
use crate::interpolation::{InterpConfig, InterpNet};
use crate::scalar::{real, Real};

#[derive(Debug)]
pub enum ModelError {
    Config { detail: String },
    Geometry(GeometryError),
    Diff(DiffError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config { detail } => write!(f, "model config: {detail}"),
            ModelError::Geometry(e) => write!(f, "{e}"),
            ModelError::Diff(e) => write!(f, "{e}"),
        }
    }
}

impl Error for ModelError {}

impl From<GeometryError> for ModelError {
    fn from(e: GeometryError) -> Self {
        ModelError::Geometry(e)
    }
}

impl From<DiffError> for ModelError {
    fn from(e: DiffError) -> Self {
        ModelError::Diff(e)
    }
}

/// Which pieces of the full pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Learned conditions, interpolation in latent space.
    Full,
    /// Conditions are raw coordinates tiled to width; no learned embedding.
    NoEmbedding,
    /// Interpolation happens directly on coordinates; the inverse flow is
    /// skipped and the flow trains only through the prior term.
    CoordinateInterpolation,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEmbedding => "no_embedding",
            Variant::CoordinateInterpolation => "coordinate_interpolation",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Variant> {
        match tag {
            "full" => Some(Variant::Full),
            "no_embedding" => Some(Variant::NoEmbedding),
            "coordinate_interpolation" => Some(Variant::CoordinateInterpolation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    pub embed: EmbedConfig,
    pub interp: InterpConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            flow: FlowConfig::default(),
            embed: EmbedConfig::default(),
            interp: InterpConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Flat key/value snapshot, the inverse of [`ModelConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        let mut push = |k: &str, v: String| p.push((k.to_string(), v));
        push("variant", self.variant.tag().to_string());
        push("flow.blocks", self.flow.blocks.to_string());
        push("flow.cond_width", self.flow.cond_width.to_string());
        push("flow.hidden", self.flow.hidden.to_string());
        push("flow.s_clamp", format!("{:.16e}", self.flow.s_clamp));
        push("flow.passthrough", self.flow.passthrough.to_string());
        push("embed.k", self.embed.k.to_string());
        push("embed.grow_stages", self.embed.grow_stages.to_string());
        push("embed.growth", self.embed.growth.to_string());
        push("embed.unit_width", self.embed.unit_width.to_string());
        push("interp.k", self.interp.k.to_string());
        push("interp.ratio", self.interp.ratio.to_string());
        push("interp.unit_width", self.interp.unit_width.to_string());
        push("interp.hidden", self.interp.hidden.to_string());
        p
    }

    /// Rebuilds a config from the pairs written by [`ModelConfig::to_pairs`].
    /// Unknown keys are ignored so run settings can share the table.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig, ModelError> {
        let mut cfg = ModelConfig::default();
        let bad = |key: &str, value: &str| ModelError::Config {
            detail: format!("bad value {value:?} for {key}"),
        };
        for (key, value) in pairs {
            match key.as_str() {
                "variant" => {
                    cfg.variant =
                        Variant::from_tag(value).ok_or_else(|| bad(key, value))?;
                }
                "flow.blocks" => cfg.flow.blocks = value.parse().map_err(|_| bad(key, value))?,
                "flow.cond_width" => {
                    cfg.flow.cond_width = value.parse().map_err(|_| bad(key, value))?
                }
                "flow.hidden" => cfg.flow.hidden = value.parse().map_err(|_| bad(key, value))?,
                "flow.s_clamp" => cfg.flow.s_clamp = value.parse().map_err(|_| bad(key, value))?,
                "flow.passthrough" => {
                    cfg.flow.passthrough = value.parse().map_err(|_| bad(key, value))?
                }
                "embed.k" => cfg.embed.k = value.parse().map_err(|_| bad(key, value))?,
                "embed.grow_stages" => {
                    cfg.embed.grow_stages = value.parse().map_err(|_| bad(key, value))?
                }
                "embed.growth" => cfg.embed.growth = value.parse().map_err(|_| bad(key, value))?,
                "embed.unit_width" => {
                    cfg.embed.unit_width = value.parse().map_err(|_| bad(key, value))?
                }
                "interp.k" => cfg.interp.k = value.parse().map_err(|_| bad(key, value))?,
                "interp.ratio" => cfg.interp.ratio = value.parse().map_err(|_| bad(key, value))?,
                "interp.unit_width" => {
                    cfg.interp.unit_width = value.parse().map_err(|_| bad(key, value))?
                }
                "interp.hidden" => {
                    cfg.interp.hidden = value.parse().map_err(|_| bad(key, value))?
                }
                _ => {}
            }
        }
        // The embedding mirrors the flow's block layout.
        cfg.embed.blocks = cfg.flow.blocks;
        cfg.embed.cond_width = cfg.flow.cond_width;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.variant != Variant::NoEmbedding {
            if self.embed.blocks != self.flow.blocks {
                return Err(ModelError::Config {
                    detail: format!(
                        "embedding has {} blocks, flow has {}",
                        self.embed.blocks, self.flow.blocks
                    ),
                });
            }
            if self.embed.cond_width != self.flow.cond_width {
                return Err(ModelError::Config {
                    detail: format!(
                        "embedding condition width {} does not match flow {}",
                        self.embed.cond_width, self.flow.cond_width
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Tape nodes produced by one upsampling pass.
pub struct ModelOutput {
    /// Upsampled coordinates, (N*ratio) x 3, row i*ratio+r from source i.
    pub upsampled: NodeId,
    /// Per-point log density of the sparse patch under the flow, N x 1.
    pub log_prob: NodeId,
}

pub struct Model<F: Real> {
    pub store: ParamStore<F>,
    pub cfg: ModelConfig,
    pub flow: FlowNet,
    pub embed: Option<EmbedNet>,
    pub interp: InterpNet,
    actnorm_ready: bool,
}

impl<F: Real> Model<F> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let embed = if cfg.variant == Variant::NoEmbedding {
            None
        } else {
            Some(EmbedNet::new(&mut store, cfg.embed, rng)?)
        };
        let flow = FlowNet::new(&mut store, cfg.flow, FlowInit::Training, rng)?;
        let interp = InterpNet::new(&mut store, cfg.interp, rng)?;
        Ok(Model {
            store,
            cfg,
            flow,
            embed,
            interp,
            actnorm_ready: false,
        })
    }

    pub fn ratio(&self) -> usize {
        self.cfg.interp.ratio
    }

    pub fn actnorm_ready(&self) -> bool {
        self.actnorm_ready
    }

    /// Marks normalization statistics as already initialized, e.g. after
    /// loading trained parameters.
    pub fn set_actnorm_ready(&mut self) {
        self.actnorm_ready = true;
    }

    /// Condition stack for a patch, one node per flow block.
    pub fn conditions(
        &self,
        tape: &mut Tape<F>,
        points_node: NodeId,
        points: &[[F; 3]],
    ) -> Result<Vec<NodeId>, ModelError> {
        match &self.embed {
            Some(net) => {
                let graph = knn_graph(points, self.cfg.embed.k)?;
                Ok(net.forward(tape, &self.store, points_node, &graph)?)
            }
            None => Ok(tiled_condition(
                tape,
                points_node,
                self.cfg.flow.cond_width,
                self.cfg.flow.blocks,
            )?),
        }
    }

    /// Records the full upsampling pass for one normalized patch. `points`
    /// must hold the same coordinates as `points_node`; the neighbor graphs
    /// are built from it outside the tape.
    pub fn upsample_on_tape(
        &self,
        tape: &mut Tape<F>,
        points_node: NodeId,
        points: &[[F; 3]],
    ) -> Result<ModelOutput, ModelError> {
        let cond = self.conditions(tape, points_node, points)?;
        let pass = self.flow.forward(tape, &self.store, points_node, &cond)?;
        let log_prob = self.flow.log_prob(tape, &pass)?;

        let interp_graph = knn_graph(points, self.cfg.interp.k)?;
        let weights = self
            .interp
            .weights(tape, &self.store, points_node, &interp_graph)?;

        let upsampled = match self.cfg.variant {
            Variant::CoordinateInterpolation => {
                self.interp
                    .interpolate(tape, weights, points_node, &interp_graph)?
            }
            _ => {
                let blended = self
                    .interp
                    .interpolate(tape, weights, pass.z, &interp_graph)?;
                let source_map = self.interp.source_map(points.len());
                let mut cond_up = Vec::with_capacity(cond.len());
                for &c in &cond {
                    cond_up.push(tape.gather_rows(c, &source_map)?);
                }
                self.flow.inverse(tape, &self.store, blended, &cond_up)?
            }
        };
        Ok(ModelOutput { upsampled, log_prob })
    }

    /// Value-level upsampling of one normalized patch.
    pub fn upsample_patch(&self, points: &[[F; 3]]) -> Result<Vec<[F; 3]>, ModelError> {
        let mut tape = Tape::new();
        let n = points.len();
        let flat: Vec<F> = points.iter().flatten().copied().collect();
        let node = tape.input(Tensor::from_vec(n, 3, flat)?)?;
        let out = self.upsample_on_tape(&mut tape, node, points)?;
        let t = tape.value(out.upsampled);
        Ok((0..t.rows())
            .map(|i| [t.at(i, 0), t.at(i, 1), t.at(i, 2)])
            .collect())
    }

    /// Data-dependent initialization of every block's normalization layer
    /// from a batch of patches: block by block, the statistics of the
    /// incoming features set mean and log-scale so the normalized output has
    /// per-channel zero mean and unit variance over the batch. One-time
    /// mutation; evaluations may not run concurrently with it.
    pub fn init_actnorm(&mut self, batch: &[Vec<[F; 3]>]) -> Result<(), ModelError> {
        if self.actnorm_ready {
            return Ok(());
        }
        if batch.is_empty() {
            return Err(ModelError::Config {
                detail: "normalization init needs a nonempty batch".into(),
            });
        }
        // Conditions depend only on coordinates, so compute their values once.
        let mut conds: Vec<Vec<Tensor<F>>> = Vec::with_capacity(batch.len());
        let mut states: Vec<Tensor<F>> = Vec::with_capacity(batch.len());
        for points in batch {
            let mut tape = Tape::new();
            let flat: Vec<F> = points.iter().flatten().copied().collect();
            let node = tape.input(Tensor::from_vec(points.len(), 3, flat)?)?;
            let cond = self.conditions(&mut tape, node, points)?;
            conds.push(cond.iter().map(|&c| tape.value(c).clone()).collect());
            states.push(tape.value(node).clone());
        }

        for block in 0..self.cfg.flow.blocks {
            // Per-channel statistics of this block's input across the batch.
            let mut count = 0.0f64;
            let mut mean = [0.0f64; 3];
            for h in &states {
                for i in 0..h.rows() {
                    for c in 0..3 {
                        mean[c] += h.at(i, c).to_f64().expect("finite");
                    }
                }
                count += h.rows() as f64;
            }
            for m in &mut mean {
                *m /= count;
            }
            let mut var = [0.0f64; 3];
            for h in &states {
                for i in 0..h.rows() {
                    for c in 0..3 {
                        let d = h.at(i, c).to_f64().expect("finite") - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            let (mean_id, log_scale_id) = self.flow.norm_params(block);
            for c in 0..3 {
                let std = (var[c] / count).sqrt().max(1e-6);
                self.store.value_mut(mean_id).set(0, c, real::<F>(mean[c]));
                self.store
                    .value_mut(log_scale_id)
                    .set(0, c, real::<F>(std.ln()));
            }

            // Push every patch through the now-initialized block.
            for (h, cond) in states.iter_mut().zip(&conds) {
                let mut tape = Tape::new();
                let node = tape.input(h.clone())?;
                let c = tape.input(cond[block].clone())?;
                let (next, _) = self
                    .flow
                    .forward_block(&mut tape, &self.store, block, node, c)?;
                *h = tape.value(next).clone();
            }
        }
        self.actnorm_ready = true;
        Ok(())
    }
}
