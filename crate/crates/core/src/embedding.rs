//! Hierarchical per-point condition features. A chain of local graph units
//! refines point features over a fixed coordinate-space neighbor graph; one
//! head per flow block projects the running features to the condition width.
//! Receptive fields grow by one hop per unit, so deeper blocks see wider
//! context while everything stays permutation equivariant.

use rand::Rng;

use crate::diffcore::{
    DiffError, InitMode, LayerNorm, Linear, NodeId, ParamStore, Tape, LEAKY_SLOPE,
};
use crate::geometry::KnnGraph;
use crate::scalar::{real, Real};

/// Widths and depths of the embedding stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    /// Number of units and heads; matches the flow block count.
    pub blocks: usize,
    /// Neighbors per point in the fixed coordinate graph (self included).
    pub k: usize,
    /// Densely connected growth stages per unit.
    pub grow_stages: usize,
    /// Channels added by each growth stage.
    pub growth: usize,
    /// Width of the per-unit output features.
    pub unit_width: usize,
    /// Width of the per-block condition features.
    pub cond_width: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            blocks: 8,
            k: 16,
            grow_stages: 4,
            growth: 8,
            unit_width: 24,
            cond_width: 32,
        }
    }
}

/// Index list mapping edge slot `i*k + j` to its center point `i`.
pub(crate) fn edge_center_index(n: usize, k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * k);
    for i in 0..n {
        idx.extend(std::iter::repeat(i).take(k));
    }
    idx
}

/// One local graph unit: edge features [center, neighbor - center] pass
/// through densely connected stages and a fuse layer, then max-pool back to
/// one feature row per point.
#[derive(Debug, Clone)]
pub struct EdgeConvUnit {
    stages: Vec<(Linear, LayerNorm)>,
    fuse: (Linear, LayerNorm),
    out_width: usize,
}

impl EdgeConvUnit {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        c_in: usize,
        grow_stages: usize,
        growth: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let mut width = 2 * c_in;
        let mut stages = Vec::with_capacity(grow_stages);
        for t in 0..grow_stages {
            let lin = Linear::new(
                store,
                &format!("{prefix}.grow{t}"),
                width,
                growth,
                InitMode::He,
                rng,
            )?;
            let norm = LayerNorm::new(store, &format!("{prefix}.grow{t}.norm"), growth)?;
            stages.push((lin, norm));
            width += growth;
        }
        let fuse_lin = Linear::new(
            store,
            &format!("{prefix}.fuse"),
            width,
            out_width,
            InitMode::He,
            rng,
        )?;
        let fuse_norm = LayerNorm::new(store, &format!("{prefix}.fuse.norm"), out_width)?;
        Ok(EdgeConvUnit {
            stages,
            fuse: (fuse_lin, fuse_norm),
            out_width,
        })
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    /// `feats` is NxC over the points of `graph`; output is Nxout_width.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        feats: NodeId,
        graph: &KnnGraph,
    ) -> Result<NodeId, DiffError> {
        let n = tape.value(feats).rows();
        debug_assert_eq!(n, graph.len(), "graph and features disagree on N");
        let centers = tape.gather_rows(feats, &edge_center_index(n, graph.k))?;
        let nbrs = tape.gather_rows(feats, graph.flat())?;
        let rel = tape.sub(nbrs, centers)?;
        let slope = real::<F>(LEAKY_SLOPE);
        let mut h = tape.concat_cols(&[centers, rel])?;
        for (lin, norm) in &self.stages {
            let y = lin.forward(tape, store, h)?;
            let y = norm.forward(tape, store, y)?;
            let y = tape.leaky_relu(y, slope)?;
            h = tape.concat_cols(&[h, y])?;
        }
        let y = self.fuse.0.forward(tape, store, h)?;
        let y = self.fuse.1.forward(tape, store, y)?;
        let y = tape.leaky_relu(y, slope)?;
        tape.segment_max(y, graph.k)
    }
}

/// The full condition extractor: a chain of units plus per-block heads.
#[derive(Debug, Clone)]
pub struct EmbedNet {
    cfg: EmbedConfig,
    units: Vec<EdgeConvUnit>,
    heads: Vec<Linear>,
}

impl EmbedNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: EmbedConfig,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let mut units = Vec::with_capacity(cfg.blocks);
        let mut heads = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let c_in = if l == 0 { 3 } else { cfg.unit_width };
            units.push(EdgeConvUnit::new(
                store,
                &format!("embed.unit{l}"),
                c_in,
                cfg.grow_stages,
                cfg.growth,
                cfg.unit_width,
                rng,
            )?);
            heads.push(Linear::new(
                store,
                &format!("embed.head{l}"),
                cfg.unit_width,
                cfg.cond_width,
                InitMode::He,
                rng,
            )?);
        }
        Ok(EmbedNet { cfg, units, heads })
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.cfg
    }

    /// Condition features for every block, shallowest first.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        points: NodeId,
        graph: &KnnGraph,
    ) -> Result<Vec<NodeId>, DiffError> {
        let mut conditions = Vec::with_capacity(self.cfg.blocks);
        let mut feats = points;
        for (unit, head) in self.units.iter().zip(&self.heads) {
            feats = unit.forward(tape, store, feats, graph)?;
            conditions.push(head.forward(tape, store, feats)?);
        }
        Ok(conditions)
    }
}

/// Condition stack for the no-embedding ablation: raw coordinates tiled to
/// the condition width, shared by every block.
pub fn tiled_condition<F: Real>(
    tape: &mut Tape<F>,
    points: NodeId,
    cond_width: usize,
    blocks: usize,
) -> Result<Vec<NodeId>, DiffError> {
    let full = cond_width / 3;
    let rem = cond_width % 3;
    let mut parts = vec![points; full];
    if rem > 0 {
        parts.push(tape.slice_cols(points, 0, rem)?);
    }
    let tiled = tape.concat_cols(&parts)?;
    Ok(vec![tiled; blocks])
}
