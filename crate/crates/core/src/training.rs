//! Patch-pair dataset construction, augmentation, the optimization loop,
//! and checkpoint plumbing. Seeded runs are bit-reproducible: shuffling,
//! augmentation, and gradient accumulation all follow fixed orders.

use std::error::Error;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    clip_global_norm, Adam, AdamConfig, DiffError, NodeId, ParamStore, Tape, Tensor,
};
use crate::geometry::{dist2, extract_patch, GeometryError};
use crate::iodata::{Checkpoint, IoError, OptimizerState};
use crate::losses::{emd_loss, emd_metric, prior_loss, total_loss, LossError};
use crate::model::{Model, ModelError, ModelOutput};
use crate::rng::{normal, random_rotation, rotate_point};
use crate::scalar::{real, Real};

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Loss(LossError),
    Diff(DiffError),
    Geometry(GeometryError),
    Io(IoError),
    Data { detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Diff(e) => write!(f, "{e}"),
            TrainError::Geometry(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "{e}"),
            TrainError::Data { detail } => write!(f, "training data: {detail}"),
        }
    }
}

impl Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Diff(e)
    }
}

impl From<GeometryError> for TrainError {
    fn from(e: GeometryError) -> Self {
        TrainError::Geometry(e)
    }
}

impl From<IoError> for TrainError {
    fn from(e: IoError) -> Self {
        TrainError::Io(e)
    }
}

/// Optimization settings; the network architecture lives in `ModelConfig`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Reconstruction weight.
    pub alpha: f64,
    /// Prior weight.
    pub beta: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Fraction of pairs held out for validation.
    pub val_fraction: f64,
    /// Jitter sigma applied to sparse patches (patch radius is 1).
    pub jitter_sigma: f64,
    pub augment_rotate: bool,
    pub augment_jitter: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            alpha: 1e-4,
            beta: 5e-2,
            clip_norm: 5.0,
            val_fraction: 0.1,
            jitter_sigma: 0.005,
            augment_rotate: true,
            augment_jitter: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Flat key/value snapshot for checkpoint config tables.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.lr".into(), format!("{:.16e}", self.learning_rate)),
            ("train.alpha".into(), format!("{:.16e}", self.alpha)),
            ("train.beta".into(), format!("{:.16e}", self.beta)),
            ("train.clip_norm".into(), format!("{:.16e}", self.clip_norm)),
            ("train.val_fraction".into(), format!("{:.16e}", self.val_fraction)),
            ("train.jitter_sigma".into(), format!("{:.16e}", self.jitter_sigma)),
            ("train.augment_rotate".into(), self.augment_rotate.to_string()),
            ("train.augment_jitter".into(), self.augment_jitter.to_string()),
            ("train.seed".into(), self.seed.to_string()),
        ]
    }
}

/// A sparse patch and its dense ground truth in one shared normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair<F> {
    pub sparse: Vec<[F; 3]>,
    pub dense: Vec<[F; 3]>,
    pub center: [F; 3],
    pub scale: F,
}

/// Indices of the `m` points of `cloud` nearest to `pos`.
fn nearest_to_point<F: Real>(
    cloud: &[[F; 3]],
    pos: &[F; 3],
    m: usize,
) -> Result<Vec<usize>, TrainError> {
    if m > cloud.len() {
        return Err(TrainError::Data {
            detail: format!("patch wants {m} points, cloud has {}", cloud.len()),
        });
    }
    let mut scratch: Vec<(F, usize)> = cloud
        .iter()
        .enumerate()
        .map(|(j, q)| (dist2(pos, q), j))
        .collect();
    let cmp = |a: &(F, usize), b: &(F, usize)| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    };
    if m < scratch.len() {
        scratch.select_nth_unstable_by(m - 1, cmp);
        scratch.truncate(m);
    }
    scratch.sort_unstable_by(cmp);
    Ok(scratch.into_iter().map(|(_, j)| j).collect())
}

/// Cuts `count` training pairs around random seed points of the sparse
/// cloud. The sparse patch is the `n` nearest sparse points; the dense patch
/// is the `n * ratio` nearest dense points around the same seed; both are
/// normalized by the sparse patch's frame.
pub fn build_patch_pairs<F: Real, R: Rng + ?Sized>(
    sparse_cloud: &[[F; 3]],
    dense_cloud: &[[F; 3]],
    count: usize,
    n: usize,
    ratio: usize,
    rng: &mut R,
) -> Result<Vec<PatchPair<F>>, TrainError> {
    if n > sparse_cloud.len() || n * ratio > dense_cloud.len() {
        return Err(TrainError::Data {
            detail: format!(
                "patch sizes {n}/{} exceed clouds of {}/{} points",
                n * ratio,
                sparse_cloud.len(),
                dense_cloud.len()
            ),
        });
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = rng.gen_range(0..sparse_cloud.len());
        let patch = extract_patch(sparse_cloud, seed, n)?;
        let pos = sparse_cloud[seed];
        let dense_idx = nearest_to_point(dense_cloud, &pos, n * ratio)?;
        let dense = dense_idx
            .into_iter()
            .map(|j| {
                let p = dense_cloud[j];
                [
                    (p[0] - patch.center[0]) / patch.scale,
                    (p[1] - patch.center[1]) / patch.scale,
                    (p[2] - patch.center[2]) / patch.scale,
                ]
            })
            .collect();
        pairs.push(PatchPair {
            sparse: patch.points,
            dense,
            center: patch.center,
            scale: patch.scale,
        });
    }
    Ok(pairs)
}

/// One identical random rotation for both patches, then Gaussian jitter on
/// the sparse patch only.
pub fn augment<F: Real, R: Rng + ?Sized>(
    pair: &PatchPair<F>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> PatchPair<F> {
    let mut out = pair.clone();
    if cfg.augment_rotate {
        let rot = random_rotation::<F, _>(rng);
        for p in out.sparse.iter_mut().chain(out.dense.iter_mut()) {
            *p = rotate_point(&rot, *p);
        }
    }
    if cfg.augment_jitter && cfg.jitter_sigma > 0.0 {
        let sigma = real::<F>(cfg.jitter_sigma);
        for p in &mut out.sparse {
            for c in p.iter_mut() {
                *c += sigma * normal::<F, _>(rng);
            }
        }
    }
    out
}

/// Records the loss for one pair and returns the tape, the loss node, and
/// the value-level (reconstruction, prior) components.
pub fn pair_loss<F: Real>(
    model: &Model<F>,
    pair: &PatchPair<F>,
    alpha: f64,
    beta: f64,
) -> Result<(Tape<F>, NodeId, f64, f64), TrainError> {
    let mut tape = Tape::new();
    let n = pair.sparse.len();
    let flat: Vec<F> = pair.sparse.iter().flatten().copied().collect();
    let points = tape.input(Tensor::from_vec(n, 3, flat)?)?;
    let ModelOutput { upsampled, log_prob } = model.upsample_on_tape(&mut tape, points, &pair.sparse)?;

    let m = pair.dense.len();
    let dense_flat: Vec<F> = pair.dense.iter().flatten().copied().collect();
    let dense = Tensor::from_vec(m, 3, dense_flat)?;
    let rec = emd_loss(&mut tape, upsampled, &dense)?;
    let prior = prior_loss(&mut tape, log_prob)?;
    let loss = total_loss(&mut tape, rec, prior, real::<F>(alpha), real::<F>(beta))?;
    let rec_v = tape.value(rec).item().to_f64().expect("finite loss");
    let prior_v = tape.value(prior).item().to_f64().expect("finite loss");
    Ok((tape, loss, rec_v, prior_v))
}

/// Per-epoch record. `seconds` is wall time and is reported to the caller
/// but excluded from [`EpochStats::log_line`] so logs stay reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub rec: f64,
    pub prior: f64,
    pub total: f64,
    pub val_emd: Option<f64>,
    pub seconds: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        let val = match self.val_emd {
            Some(v) => format!("{v:.9e}"),
            None => "none".to_string(),
        };
        format!(
            "epoch={} rec={:.9e} prior={:.9e} total={:.9e} val_emd={val}",
            self.epoch, self.rec, self.prior, self.total
        )
    }
}

/// Everything a finished run hands back: the per-epoch history and the
/// checkpoint of the best epoch by validation reconstruction (ties keep the
/// earlier epoch; with an empty validation split, the last epoch wins).
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub best: Checkpoint,
}

/// Snapshot of model, optimizer, and RNG position for saving.
pub fn snapshot<F: Real>(
    model: &Model<F>,
    adam: Option<&Adam<F>>,
    epoch: u64,
    rng: &ChaCha8Rng,
    extra_config: &[(String, String)],
) -> Checkpoint {
    let mut config = model.cfg.to_pairs();
    config.extend(extra_config.iter().cloned());
    let params = model
        .store
        .iter()
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.value.rows(),
                p.value.cols(),
                p.value
                    .data()
                    .iter()
                    .map(|v| v.to_f64().expect("finite parameter"))
                    .collect(),
            )
        })
        .collect();
    let optimizer = adam.map(|a| {
        let (m, v, step) = a.state();
        let flatten = |ts: &[Tensor<F>]| {
            ts.iter()
                .map(|t| {
                    t.data()
                        .iter()
                        .map(|x| x.to_f64().expect("finite moment"))
                        .collect()
                })
                .collect()
        };
        OptimizerState {
            step,
            m: flatten(m),
            v: flatten(v),
        }
    });
    Checkpoint {
        config,
        epoch,
        params,
        optimizer,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    }
}

/// Rebuilds a model from a checkpoint: architecture from the config table,
/// parameter values from the table, normalization marked initialized.
pub fn model_from_checkpoint<F: Real>(ckpt: &Checkpoint) -> Result<Model<F>, TrainError> {
    let cfg = crate::model::ModelConfig::from_pairs(&ckpt.config)?;
    let mut build_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg, &mut build_rng)?;
    if ckpt.params.len() != model.store.len() {
        return Err(TrainError::Data {
            detail: format!(
                "checkpoint has {} parameters, model wants {}",
                ckpt.params.len(),
                model.store.len()
            ),
        });
    }
    for (name, rows, cols, data) in &ckpt.params {
        let id = model.store.id(name).ok_or_else(|| TrainError::Data {
            detail: format!("checkpoint parameter {name} not in model"),
        })?;
        let current = model.store.value(id);
        if current.shape() != [*rows, *cols] {
            return Err(TrainError::Data {
                detail: format!(
                    "checkpoint parameter {name} is {rows}x{cols}, model wants {:?}",
                    current.shape()
                ),
            });
        }
        let values: Option<Vec<F>> = data.iter().map(|&v| F::from_f64(v)).collect();
        let values = values.ok_or_else(|| TrainError::Data {
            detail: format!("checkpoint parameter {name} has out-of-range values"),
        })?;
        *model.store.value_mut(id) = Tensor::from_vec(*rows, *cols, values)?;
    }
    model.set_actnorm_ready();
    Ok(model)
}

/// Rebuilds the optimizer (moments and step count) next to a restored model.
pub fn adam_from_checkpoint<F: Real>(
    ckpt: &Checkpoint,
    store: &ParamStore<F>,
    cfg: AdamConfig<F>,
) -> Result<Adam<F>, TrainError> {
    let mut adam = Adam::new(store, cfg);
    if let Some(opt) = &ckpt.optimizer {
        let rebuild = |flat: &[Vec<f64>]| -> Result<Vec<Tensor<F>>, TrainError> {
            store
                .iter()
                .zip(flat)
                .map(|((_, p), values)| {
                    let shaped: Option<Vec<F>> =
                        values.iter().map(|&v| F::from_f64(v)).collect();
                    let shaped = shaped.ok_or_else(|| TrainError::Data {
                        detail: format!("optimizer moment for {} out of range", p.name),
                    })?;
                    Ok(Tensor::from_vec(p.value.rows(), p.value.cols(), shaped)?)
                })
                .collect()
        };
        let m = rebuild(&opt.m)?;
        let v = rebuild(&opt.v)?;
        adam.restore(m, v, opt.step)?;
    }
    Ok(adam)
}

/// RNG positioned exactly where the checkpointed run left it.
pub fn rng_from_checkpoint(ckpt: &Checkpoint) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
    rng.set_word_pos(ckpt.rng_word_pos);
    rng
}

/// Runs the optimization loop. The model ends in its final state; the
/// returned report carries the best-epoch checkpoint. Normalization
/// statistics initialize from the first batch if not already set.
pub fn train<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    pairs: &[PatchPair<F>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Data {
            detail: "no training pairs".into(),
        });
    }
    let n_val = ((pairs.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(pairs.len().saturating_sub(1));
    let (train_pairs, val_pairs) = pairs.split_at(pairs.len() - n_val);

    let extra = cfg.to_pairs();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        // Fresh identity permutation each epoch: the shuffled order is then
        // a function of the RNG state alone, so a restored run replays it.
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut sum_rec = 0.0;
        let mut sum_prior = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PatchPair<F>> = chunk
                .iter()
                .map(|&i| augment(&train_pairs[i], cfg, rng))
                .collect();
            if !model.actnorm_ready() {
                let sparse: Vec<Vec<[F; 3]>> =
                    batch.iter().map(|p| p.sparse.clone()).collect();
                model.init_actnorm(&sparse)?;
            }
            model.store.zero_grads();
            for pair in &batch {
                let (tape, loss, rec_v, prior_v) =
                    pair_loss(model, pair, cfg.alpha, cfg.beta)?;
                let grads = tape.backward(loss)?;
                grads.accumulate_params(&tape, &mut model.store)?;
                sum_rec += rec_v;
                sum_prior += prior_v;
                seen += 1;
            }
            model
                .store
                .scale_grads(real::<F>(1.0 / batch.len() as f64));
            clip_global_norm(&mut model.store, real::<F>(cfg.clip_norm));
            adam.step(&mut model.store)?;
        }

        let rec = sum_rec / seen as f64;
        let prior = sum_prior / seen as f64;
        let total = cfg.alpha * rec + cfg.beta * prior;

        let val_emd = if val_pairs.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for pair in val_pairs {
                let out = model.upsample_patch(&pair.sparse)?;
                sum += emd_metric(&out, &pair.dense)?
                    .to_f64()
                    .expect("finite metric");
            }
            Some(sum / val_pairs.len() as f64)
        };

        let stats = EpochStats {
            epoch,
            rec,
            prior,
            total,
            val_emd,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);

        let improved = match (&best, val_emd) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(v)) => v < *b,
            (Some(_), None) => true,
            (Some((_, None, _)), Some(_)) => true,
        };
        if improved {
            best = Some((
                epoch,
                val_emd,
                snapshot(model, Some(adam), epoch as u64, rng, &extra),
            ));
        }
    }

    let (best_epoch, best_val, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        history,
        best_epoch,
        best_val,
        best,
    })
}
