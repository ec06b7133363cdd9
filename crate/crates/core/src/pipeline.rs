//! Whole-cloud inference: farthest-point seeds, overlapping patch
//! extraction, per-patch upsampling, union merge, and a final
//! farthest-point reduction to exactly `ratio * input` points.

use std::error::Error;
use std::fmt;

use rand::Rng;

use crate::geometry::{extract_patch, farthest_point_sample, mean_nn_distance, GeometryError};
use crate::model::Model;
use crate::rng::normal;
use crate::scalar::{real, Real};

#[derive(Debug)]
pub enum PipelineError {
    Config { detail: String },
    Geometry(GeometryError),
    /// Failure inside one patch, tagged with its seed position.
    Patch { index: usize, detail: String },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config { detail } => write!(f, "pipeline config: {detail}"),
            PipelineError::Geometry(e) => write!(f, "{e}"),
            PipelineError::Patch { index, detail } => write!(f, "patch {index}: {detail}"),
        }
    }
}

impl Error for PipelineError {}

impl From<GeometryError> for PipelineError {
    fn from(e: GeometryError) -> Self {
        PipelineError::Geometry(e)
    }
}

/// Whole-cloud settings. `coverage` scales how many overlapping patches are
/// cut: `ceil(coverage * |input| / patch_size)` seeds. It must be at least 1
/// so the merged pool is never smaller than the requested output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub coverage: f64,
    /// Worker threads for the patch map; 1 runs serially.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_size: 64,
            coverage: 3.0,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    fn validate(&self, input_len: usize) -> Result<(), PipelineError> {
        if self.patch_size == 0 || self.patch_size > input_len {
            return Err(PipelineError::Config {
                detail: format!(
                    "patch size {} outside 1..={input_len}",
                    self.patch_size
                ),
            });
        }
        if !(self.coverage >= 1.0) {
            return Err(PipelineError::Config {
                detail: format!("coverage {} must be at least 1", self.coverage),
            });
        }
        if self.jobs == 0 {
            return Err(PipelineError::Config {
                detail: "jobs must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Upsamples one already-extracted patch and maps it back to world
/// coordinates. `index` tags errors with the seed's position in the run.
fn run_patch<F: Real>(
    model: &Model<F>,
    input: &[[F; 3]],
    seed: usize,
    patch_size: usize,
    index: usize,
) -> Result<Vec<[F; 3]>, PipelineError> {
    let patch = extract_patch(input, seed, patch_size).map_err(|e| PipelineError::Patch {
        index,
        detail: e.to_string(),
    })?;
    let local = model
        .upsample_patch(&patch.points)
        .map_err(|e| PipelineError::Patch {
            index,
            detail: e.to_string(),
        })?;
    Ok(patch.denormalize(&local))
}

/// Upsamples a whole cloud to exactly `model.ratio() * input.len()` points.
/// Seeds are farthest-point samples of the input; each seed's neighborhood
/// is normalized, pushed through the model, denormalized, and merged; the
/// union is reduced by farthest-point sampling. Output depends only on the
/// model, the input, and the RNG draws, not on `jobs`.
pub fn upsample_cloud<F: Real, R: Rng + ?Sized>(
    model: &Model<F>,
    input: &[[F; 3]],
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<Vec<[F; 3]>, PipelineError> {
    cfg.validate(input.len())?;
    let n = input.len();
    let want = model.ratio() * n;
    let seed_count = ((cfg.coverage * n as f64) / cfg.patch_size as f64).ceil() as usize;
    let seed_count = seed_count.clamp(1, n);
    let start = rng.gen_range(0..n);
    let seeds = farthest_point_sample(input, seed_count, start)?;

    let patches: Vec<Vec<[F; 3]>> = if cfg.jobs <= 1 || seeds.len() <= 1 {
        seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| run_patch(model, input, s, cfg.patch_size, i))
            .collect::<Result<_, _>>()?
    } else {
        let chunk = seeds.len().div_ceil(cfg.jobs);
        let outputs: Vec<Result<Vec<Vec<[F; 3]>>, PipelineError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = seeds
                    .chunks(chunk)
                    .enumerate()
                    .map(|(ci, part)| {
                        scope.spawn(move || {
                            part.iter()
                                .enumerate()
                                .map(|(j, &s)| {
                                    run_patch(model, input, s, cfg.patch_size, ci * chunk + j)
                                })
                                .collect()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("patch worker panicked"))
                    .collect()
            });
        let mut ordered = Vec::with_capacity(seeds.len());
        for group in outputs {
            ordered.extend(group?);
        }
        ordered
    };

    let merged: Vec<[F; 3]> = patches.into_iter().flatten().collect();
    debug_assert!(merged.len() >= want);
    let keep = farthest_point_sample(&merged, want, rng.gen_range(0..merged.len()))?;
    Ok(keep.into_iter().map(|i| merged[i]).collect())
}

/// Reference output for quality comparisons: each input point duplicated
/// `ratio` times with Gaussian jitter of sigma = half the mean
/// nearest-neighbor distance.
pub fn jitter_baseline<F: Real, R: Rng + ?Sized>(
    input: &[[F; 3]],
    ratio: usize,
    rng: &mut R,
) -> Result<Vec<[F; 3]>, PipelineError> {
    if ratio < 2 {
        return Err(PipelineError::Config {
            detail: format!("ratio {ratio} must be at least 2"),
        });
    }
    let sigma = mean_nn_distance(input)? * real::<F>(0.5);
    let mut out = Vec::with_capacity(input.len() * ratio);
    for p in input {
        for _ in 0..ratio {
            out.push([
                p[0] + sigma * normal::<F, _>(rng),
                p[1] + sigma * normal::<F, _>(rng),
                p[2] + sigma * normal::<F, _>(rng),
            ]);
        }
    }
    Ok(out)
}
