//! Training losses and evaluation metrics. The reconstruction loss is a
//! matched (transport) distance whose gradient treats the assignment as
//! locally constant; the prior loss is the negative mean log-density of the
//! latent points. Metrics operate on plain point sets.

mod assignment;
mod metrics;

pub use assignment::{auction, hungarian, Assignment};
pub use metrics::{
    chamfer_distance, closest_point_on_triangle, hausdorff_distance, jsd_voxel,
    point_to_surface_distance, JSD_GRID,
};

use std::fmt;

use crate::diffcore::{DiffError, NodeId, Tape, Tensor};
use crate::geometry::dist2;
use crate::scalar::{real, Real};

/// Instances larger than this use the auction solver; smaller ones get the
/// exact Hungarian solve.
pub const AUCTION_THRESHOLD: usize = 2048;

/// Relative cost gap accepted from the auction solver.
pub const AUCTION_REL_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    NotSquare { op: &'static str, rows: usize, cols: usize },
    NonFiniteCost { op: &'static str },
    SizeMismatch { op: &'static str, a: usize, b: usize },
    Empty { op: &'static str },
    Diff(DiffError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NotSquare { op, rows, cols } => {
                write!(f, "{op}: cost matrix must be square, got {rows}x{cols}")
            }
            LossError::NonFiniteCost { op } => write!(f, "{op}: non-finite cost entry"),
            LossError::SizeMismatch { op, a, b } => {
                write!(f, "{op}: point sets differ in size, {a} vs {b}")
            }
            LossError::Empty { op } => write!(f, "{op}: empty point set"),
            LossError::Diff(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<DiffError> for LossError {
    fn from(e: DiffError) -> Self {
        LossError::Diff(e)
    }
}

/// Minimum-cost matching between two equal-size point sets under unsquared
/// Euclidean cost. Dispatches to the exact solver up to
/// [`AUCTION_THRESHOLD`] points and the auction solver beyond.
pub fn match_points<F: Real>(
    a: &[[F; 3]],
    b: &[[F; 3]],
) -> Result<Assignment<F>, LossError> {
    if a.is_empty() || b.is_empty() {
        return Err(LossError::Empty { op: "match_points" });
    }
    if a.len() != b.len() {
        return Err(LossError::SizeMismatch {
            op: "match_points",
            a: a.len(),
            b: b.len(),
        });
    }
    let n = a.len();
    let mut cost = Tensor::zeros(n, n);
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            cost.set(i, j, dist2(p, q).sqrt());
        }
    }
    if n > AUCTION_THRESHOLD {
        auction(&cost, real(AUCTION_REL_TOL))
    } else {
        hungarian(&cost)
    }
}

/// Matched mean distance between a predicted set (a live tape node) and a
/// fixed reference set, recorded so gradients flow into the prediction.
/// The assignment is solved on current values and then held fixed, which is
/// exactly the local derivative of the matched distance away from ties.
pub fn emd_loss<F: Real>(
    tape: &mut Tape<F>,
    predicted: NodeId,
    reference: &Tensor<F>,
) -> Result<NodeId, LossError> {
    let pred_t = tape.value(predicted);
    if pred_t.cols() != 3 || reference.cols() != 3 {
        return Err(LossError::Diff(DiffError::ShapeMismatch {
            op: "emd_loss",
            detail: format!(
                "point tensors must be Nx3, got {:?} and {:?}",
                pred_t.shape(),
                reference.shape()
            ),
        }));
    }
    if pred_t.rows() != reference.rows() {
        return Err(LossError::SizeMismatch {
            op: "emd_loss",
            a: pred_t.rows(),
            b: reference.rows(),
        });
    }
    let as_points = |t: &Tensor<F>| -> Vec<[F; 3]> {
        (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                [r[0], r[1], r[2]]
            })
            .collect()
    };
    let pred_pts = as_points(pred_t);
    let ref_pts = as_points(reference);
    let assignment = match_points(&pred_pts, &ref_pts)?;

    // Reorder the reference so row i faces its matched prediction row.
    let n = pred_pts.len();
    let mut matched = Tensor::zeros(n, 3);
    for (i, &j) in assignment.row_to_col.iter().enumerate() {
        for d in 0..3 {
            matched.set(i, d, reference.at(j, d));
        }
    }
    let target = tape.input(matched)?;
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq_norm = tape.row_sum(sq)?;
    let dist = tape.sqrt(sq_norm)?;
    Ok(tape.mean(dist)?)
}

/// Negative mean per-point log density.
pub fn prior_loss<F: Real>(
    tape: &mut Tape<F>,
    log_prob_per_point: NodeId,
) -> Result<NodeId, LossError> {
    if tape.value(log_prob_per_point).cols() != 1 {
        return Err(LossError::Diff(DiffError::ShapeMismatch {
            op: "prior_loss",
            detail: format!(
                "expected Nx1 log densities, got {:?}",
                tape.value(log_prob_per_point).shape()
            ),
        }));
    }
    let mean = tape.mean(log_prob_per_point)?;
    Ok(tape.scale(mean, -F::one())?)
}

/// Weighted sum `alpha * reconstruction + beta * prior`.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    reconstruction: NodeId,
    prior: NodeId,
    alpha: F,
    beta: F,
) -> Result<NodeId, LossError> {
    let r = tape.scale(reconstruction, alpha)?;
    let p = tape.scale(prior, beta)?;
    Ok(tape.add(r, p)?)
}

/// Matched mean distance between two equal-size point sets (no gradients).
pub fn emd_metric<F: Real>(a: &[[F; 3]], b: &[[F; 3]]) -> Result<F, LossError> {
    let assignment = match_points(a, b)?;
    Ok(assignment.total_cost / real(a.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emd_metric_is_zero_on_identical_sets_and_permutation_invariant() {
        let a = vec![[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        assert_eq!(emd_metric(&a, &a).unwrap(), 0.0);
        let shuffled = vec![a[2], a[0], a[1]];
        assert_eq!(emd_metric(&a, &shuffled).unwrap(), 0.0);
    }

    #[test]
    fn emd_metric_of_pure_translation_is_the_shift() {
        let a = vec![[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b: Vec<[f64; 3]> = a.iter().map(|p| [p[0], p[1] + 0.5, p[2]]).collect();
        assert!((emd_metric(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn emd_loss_value_matches_metric_and_gradient_points_along_offset() {
        let a = vec![[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[0.0f64, 0.5, 0.0], [1.0, 0.5, 0.0]];
        let mut tape = Tape::new();
        let a_t = Tensor::from_vec(2, 3, a.iter().flatten().copied().collect()).unwrap();
        let b_t = Tensor::from_vec(2, 3, b.iter().flatten().copied().collect()).unwrap();
        let pred = tape.input(a_t).unwrap();
        let loss = emd_loss(&mut tape, pred, &b_t).unwrap();
        assert!((tape.value(loss).item() - 0.5).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.node(pred).unwrap();
        // d/da of mean |a_i - b_i| is the unit offset direction / n.
        for i in 0..2 {
            assert!((g.at(i, 0)).abs() < 1e-12);
            assert!((g.at(i, 1) - (-0.5)).abs() < 1e-12);
            assert!((g.at(i, 2)).abs() < 1e-12);
        }
    }

    #[test]
    fn emd_loss_rejects_mismatched_sizes() {
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::<f64>::zeros(2, 3)).unwrap();
        let reference = Tensor::<f64>::zeros(3, 3);
        assert!(matches!(
            emd_loss(&mut tape, pred, &reference),
            Err(LossError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn prior_loss_is_negative_mean() {
        let mut tape = Tape::<f64>::new();
        let lp = tape
            .input(Tensor::from_vec(3, 1, vec![-1.0, -3.0, -2.0]).unwrap())
            .unwrap();
        let loss = prior_loss(&mut tape, lp).unwrap();
        assert!((tape.value(loss).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weights_components() {
        let mut tape = Tape::new();
        let r = tape.input(Tensor::scalar(2.0f64)).unwrap();
        let p = tape.input(Tensor::scalar(10.0f64)).unwrap();
        let t = total_loss(&mut tape, r, p, 1e-4, 5e-2).unwrap();
        assert!((tape.value(t).item() - (2e-4 + 0.5)).abs() < 1e-15);
    }
}
