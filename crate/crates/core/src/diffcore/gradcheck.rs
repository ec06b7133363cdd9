use crate::scalar::{real, Real};

use super::tensor::{DiffError, Tensor};

/// Compares an analytic gradient against central finite differences of `f`
/// evaluated around `point`, one coordinate at a time.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / (|central| + 1e-8)`.
pub fn check_gradient<F: Real>(
    f: &mut dyn FnMut(&Tensor<F>) -> Result<F, DiffError>,
    point: &Tensor<F>,
    analytic: &Tensor<F>,
    h: F,
) -> Result<F, DiffError> {
    if point.shape() != analytic.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "check_gradient",
            detail: format!(
                "point {:?} vs analytic gradient {:?}",
                point.shape(),
                analytic.shape()
            ),
        });
    }
    let two_h = h + h;
    let floor = real::<F>(1e-8);
    let mut worst = F::zero();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / two_h;
        if !central.is_finite() {
            return Err(DiffError::NonFinite {
                context: format!("central difference at coordinate {i}"),
            });
        }
        let rel = (analytic.data()[i] - central).abs() / (central.abs() + floor);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
