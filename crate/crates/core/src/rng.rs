//! Deterministic sampling helpers shared by initialization, data synthesis
//! and augmentation. Every draw goes through `f64` first so the number of
//! underlying RNG words consumed does not depend on the working scalar type.

use rand::Rng;

use crate::scalar::{real, Real};

/// Standard normal sample via the Box-Muller transform.
///
/// Draws exactly two uniform words per call; the second output of the
/// transform is discarded to keep the draw count independent of call sites.
pub fn normal<F: Real, R: Rng + ?Sized>(rng: &mut R) -> F {
    // Map into (0, 1] so the logarithm stays finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    let mag = (-2.0 * u1.ln()).sqrt();
    real(mag * (2.0 * std::f64::consts::PI * u2).cos())
}

/// Uniform sample in `[lo, hi)`.
pub fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> F {
    real(rng.gen_range(lo..hi))
}

/// Uniformly distributed rotation matrix (row-major, acts on row vectors
/// from the right as `x * R^T`), built from a uniform unit quaternion.
pub fn random_rotation<F: Real, R: Rng + ?Sized>(rng: &mut R) -> [[F; 3]; 3] {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let tau = 2.0 * std::f64::consts::PI;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (x, y) = ((tau * u2).sin() * a, (tau * u2).cos() * a);
    let (z, w) = ((tau * u3).sin() * b, (tau * u3).cos() * b);
    rotation_from_quaternion(x, y, z, w)
}

fn rotation_from_quaternion<F: Real>(x: f64, y: f64, z: f64, w: f64) -> [[F; 3]; 3] {
    let m = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    let mut out = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = real(m[i][j]);
        }
    }
    out
}

/// Applies a rotation produced by [`random_rotation`] to a single point.
pub fn rotate_point<F: Real>(rot: &[[F; 3]; 3], p: [F; 3]) -> [F; 3] {
    let mut out = [F::zero(); 3];
    for (i, row) in rot.iter().enumerate() {
        out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let var: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn rotations_are_orthogonal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let r: [[f64; 3]; 3] = random_rotation(&mut rng);
            // R * R^T == I
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12, "det {det}");
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: [[f64; 3]; 3] = random_rotation(&mut rng);
        let p = [0.3, -1.2, 2.5];
        let q = rotate_point(&r, p);
        let np: f64 = p.iter().map(|v| v * v).sum();
        let nq: f64 = q.iter().map(|v| v * v).sum();
        assert!((np - nq).abs() < 1e-12);
    }
}
