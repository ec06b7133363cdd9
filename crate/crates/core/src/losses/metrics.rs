use crate::geometry::dist2;
use crate::scalar::{real, Real};

use super::LossError;

/// Side length of the voxel grid used by the distributional metric.
pub const JSD_GRID: usize = 28;

fn check_nonempty<F: Real>(
    op: &'static str,
    a: &[[F; 3]],
    b: &[[F; 3]],
) -> Result<(), LossError> {
    if a.is_empty() || b.is_empty() {
        return Err(LossError::Empty { op });
    }
    Ok(())
}

fn min_dist2_to<F: Real>(p: &[F; 3], set: &[[F; 3]]) -> F {
    let mut best = F::infinity();
    for q in set {
        let d = dist2(p, q);
        if d < best {
            best = d;
        }
    }
    best
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance in
/// both directions, summed.
pub fn chamfer_distance<F: Real>(a: &[[F; 3]], b: &[[F; 3]]) -> Result<F, LossError> {
    check_nonempty("chamfer_distance", a, b)?;
    let mean_min = |from: &[[F; 3]], to: &[[F; 3]]| -> F {
        let total: F = from.iter().map(|p| min_dist2_to(p, to)).sum();
        total / real(from.len() as f64)
    };
    Ok(mean_min(a, b) + mean_min(b, a))
}

/// Symmetric Hausdorff distance on unsquared Euclidean distances.
pub fn hausdorff_distance<F: Real>(a: &[[F; 3]], b: &[[F; 3]]) -> Result<F, LossError> {
    check_nonempty("hausdorff_distance", a, b)?;
    let directed = |from: &[[F; 3]], to: &[[F; 3]]| -> F {
        let mut worst = F::zero();
        for p in from {
            let d = min_dist2_to(p, to);
            if d > worst {
                worst = d;
            }
        }
        worst.sqrt()
    };
    Ok(directed(a, b).max(directed(b, a)))
}

fn voxel_distribution<F: Real>(points: &[[F; 3]]) -> Vec<F> {
    let g = JSD_GRID;
    let mut counts = vec![F::zero(); g * g * g];
    let g_f = real::<F>(g as f64);
    let one = F::one();
    let half = real::<F>(0.5);
    for p in points {
        let mut idx = [0usize; 3];
        for d in 0..3 {
            // Map [-1, 1] onto [0, g); out-of-range points clamp to the
            // boundary voxels.
            let t = (p[d] + one) * half * g_f;
            let cell = t.floor().to_f64().unwrap_or(0.0) as isize;
            idx[d] = cell.clamp(0, g as isize - 1) as usize;
        }
        counts[(idx[0] * g + idx[1]) * g + idx[2]] += one;
    }
    let total = real::<F>(points.len() as f64);
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

/// Jensen-Shannon divergence between voxel occupancy distributions on a
/// 28^3 grid over [-1, 1]^3, in nats. Ranges from 0 (identical) to ln 2
/// (disjoint support).
pub fn jsd_voxel<F: Real>(a: &[[F; 3]], b: &[[F; 3]]) -> Result<F, LossError> {
    check_nonempty("jsd_voxel", a, b)?;
    let p = voxel_distribution(a);
    let q = voxel_distribution(b);
    let half = real::<F>(0.5);
    let mut acc = F::zero();
    for (&pv, &qv) in p.iter().zip(&q) {
        let m = half * (pv + qv);
        // 0 * ln(0/m) contributes nothing.
        if pv > F::zero() {
            acc += half * pv * (pv / m).ln();
        }
        if qv > F::zero() {
            acc += half * qv * (qv / m).ln();
        }
    }
    Ok(acc)
}

fn sub3<F: Real>(a: &[F; 3], b: &[F; 3]) -> [F; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3<F: Real>(a: &[F; 3], b: &[F; 3]) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn axpy3<F: Real>(base: &[F; 3], dir: &[F; 3], t: F) -> [F; 3] {
    [
        base[0] + dir[0] * t,
        base[1] + dir[1] * t,
        base[2] + dir[2] * t,
    ]
}

/// Exact closest point on a triangle, by classifying `p` against the seven
/// Voronoi regions of the triangle (vertices, edges, interior).
pub fn closest_point_on_triangle<F: Real>(p: &[F; 3], tri: &[[F; 3]; 3]) -> [F; 3] {
    let (a, b, c) = (&tri[0], &tri[1], &tri[2]);
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(&ab, &ap);
    let d2 = dot3(&ac, &ap);
    if d1 <= F::zero() && d2 <= F::zero() {
        return *a;
    }
    let bp = sub3(p, b);
    let d3 = dot3(&ab, &bp);
    let d4 = dot3(&ac, &bp);
    if d3 >= F::zero() && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= F::zero() && d1 >= F::zero() && d3 <= F::zero() {
        let v = d1 / (d1 - d3);
        return axpy3(a, &ab, v);
    }
    let cp = sub3(p, c);
    let d5 = dot3(&ab, &cp);
    let d6 = dot3(&ac, &cp);
    if d6 >= F::zero() && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= F::zero() && d2 >= F::zero() && d6 <= F::zero() {
        let w = d2 / (d2 - d6);
        return axpy3(a, &ac, w);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= F::zero() && (d4 - d3) >= F::zero() && (d5 - d6) >= F::zero() {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub3(c, b);
        return axpy3(b, &bc, w);
    }
    let denom = F::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Mean distance from each point to the nearest triangle of a surface,
/// by exhaustive search over triangles.
pub fn point_to_surface_distance<F: Real>(
    points: &[[F; 3]],
    triangles: &[[[F; 3]; 3]],
) -> Result<F, LossError> {
    if points.is_empty() || triangles.is_empty() {
        return Err(LossError::Empty {
            op: "point_to_surface_distance",
        });
    }
    let mut acc = F::zero();
    for p in points {
        let mut best = F::infinity();
        for tri in triangles {
            let q = closest_point_on_triangle(p, tri);
            let d = dist2(p, &q);
            if d < best {
                best = d;
            }
        }
        acc += best.sqrt();
    }
    Ok(acc / real(points.len() as f64))
}
