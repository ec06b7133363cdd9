//! Patch geometry: exact nearest neighbors, farthest point sampling, patch
//! normalization and patch merging. Everything here is brute force and
//! deterministic; ties are always broken toward the lower point index.

use std::fmt;

use crate::diffcore::Tensor;
use crate::scalar::{real, Real};

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    EmptyCloud { op: &'static str },
    CountTooLarge { op: &'static str, want: usize, have: usize },
    NonFinitePoint { op: &'static str, index: usize },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::EmptyCloud { op } => write!(f, "{op}: empty point set"),
            GeometryError::CountTooLarge { op, want, have } => {
                write!(f, "{op}: requested {want} points but only {have} available")
            }
            GeometryError::NonFinitePoint { op, index } => {
                write!(f, "{op}: point {index} has non-finite coordinates")
            }
        }
    }
}

impl std::error::Error for GeometryError {}

/// Unordered set of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<F> {
    pub points: Vec<[F; 3]>,
}

impl<F: Real> PointCloud<F> {
    pub fn new(points: Vec<[F; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nx3 tensor view of the cloud.
    pub fn to_tensor(&self) -> Tensor<F> {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::from_vec(self.points.len(), 3, data).expect("cloud is non-empty")
    }

    pub fn from_tensor(t: &Tensor<F>) -> Self {
        assert_eq!(t.cols(), 3, "point tensor must be Nx3");
        let points = (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                [r[0], r[1], r[2]]
            })
            .collect();
        PointCloud { points }
    }
}

#[inline]
pub fn dist2<F: Real>(a: &[F; 3], b: &[F; 3]) -> F {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Fixed k-nearest-neighbor graph. Row `i` starts with `i` itself followed
/// by the k-1 nearest other points ordered by (distance, index).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Flat neighbor list, row-major over points.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }
}

fn check_finite<F: Real>(op: &'static str, points: &[[F; 3]]) -> Result<(), GeometryError> {
    for (i, p) in points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(GeometryError::NonFinitePoint { op, index: i });
        }
    }
    Ok(())
}

/// Exact brute-force kNN over all point pairs.
pub fn knn_graph<F: Real>(points: &[[F; 3]], k: usize) -> Result<KnnGraph, GeometryError> {
    let n = points.len();
    if n == 0 {
        return Err(GeometryError::EmptyCloud { op: "knn_graph" });
    }
    if k == 0 || k > n {
        return Err(GeometryError::CountTooLarge {
            op: "knn_graph",
            want: k,
            have: n,
        });
    }
    check_finite("knn_graph", points)?;
    let mut neighbors = vec![0usize; n * k];
    let mut scratch: Vec<(F, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for (j, q) in points.iter().enumerate() {
            if j != i {
                scratch.push((dist2(&points[i], q), j));
            }
        }
        let m = k - 1;
        if m > 0 && m < scratch.len() {
            scratch.select_nth_unstable_by(m - 1, cmp_dist_idx);
        }
        scratch[..m].sort_unstable_by(cmp_dist_idx);
        let row = &mut neighbors[i * k..(i + 1) * k];
        row[0] = i;
        for (slot, &(_, j)) in row[1..].iter_mut().zip(&scratch[..m]) {
            *slot = j;
        }
    }
    Ok(KnnGraph { k, neighbors })
}

fn cmp_dist_idx<F: Real>(a: &(F, usize), b: &(F, usize)) -> std::cmp::Ordering {
    a.0.partial_cmp(&b.0)
        .expect("distances are finite")
        .then(a.1.cmp(&b.1))
}

/// Greedy farthest point sampling: starting from `start`, repeatedly picks
/// the point with the largest distance to the selected set.
pub fn farthest_point_sample<F: Real>(
    points: &[[F; 3]],
    m: usize,
    start: usize,
) -> Result<Vec<usize>, GeometryError> {
    let n = points.len();
    if n == 0 {
        return Err(GeometryError::EmptyCloud {
            op: "farthest_point_sample",
        });
    }
    if m == 0 || m > n || start >= n {
        return Err(GeometryError::CountTooLarge {
            op: "farthest_point_sample",
            want: m.max(start + 1),
            have: n,
        });
    }
    check_finite("farthest_point_sample", points)?;
    let mut selected = Vec::with_capacity(m);
    selected.push(start);
    let mut best: Vec<F> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while selected.len() < m {
        let mut next = 0;
        let mut next_d = real::<F>(-1.0);
        for (i, &d) in best.iter().enumerate() {
            if d > next_d {
                next_d = d;
                next = i;
            }
        }
        selected.push(next);
        for (b, p) in best.iter_mut().zip(points) {
            let d = dist2(p, &points[next]);
            if d < *b {
                *b = d;
            }
        }
    }
    Ok(selected)
}

/// Local patch in its normalized frame: centered on the centroid of its
/// points and scaled so the farthest point sits at radius 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<F> {
    pub points: Vec<[F; 3]>,
    pub center: [F; 3],
    pub scale: F,
    pub source_indices: Vec<usize>,
}

impl<F: Real> Patch<F> {
    /// Maps points from the patch frame back to the source frame.
    pub fn denormalize(&self, local: &[[F; 3]]) -> Vec<[F; 3]> {
        local
            .iter()
            .map(|p| {
                [
                    p[0] * self.scale + self.center[0],
                    p[1] * self.scale + self.center[1],
                    p[2] * self.scale + self.center[2],
                ]
            })
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::from_vec(self.points.len(), 3, data).expect("patch is non-empty")
    }
}

/// Extracts the `n` points nearest to `points[seed]` (seed included) and
/// normalizes them. A patch of coincident points keeps scale 1 so the
/// transform stays invertible.
pub fn extract_patch<F: Real>(
    points: &[[F; 3]],
    seed: usize,
    n: usize,
) -> Result<Patch<F>, GeometryError> {
    let total = points.len();
    if total == 0 {
        return Err(GeometryError::EmptyCloud { op: "extract_patch" });
    }
    if n == 0 || n > total || seed >= total {
        return Err(GeometryError::CountTooLarge {
            op: "extract_patch",
            want: n.max(seed + 1),
            have: total,
        });
    }
    check_finite("extract_patch", points)?;
    let mut scratch: Vec<(F, usize)> = Vec::with_capacity(total - 1);
    for (j, q) in points.iter().enumerate() {
        if j != seed {
            scratch.push((dist2(&points[seed], q), j));
        }
    }
    let m = n - 1;
    if m > 0 && m < scratch.len() {
        scratch.select_nth_unstable_by(m - 1, cmp_dist_idx);
    }
    scratch[..m].sort_unstable_by(cmp_dist_idx);
    let mut source_indices = Vec::with_capacity(n);
    source_indices.push(seed);
    source_indices.extend(scratch[..m].iter().map(|&(_, j)| j));

    let inv_n = F::one() / real::<F>(n as f64);
    let mut center = [F::zero(); 3];
    for &i in &source_indices {
        for (c, v) in center.iter_mut().zip(&points[i]) {
            *c += *v;
        }
    }
    center.iter_mut().for_each(|c| *c *= inv_n);

    let mut radius = F::zero();
    for &i in &source_indices {
        let d = dist2(&points[i], &center).sqrt();
        if d > radius {
            radius = d;
        }
    }
    let scale = if radius > real(1e-12) { radius } else { F::one() };
    let inv_scale = F::one() / scale;
    let local = source_indices
        .iter()
        .map(|&i| {
            let p = &points[i];
            [
                (p[0] - center[0]) * inv_scale,
                (p[1] - center[1]) * inv_scale,
                (p[2] - center[2]) * inv_scale,
            ]
        })
        .collect();
    Ok(Patch {
        points: local,
        center,
        scale,
        source_indices,
    })
}

/// Concatenates per-patch outputs (already in the source frame) and thins
/// the union down to `target` points with farthest point sampling from
/// index 0.
pub fn merge_and_downsample<F: Real>(
    pieces: &[Vec<[F; 3]>],
    target: usize,
) -> Result<PointCloud<F>, GeometryError> {
    let mut all: Vec<[F; 3]> = Vec::new();
    for piece in pieces {
        all.extend_from_slice(piece);
    }
    if all.is_empty() {
        return Err(GeometryError::EmptyCloud {
            op: "merge_and_downsample",
        });
    }
    if target == 0 || target > all.len() {
        return Err(GeometryError::CountTooLarge {
            op: "merge_and_downsample",
            want: target,
            have: all.len(),
        });
    }
    let keep = farthest_point_sample(&all, target, 0)?;
    Ok(PointCloud::new(keep.into_iter().map(|i| all[i]).collect()))
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_distance<F: Real>(points: &[[F; 3]]) -> Result<F, GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::CountTooLarge {
            op: "mean_nn_distance",
            want: 2,
            have: points.len(),
        });
    }
    check_finite("mean_nn_distance", points)?;
    let mut acc = F::zero();
    for (i, p) in points.iter().enumerate() {
        let mut best = F::infinity();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let d = dist2(p, q);
                if d < best {
                    best = d;
                }
            }
        }
        acc += best.sqrt();
    }
    Ok(acc / real(points.len() as f64))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    /// Oracle: full sort of all pairwise distances per point.
    fn knn_by_full_sort(points: &[[f64; 3]], k: usize) -> Vec<usize> {
        let n = points.len();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&points[i], &points[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.push(i);
            out.extend(all[..k - 1].iter().map(|&(_, j)| j));
        }
        out
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let points = random_points(&mut rng, 40);
            let graph = knn_graph(&points, 7).unwrap();
            assert_eq!(graph.flat(), knn_by_full_sort(&points, 7).as_slice());
        }
    }

    #[test]
    fn knn_keeps_self_first_even_with_duplicates() {
        let mut points = vec![[0.0f64, 0.0, 0.0]; 4];
        points.push([1.0, 0.0, 0.0]);
        let graph = knn_graph(&points, 3).unwrap();
        for i in 0..points.len() {
            assert_eq!(graph.row(i)[0], i, "row {i} must start with itself");
        }
        // Duplicates at distance zero are taken in index order.
        assert_eq!(graph.row(1), &[1, 0, 2]);
    }

    #[test]
    fn knn_breaks_ties_toward_lower_index() {
        // Four corners of a square: both lateral neighbors are equidistant.
        let points = vec![
            [0.0f64, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        let graph = knn_graph(&points, 3).unwrap();
        assert_eq!(graph.row(3), &[3, 1, 2]);
        assert_eq!(graph.row(0), &[0, 1, 2]);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let points = vec![[0.0f64; 3]; 3];
        assert!(knn_graph(&points, 0).is_err());
        assert!(knn_graph(&points, 4).is_err());
        assert!(knn_graph::<f64>(&[], 1).is_err());
    }

    #[test]
    fn fps_on_a_line_picks_extremes_then_midpoint() {
        let points: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let picks = farthest_point_sample(&points, 3, 0).unwrap();
        // After 0 and 9, indices 4 and 5 tie at min-distance 4; lower wins.
        assert_eq!(picks, vec![0, 9, 4]);
    }

    #[test]
    fn fps_each_pick_maximizes_min_distance() {
        // Oracle: recompute the greedy choice from scratch at every step.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let points = random_points(&mut rng, 30);
            let picks = farthest_point_sample(&points, 12, 3).unwrap();
            assert_eq!(picks[0], 3);
            for step in 1..picks.len() {
                let chosen = &picks[..step];
                let min_d = |i: usize| {
                    chosen
                        .iter()
                        .map(|&c| dist2(&points[i], &points[c]))
                        .fold(f64::INFINITY, f64::min)
                };
                let mut best = 0;
                let mut best_d = -1.0;
                for i in 0..points.len() {
                    let d = min_d(i);
                    if d > best_d {
                        best_d = d;
                        best = i;
                    }
                }
                assert_eq!(picks[step], best, "step {step}");
            }
            // All picks distinct.
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), picks.len());
        }
    }

    #[test]
    fn patch_is_centered_and_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points = random_points(&mut rng, 50);
        let patch = extract_patch(&points, 7, 16).unwrap();
        assert_eq!(patch.points.len(), 16);
        assert_eq!(patch.source_indices[0], 7);
        let mut centroid = [0.0f64; 3];
        for p in &patch.points {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / 16.0;
            }
        }
        for c in centroid {
            assert!(c.abs() < 1e-12, "centroid {c}");
        }
        let max_r = patch
            .points
            .iter()
            .map(|p| dist2(p, &[0.0, 0.0, 0.0]).sqrt())
            .fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-12, "max radius {max_r}");
    }

    #[test]
    fn patch_round_trips_through_denormalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let points = random_points(&mut rng, 40);
        let patch = extract_patch(&points, 0, 12).unwrap();
        let back = patch.denormalize(&patch.points);
        for (b, &i) in back.iter().zip(&patch.source_indices) {
            for d in 0..3 {
                assert!((b[d] - points[i][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_patch_keeps_unit_scale() {
        let points = vec![[2.0f64, -1.0, 0.5]; 5];
        let patch = extract_patch(&points, 2, 5).unwrap();
        assert_eq!(patch.scale, 1.0);
        assert!(patch.points.iter().all(|p| p.iter().all(|&v| v == 0.0)));
        let back = patch.denormalize(&patch.points);
        assert!(back.iter().all(|p| *p == [2.0, -1.0, 0.5]));
    }

    #[test]
    fn merge_downsamples_to_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a = random_points(&mut rng, 30);
        let b = random_points(&mut rng, 30);
        let merged = merge_and_downsample(&[a.clone(), b.clone()], 20).unwrap();
        assert_eq!(merged.len(), 20);
        let pool: Vec<[f64; 3]> = a.into_iter().chain(b).collect();
        for p in &merged.points {
            assert!(pool.contains(p));
        }
    }

    #[test]
    fn mean_nn_distance_on_unit_grid_is_one() {
        let points = vec![
            [0.0f64, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        assert!((mean_nn_distance(&points).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tensor_round_trip() {
        let cloud = PointCloud::new(vec![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let t = cloud.to_tensor();
        assert_eq!(t.shape(), [2, 3]);
        assert_eq!(PointCloud::from_tensor(&t), cloud);
    }
}
