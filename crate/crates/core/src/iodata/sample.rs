//! Surface sampling: area-weighted uniform draws and relaxed dart throwing
//! for blue-noise-like point sets.

use std::collections::HashMap;

use rand::Rng;

use crate::geometry::PointCloud;
use crate::rng::uniform;
use crate::scalar::{real, Real};

use super::{IoError, TriangleMesh};

/// Cumulative area table over non-degenerate triangles.
fn area_table<F: Real>(mesh: &TriangleMesh<F>) -> Result<(Vec<usize>, Vec<F>), IoError> {
    let mut ids = Vec::new();
    let mut cum = Vec::new();
    let mut total = F::zero();
    for i in 0..mesh.triangles.len() {
        let a = mesh.triangle_area(i);
        if a > F::zero() {
            total += a;
            ids.push(i);
            cum.push(total);
        }
    }
    if ids.is_empty() {
        return Err(IoError::Sampling {
            detail: "mesh has zero surface area".into(),
        });
    }
    Ok((ids, cum))
}

fn draw_point<F: Real, R: Rng + ?Sized>(
    mesh: &TriangleMesh<F>,
    ids: &[usize],
    cum: &[F],
    rng: &mut R,
) -> [F; 3] {
    let total = *cum.last().expect("nonempty table");
    let target = uniform::<F, _>(rng, 0.0, 1.0) * total;
    let slot = cum.partition_point(|&c| c < target).min(ids.len() - 1);
    let [ia, ib, ic] = mesh.triangles[ids[slot]];
    let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
    let mut u = uniform::<F, _>(rng, 0.0, 1.0);
    let mut v = uniform::<F, _>(rng, 0.0, 1.0);
    if u + v > F::one() {
        u = F::one() - u;
        v = F::one() - v;
    }
    let mut p = [F::zero(); 3];
    for d in 0..3 {
        p[d] = a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d]);
    }
    p
}

/// Uniform-density surface samples: triangles picked by area, positions by
/// uniform barycentric coordinates.
pub fn sample_mesh_uniform<F: Real, R: Rng + ?Sized>(
    mesh: &TriangleMesh<F>,
    count: usize,
    rng: &mut R,
) -> Result<PointCloud<F>, IoError> {
    if count == 0 {
        return Err(IoError::Sampling {
            detail: "requested zero samples".into(),
        });
    }
    let (ids, cum) = area_table(mesh)?;
    let points = (0..count)
        .map(|_| draw_point(mesh, &ids, &cum, rng))
        .collect();
    Ok(PointCloud::new(points))
}

/// Spatial hash over cells of edge `cell`; two points closer than `cell`
/// always land in the same or adjacent cells.
struct HashGrid {
    cell: f64,
    map: HashMap<[i64; 3], Vec<usize>>,
}

impl HashGrid {
    fn new(cell: f64) -> Self {
        HashGrid {
            cell,
            map: HashMap::new(),
        }
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        [
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
            (p[2] / self.cell).floor() as i64,
        ]
    }

    fn insert(&mut self, p: &[f64; 3], idx: usize) {
        self.map.entry(self.key(p)).or_default().push(idx);
    }

    fn has_neighbor_within(&self, p: &[f64; 3], r: f64, points: &[[f64; 3]]) -> bool {
        let k = self.key(p);
        let r2 = r * r;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let cell = [k[0] + dx, k[1] + dy, k[2] + dz];
                    if let Some(bucket) = self.map.get(&cell) {
                        for &j in bucket {
                            let q = points[j];
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 < r2 {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }
}

/// Dart throwing with relaxation: the exclusion radius starts at the
/// hexagonal-packing ideal for `count` points; whenever the surface
/// saturates short of the count, the radius shrinks by 10% (floored at 70%
/// of the ideal) and throwing restarts from scratch, so every returned pair
/// is separated by at least the final radius.
pub fn sample_mesh_poissonish<F: Real, R: Rng + ?Sized>(
    mesh: &TriangleMesh<F>,
    count: usize,
    rng: &mut R,
) -> Result<PointCloud<F>, IoError> {
    if count == 0 {
        return Err(IoError::Sampling {
            detail: "requested zero samples".into(),
        });
    }
    let (ids, cum) = area_table(mesh)?;
    let area = mesh.total_area().to_f64().expect("finite area");
    let ideal = (2.0 * area / (3f64.sqrt() * count as f64)).sqrt();
    let floor = 0.7 * ideal;

    let mut radius = ideal;
    let mut floor_rounds = 0;
    let points = loop {
        let mut points: Vec<[f64; 3]> = Vec::with_capacity(count);
        let mut grid = HashGrid::new(radius);
        let budget = 60 * count + 1000;
        for _ in 0..budget {
            if points.len() == count {
                break;
            }
            let p = draw_point(mesh, &ids, &cum, rng);
            let pf = [
                p[0].to_f64().expect("finite sample"),
                p[1].to_f64().expect("finite sample"),
                p[2].to_f64().expect("finite sample"),
            ];
            if !grid.has_neighbor_within(&pf, radius, &points) {
                grid.insert(&pf, points.len());
                points.push(pf);
            }
        }
        if points.len() == count {
            break points;
        }
        if radius <= floor {
            floor_rounds += 1;
            if floor_rounds >= 4 {
                return Err(IoError::Sampling {
                    detail: format!(
                        "placed {} of {count} points before exhausting relaxation",
                        points.len()
                    ),
                });
            }
        } else {
            radius = (radius * 0.9).max(floor);
        }
    };
    Ok(PointCloud::new(
        points
            .into_iter()
            .map(|p| [real::<F>(p[0]), real::<F>(p[1]), real::<F>(p[2])])
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::iodata::builtin_shape;
    use crate::losses::point_to_surface_distance;

    use super::*;

    #[test]
    fn single_triangle_samples_stay_inside_it() {
        let mesh = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let cloud = sample_mesh_uniform(&mesh, 500, &mut rng).unwrap();
        for p in &cloud.points {
            // Barycentric recovery on the xy-plane triangle.
            let u = p[0] / 2.0;
            let v = p[1] / 3.0;
            assert_eq!(p[2], 0.0);
            assert!(u >= 0.0 && v >= 0.0 && u + v <= 1.0 + 1e-12, "{p:?}");
        }
    }

    #[test]
    fn sampling_respects_area_weights() {
        // Two triangles with area ratio 3:1.
        let mesh = TriangleMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 2.0, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let n = 100_000;
        let cloud = sample_mesh_uniform(&mesh, n, &mut rng).unwrap();
        let big = cloud.points.iter().filter(|p| p[0] < 5.0).count();
        let expect = 0.75 * n as f64;
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!(
            (big as f64 - expect).abs() < 3.0 * sigma,
            "{big} vs {expect} +- {sigma}"
        );
    }

    #[test]
    fn zero_area_triangles_never_get_samples() {
        let mesh = TriangleMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 5.0, 5.0],
            ],
            vec![[0, 1, 2], [3, 3, 3]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let cloud = sample_mesh_uniform(&mesh, 200, &mut rng).unwrap();
        assert!(cloud.points.iter().all(|p| p[0] <= 1.0));
    }

    #[test]
    fn dart_throwing_meets_count_and_spacing() {
        let mesh: TriangleMesh<f64> = builtin_shape("sphere", 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let count = 600;
        let cloud = sample_mesh_poissonish(&mesh, count, &mut rng).unwrap();
        assert_eq!(cloud.len(), count);

        let area = mesh.total_area();
        let ideal = (2.0 * area / (3f64.sqrt() * count as f64)).sqrt();
        let mut min_d2 = f64::INFINITY;
        for i in 0..count {
            for j in 0..i {
                let (a, b) = (cloud.points[i], cloud.points[j]);
                let d2 =
                    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                min_d2 = min_d2.min(d2);
            }
        }
        assert!(
            min_d2.sqrt() >= 0.7 * ideal,
            "min spacing {} under floor {}",
            min_d2.sqrt(),
            0.7 * ideal
        );

        // Every sample lies on the surface.
        let tris: Vec<[[f64; 3]; 3]> = mesh
            .triangles
            .iter()
            .map(|t| [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]])
            .collect();
        let d = point_to_surface_distance(&cloud.points, &tris).unwrap();
        assert!(d < 1e-9, "mean surface distance {d}");
    }

    #[test]
    fn degenerate_meshes_are_rejected() {
        let mesh = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        assert!(sample_mesh_uniform(&mesh, 10, &mut rng).is_err());
        assert!(sample_mesh_poissonish(&mesh, 10, &mut rng).is_err());
    }

    #[test]
    fn samplers_are_deterministic() {
        let mesh: TriangleMesh<f64> = builtin_shape("torus", 10).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_mesh_uniform(&mesh, 64, &mut rng).unwrap().points
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
