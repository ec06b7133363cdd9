//! Triangle meshes: OFF and ascii PLY readers, minimal PLY writers, and
//! analytic benchmark shapes normalized into the [-1,1] cube.

use std::fs;
use std::path::Path;

use crate::geometry::PointCloud;
use crate::scalar::{real, Real};

use super::IoError;

pub const SHAPE_NAMES: [&str; 5] = ["sphere", "torus", "cube", "bumpy-sphere", "saddle"];

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh<F> {
    pub vertices: Vec<[F; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl<F: Real> TriangleMesh<F> {
    pub fn new(vertices: Vec<[F; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self, IoError> {
        for (i, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= vertices.len() {
                    return Err(IoError::Mesh {
                        detail: format!(
                            "face {i} references vertex {v} of {}",
                            vertices.len()
                        ),
                    });
                }
            }
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
        })
    }

    pub fn triangle_area(&self, i: usize) -> F {
        let [a, b, c] = self.triangles[i];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = u[1] * v[2] - u[2] * v[1];
        let cy = u[2] * v[0] - u[0] * v[2];
        let cz = u[0] * v[1] - u[1] * v[0];
        (cx * cx + cy * cy + cz * cz).sqrt() * real::<F>(0.5)
    }

    pub fn total_area(&self) -> F {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    pub fn bounding_box(&self) -> ([F; 3], [F; 3]) {
        let mut lo = [F::infinity(); 3];
        let mut hi = [F::neg_infinity(); 3];
        for v in &self.vertices {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (lo, hi)
    }

    /// Centers the bounding box at the origin and scales uniformly so the
    /// largest half-extent becomes 1.
    pub fn normalize_unit_box(&mut self) {
        let (lo, hi) = self.bounding_box();
        let mut center = [F::zero(); 3];
        let mut half = F::zero();
        for c in 0..3 {
            center[c] = (lo[c] + hi[c]) * real::<F>(0.5);
            half = half.max((hi[c] - lo[c]) * real::<F>(0.5));
        }
        if half <= F::zero() {
            return;
        }
        for v in &mut self.vertices {
            for c in 0..3 {
                v[c] = (v[c] - center[c]) / half;
            }
        }
    }
}

/// Line-tagged token stream for whitespace formats with '#' comments.
struct Tokens {
    items: Vec<(usize, String)>,
    pos: usize,
}

impl Tokens {
    fn new(text: &str) -> Self {
        let mut items = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("");
            for tok in body.split_whitespace() {
                items.push((idx + 1, tok.to_string()));
            }
        }
        Tokens { items, pos: 0 }
    }

    fn next(&mut self, what: &str) -> Result<(usize, &str), IoError> {
        match self.items.get(self.pos) {
            Some((line, tok)) => {
                self.pos += 1;
                Ok((*line, tok))
            }
            None => Err(IoError::Parse {
                line: self.items.last().map_or(1, |(l, _)| *l),
                detail: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn usize(&mut self, what: &str) -> Result<usize, IoError> {
        let (line, tok) = self.next(what)?;
        tok.parse().map_err(|_| IoError::Parse {
            line,
            detail: format!("expected {what}, found {tok:?}"),
        })
    }

    fn float<F: Real>(&mut self, what: &str) -> Result<F, IoError> {
        let (line, tok) = self.next(what)?;
        let v: f64 = tok.parse().map_err(|_| IoError::Parse {
            line,
            detail: format!("expected {what}, found {tok:?}"),
        })?;
        F::from_f64(v).ok_or(IoError::Parse {
            line,
            detail: format!("{what} {tok} out of range"),
        })
    }
}

/// Reads an OFF mesh; polygonal faces are fan-triangulated.
pub fn read_off<F: Real>(path: &Path) -> Result<TriangleMesh<F>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut toks = Tokens::new(&text);
    let (line, header) = toks.next("OFF header")?;
    if header != "OFF" {
        return Err(IoError::Parse {
            line,
            detail: format!("expected OFF header, found {header:?}"),
        });
    }
    let nv = toks.usize("vertex count")?;
    let nf = toks.usize("face count")?;
    let _ne = toks.usize("edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = toks.float("vertex coordinate")?;
        let y = toks.float("vertex coordinate")?;
        let z = toks.float("vertex coordinate")?;
        vertices.push([x, y, z]);
    }
    let mut triangles = Vec::with_capacity(nf);
    for face in 0..nf {
        read_face(&mut toks, face, nv, &mut triangles)?;
    }
    TriangleMesh::new(vertices, triangles)
}

fn read_face(
    toks: &mut Tokens,
    face: usize,
    nv: usize,
    triangles: &mut Vec<[usize; 3]>,
) -> Result<(), IoError> {
    let m = toks.usize("face vertex count")?;
    if m < 3 {
        return Err(IoError::Mesh {
            detail: format!("face {face} has {m} vertices"),
        });
    }
    let mut idx = Vec::with_capacity(m);
    for _ in 0..m {
        let v = toks.usize("face vertex index")?;
        if v >= nv {
            return Err(IoError::Mesh {
                detail: format!("face {face} references vertex {v} of {nv}"),
            });
        }
        idx.push(v);
    }
    for i in 1..m - 1 {
        triangles.push([idx[0], idx[i], idx[i + 1]]);
    }
    Ok(())
}

/// Reads an ascii PLY file. Vertex positions come from the x, y, z
/// properties; extra vertex properties are ignored. A missing face element
/// yields a mesh with zero triangles.
pub fn read_ply_ascii<F: Real>(path: &Path) -> Result<TriangleMesh<F>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut header_line = |what: &str| -> Result<(usize, &str), IoError> {
        lines.next().ok_or(IoError::Parse {
            line: 0,
            detail: format!("unexpected end of header, expected {what}"),
        })
    };

    let (line, magic) = header_line("ply magic")?;
    if magic != "ply" {
        return Err(IoError::Parse {
            line,
            detail: format!("expected \"ply\", found {magic:?}"),
        });
    }

    let mut nv = None;
    let mut nf = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    // 0 = none, 1 = vertex, 2 = face
    let mut current = 0u8;
    loop {
        let (line, l) = header_line("end_header")?;
        let mut f = l.split_whitespace();
        match f.next() {
            Some("comment") | Some("obj_info") => {}
            Some("format") => {
                let rest: Vec<&str> = f.collect();
                if rest != ["ascii", "1.0"] {
                    return Err(IoError::Parse {
                        line,
                        detail: format!("unsupported format {:?}, need ascii 1.0", rest.join(" ")),
                    });
                }
            }
            Some("element") => match (f.next(), f.next()) {
                (Some("vertex"), Some(n)) => {
                    nv = Some(n.parse::<usize>().map_err(|_| IoError::Parse {
                        line,
                        detail: format!("bad vertex count {n:?}"),
                    })?);
                    current = 1;
                }
                (Some("face"), Some(n)) => {
                    nf = n.parse().map_err(|_| IoError::Parse {
                        line,
                        detail: format!("bad face count {n:?}"),
                    })?;
                    current = 2;
                }
                (other, _) => {
                    return Err(IoError::Parse {
                        line,
                        detail: format!("unsupported element {other:?}"),
                    })
                }
            },
            Some("property") => {
                if current == 1 {
                    let name = f.last().ok_or(IoError::Parse {
                        line,
                        detail: "property without a name".into(),
                    })?;
                    vertex_props.push(name.to_string());
                }
                // Face properties are assumed to be the index list.
            }
            Some("end_header") => break,
            other => {
                return Err(IoError::Parse {
                    line,
                    detail: format!("unexpected header entry {other:?}"),
                })
            }
        }
    }

    let nv = nv.ok_or(IoError::Parse {
        line: 0,
        detail: "header missing vertex element".into(),
    })?;
    let coord_cols: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|axis| {
            vertex_props
                .iter()
                .position(|p| p == axis)
                .ok_or(IoError::Parse {
                    line: 0,
                    detail: format!("vertex element lacks property {axis}"),
                })
        })
        .collect::<Result<_, _>>()?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, l) = header_line("vertex line")?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != vertex_props.len() {
            return Err(IoError::Parse {
                line,
                detail: format!(
                    "expected {} vertex fields, found {}",
                    vertex_props.len(),
                    fields.len()
                ),
            });
        }
        let mut p = [F::zero(); 3];
        for (slot, &col) in p.iter_mut().zip(&coord_cols) {
            let v: f64 = fields[col].parse().map_err(|_| IoError::Parse {
                line,
                detail: format!("bad coordinate {:?}", fields[col]),
            })?;
            *slot = F::from_f64(v).ok_or(IoError::Parse {
                line,
                detail: format!("coordinate {} out of range", fields[col]),
            })?;
        }
        vertices.push(p);
    }

    let mut triangles = Vec::with_capacity(nf);
    for face in 0..nf {
        let (line, l) = header_line("face line")?;
        let mut toks = Tokens {
            items: l
                .split_whitespace()
                .map(|t| (line, t.to_string()))
                .collect(),
            pos: 0,
        };
        read_face(&mut toks, face, nv, &mut triangles)?;
    }
    TriangleMesh::new(vertices, triangles)
}

fn ply_header(out: &mut String, nv: usize, nf: Option<usize>) {
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {nv}\n"));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if let Some(nf) = nf {
        out.push_str(&format!("element face {nf}\n"));
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
}

fn push_vertex<F: Real>(out: &mut String, v: &[F; 3]) {
    for (i, c) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{:.16e}", c.to_f64().unwrap_or(f64::NAN)));
    }
    out.push('\n');
}

pub fn write_ply_points<F: Real>(path: &Path, cloud: &PointCloud<F>) -> Result<(), IoError> {
    let mut out = String::new();
    ply_header(&mut out, cloud.len(), None);
    for v in &cloud.points {
        push_vertex(&mut out, v);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_ply_mesh<F: Real>(path: &Path, mesh: &TriangleMesh<F>) -> Result<(), IoError> {
    let mut out = String::new();
    ply_header(&mut out, mesh.vertices.len(), Some(mesh.triangles.len()));
    for v in &mesh.vertices {
        push_vertex(&mut out, v);
    }
    for t in &mesh.triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Analytic test shapes, all within the [-1,1] cube. `resolution` controls
/// tessellation density (minimum 3).
pub fn builtin_shape<F: Real>(name: &str, resolution: usize) -> Result<TriangleMesh<F>, IoError> {
    let res = resolution.max(3);
    match name {
        "sphere" => Ok(lat_lon_shape(res, |_, _| real::<F>(1.0))),
        "bumpy-sphere" => Ok(lat_lon_shape(res, |theta: F, phi: F| {
            real::<F>(0.8)
                + real::<F>(0.15) * (theta * real::<F>(4.0)).sin() * (phi * real::<F>(4.0)).cos()
        })),
        "torus" => Ok(torus(res, real::<F>(0.7), real::<F>(0.3))),
        "cube" => cube(),
        "saddle" => Ok(saddle(res)),
        _ => Err(IoError::UnknownShape { name: name.into() }),
    }
}

/// Sphere-topology surface with radius a function of the two angles. The
/// radius function must be constant at the poles (theta = 0, pi).
fn lat_lon_shape<F: Real>(res: usize, radius: impl Fn(F, F) -> F) -> TriangleMesh<F> {
    let rings = res;
    let segs = 2 * res;
    let pi = real::<F>(std::f64::consts::PI);
    let mut vertices = Vec::with_capacity(2 + (rings - 1) * segs);
    let north = radius(F::zero(), F::zero());
    vertices.push([F::zero(), F::zero(), north]);
    for i in 1..rings {
        let theta = pi * real::<F>(i as f64) / real::<F>(rings as f64);
        for j in 0..segs {
            let phi = real::<F>(2.0) * pi * real::<F>(j as f64) / real::<F>(segs as f64);
            let r = radius(theta, phi);
            vertices.push([
                r * theta.sin() * phi.cos(),
                r * theta.sin() * phi.sin(),
                r * theta.cos(),
            ]);
        }
    }
    let south = radius(pi, F::zero());
    vertices.push([F::zero(), F::zero(), -south]);
    let south_idx = vertices.len() - 1;

    let ring = |i: usize, j: usize| 1 + (i - 1) * segs + (j % segs);
    let mut triangles = Vec::new();
    for j in 0..segs {
        triangles.push([0, ring(1, j), ring(1, j + 1)]);
        triangles.push([south_idx, ring(rings - 1, j + 1), ring(rings - 1, j)]);
    }
    for i in 1..rings - 1 {
        for j in 0..segs {
            let (a, b) = (ring(i, j), ring(i, j + 1));
            let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

fn torus<F: Real>(res: usize, major: F, minor: F) -> TriangleMesh<F> {
    let (m, n) = (2 * res, res);
    let tau = real::<F>(2.0 * std::f64::consts::PI);
    let mut vertices = Vec::with_capacity(m * n);
    for i in 0..m {
        let u = tau * real::<F>(i as f64) / real::<F>(m as f64);
        for j in 0..n {
            let v = tau * real::<F>(j as f64) / real::<F>(n as f64);
            let w = major + minor * v.cos();
            vertices.push([w * u.cos(), w * u.sin(), minor * v.sin()]);
        }
    }
    let at = |i: usize, j: usize| (i % m) * n + (j % n);
    let mut triangles = Vec::with_capacity(2 * m * n);
    for i in 0..m {
        for j in 0..n {
            let (a, b) = (at(i, j), at(i, j + 1));
            let (c, d) = (at(i + 1, j), at(i + 1, j + 1));
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

fn cube<F: Real>() -> Result<TriangleMesh<F>, IoError> {
    let s = F::one();
    let mut vertices = Vec::with_capacity(8);
    for &z in &[-s, s] {
        for &y in &[-s, s] {
            for &x in &[-s, s] {
                vertices.push([x, y, z]);
            }
        }
    }
    // Two triangles per face; vertex bits are x + 2y + 4z.
    let faces = [
        [0, 1, 3, 2], // z = -1
        [4, 6, 7, 5], // z = +1
        [0, 4, 5, 1], // y = -1
        [2, 3, 7, 6], // y = +1
        [0, 2, 6, 4], // x = -1
        [1, 5, 7, 3], // x = +1
    ];
    let mut triangles = Vec::with_capacity(12);
    for q in faces {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Open surface z = (x^2 - y^2) / 2 over the unit square.
fn saddle<F: Real>(res: usize) -> TriangleMesh<F> {
    let mut vertices = Vec::with_capacity((res + 1) * (res + 1));
    for i in 0..=res {
        let x = real::<F>(-1.0) + real::<F>(2.0 * i as f64 / res as f64);
        for j in 0..=res {
            let y = real::<F>(-1.0) + real::<F>(2.0 * j as f64 / res as f64);
            vertices.push([x, y, (x * x - y * y) * real::<F>(0.5)]);
        }
    }
    let at = |i: usize, j: usize| i * (res + 1) + j;
    let mut triangles = Vec::with_capacity(2 * res * res);
    for i in 0..res {
        for j in 0..res {
            let (a, b) = (at(i, j), at(i, j + 1));
            let (c, d) = (at(i + 1, j), at(i + 1, j + 1));
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn euler_characteristic(mesh: &TriangleMesh<f64>) -> i64 {
        let mut edges = HashSet::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        mesh.vertices.len() as i64 - edges.len() as i64 + mesh.triangles.len() as i64
    }

    #[test]
    fn off_tetrahedron_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.off");
        std::fs::write(
            &path,
            "OFF\n# a tetrahedron\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n",
        )
        .unwrap();
        let mesh: TriangleMesh<f64> = read_off(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.triangles.len(), 4);
        assert_eq!(mesh.vertices[3], [0.0, 0.0, 1.0]);
        assert_eq!(euler_characteristic(&mesh), 2);

        // Counts on the header line are also accepted, and quads split.
        std::fs::write(
            &path,
            "OFF 4 1 4\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        let mesh: TriangleMesh<f64> = read_off(&path).unwrap();
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn off_bad_face_index_names_the_face() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.off");
        std::fs::write(&path, "OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n3 0 1 7\n").unwrap();
        let err = read_off::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("face 1"), "{err}");
        assert!(err.to_string().contains("vertex 7"), "{err}");
    }

    #[test]
    fn ply_reader_ignores_extra_vertex_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verts.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment with normals\nelement vertex 2\n\
             property float nx\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             9 0 0 0\n9 1 2 3\n3 0 1 1\n",
        )
        .unwrap();
        let mesh: TriangleMesh<f64> = read_ply_ascii(&path).unwrap();
        assert_eq!(mesh.vertices, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(mesh.triangles, vec![[0, 1, 1]]);
    }

    #[test]
    fn ply_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh: TriangleMesh<f64> = builtin_shape("cube", 3).unwrap();
        let mpath = dir.path().join("mesh.ply");
        write_ply_mesh(&mpath, &mesh).unwrap();
        let back: TriangleMesh<f64> = read_ply_ascii(&mpath).unwrap();
        assert_eq!(mesh, back);

        let cloud = PointCloud::new(vec![[0.25, -1.5, 3e-5], [1.0, 2.0, 3.0]]);
        let cpath = dir.path().join("cloud.ply");
        write_ply_points(&cpath, &cloud).unwrap();
        let back: TriangleMesh<f64> = read_ply_ascii(&cpath).unwrap();
        assert_eq!(back.vertices, cloud.points);
        assert!(back.triangles.is_empty());
    }

    #[test]
    fn ply_face_index_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\n\
             property double z\nelement face 1\nproperty list uchar int vertex_indices\n\
             end_header\n0 0 0\n3 0 0 5\n",
        )
        .unwrap();
        let err = read_ply_ascii::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("vertex 5"), "{err}");
    }

    #[test]
    fn sphere_vertices_sit_on_the_unit_sphere() {
        let mesh: TriangleMesh<f64> = builtin_shape("sphere", 12).unwrap();
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12, "radius {r}");
        }
        assert_eq!(euler_characteristic(&mesh), 2);
    }

    #[test]
    fn torus_has_euler_characteristic_zero() {
        let mesh: TriangleMesh<f64> = builtin_shape("torus", 9).unwrap();
        assert_eq!(euler_characteristic(&mesh), 0);
    }

    #[test]
    fn all_shapes_fit_in_the_unit_cube() {
        for name in SHAPE_NAMES {
            let mesh: TriangleMesh<f64> = builtin_shape(name, 10).unwrap();
            let (lo, hi) = mesh.bounding_box();
            for c in 0..3 {
                assert!(lo[c] >= -1.0 - 1e-12, "{name} lo {:?}", lo);
                assert!(hi[c] <= 1.0 + 1e-12, "{name} hi {:?}", hi);
            }
            assert!(mesh.total_area() > 0.1, "{name} area");
            for i in 0..mesh.triangles.len() {
                assert!(mesh.triangle_area(i) > 0.0, "{name} triangle {i} degenerate");
            }
        }
    }

    #[test]
    fn unknown_shape_is_rejected() {
        let err = builtin_shape::<f64>("pyramid", 8).unwrap_err();
        assert!(err.to_string().contains("pyramid"));
    }

    #[test]
    fn normalize_unit_box_centers_and_scales() {
        let mut mesh = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [4.0, 2.0, 1.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        mesh.normalize_unit_box();
        let (lo, hi) = mesh.bounding_box();
        assert_eq!(lo[0], -1.0);
        assert_eq!(hi[0], 1.0);
        assert!(hi[1] <= 1.0 && lo[1] >= -1.0);
    }
}
