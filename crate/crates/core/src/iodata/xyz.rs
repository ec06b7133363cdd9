//! Plain-text point clouds: one "x y z" line per point, '#' comments.

use std::fs;
use std::path::Path;

use crate::geometry::PointCloud;
use crate::scalar::Real;

use super::IoError;

pub fn read_xyz<F: Real>(path: &Path) -> Result<PointCloud<F>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(IoError::Parse {
                line,
                detail: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [F::zero(); 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            let v: f64 = field.parse().map_err(|_| IoError::Parse {
                line,
                detail: format!("bad number {field:?}"),
            })?;
            *slot = F::from_f64(v).ok_or(IoError::Parse {
                line,
                detail: format!("value {field} out of range"),
            })?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(IoError::Parse {
            line: text.lines().count(),
            detail: "no points".into(),
        });
    }
    Ok(PointCloud::new(points))
}

/// 17 significant digits, enough for a bit-exact 64-bit round trip.
pub fn write_xyz<F: Real>(path: &Path, cloud: &PointCloud<F>) -> Result<(), IoError> {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in &cloud.points {
        for (i, v) in p.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{:.16e}", v.to_f64().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
