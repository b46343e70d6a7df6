//! The staggered (MAC) grid: face-normal velocity samples, cell-centered
//! pressures, binary field dumps and boundary-aware interpolation.

use crate::cloud::Domain;
use crate::error::{Error, Result};
use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Cube-grid velocity (face samples) and pressure (cell samples).
///
/// Component `u` lives on x-normal faces with dimensions `(k+1, k, k)`,
/// `v` on `(k, k+1, k)`, `w` on `(k, k, k+1)`, pressure on `(k, k, k)`;
/// all arrays are stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct StaggeredField {
    pub k: usize,
    pub h: f64,
    pub domain: Domain,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub p: Vec<f64>,
}

impl StaggeredField {
    pub fn zeros(domain: Domain, k: usize) -> Self {
        let h = domain.side_length / k as f64;
        StaggeredField {
            k,
            h,
            domain,
            u: vec![0.0; (k + 1) * k * k],
            v: vec![0.0; k * (k + 1) * k],
            w: vec![0.0; k * k * (k + 1)],
            p: vec![0.0; k * k * k],
        }
    }

    pub fn component(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.u,
            1 => &self.v,
            2 => &self.w,
            _ => panic!("component out of range: {c}"),
        }
    }

    pub fn component_mut(&mut self, c: usize) -> &mut Vec<f64> {
        match c {
            0 => &mut self.u,
            1 => &mut self.v,
            2 => &mut self.w,
            _ => panic!("component out of range: {c}"),
        }
    }

    /// Dimensions of a velocity component array.
    pub fn dims(&self, c: usize) -> (usize, usize, usize) {
        let k = self.k;
        match c {
            0 => (k + 1, k, k),
            1 => (k, k + 1, k),
            2 => (k, k, k + 1),
            _ => panic!("component out of range: {c}"),
        }
    }

    /// Physical position of face sample `(i, j, l)` of component `c`.
    pub fn face_position(&self, c: usize, i: usize, j: usize, l: usize) -> Vec3 {
        let h = self.h;
        let o = self.domain.origin;
        let (a, b, d) = (i as f64, j as f64, l as f64);
        match c {
            0 => o + Vec3::new(a * h, (b + 0.5) * h, (d + 0.5) * h),
            1 => o + Vec3::new((a + 0.5) * h, b * h, (d + 0.5) * h),
            2 => o + Vec3::new((a + 0.5) * h, (b + 0.5) * h, d * h),
            _ => panic!("component out of range: {c}"),
        }
    }

    pub fn cell_center(&self, i: usize, j: usize, l: usize) -> Vec3 {
        self.domain.origin
            + Vec3::new(
                (i as f64 + 0.5) * self.h,
                (j as f64 + 0.5) * self.h,
                (l as f64 + 0.5) * self.h,
            )
    }

    pub fn cell_index(&self, i: usize, j: usize, l: usize) -> usize {
        (l * self.k + j) * self.k + i
    }

    /// Cell-averaged velocity at cell `(i, j, l)`.
    pub fn cell_velocity(&self, i: usize, j: usize, l: usize) -> Vec3 {
        let k = self.k;
        let iu = |i: usize, j: usize, l: usize| (l * k + j) * (k + 1) + i;
        let iv = |i: usize, j: usize, l: usize| (l * (k + 1) + j) * k + i;
        let iw = |i: usize, j: usize, l: usize| (l * k + j) * k + i;
        Vec3::new(
            0.5 * (self.u[iu(i, j, l)] + self.u[iu(i + 1, j, l)]),
            0.5 * (self.v[iv(i, j, l)] + self.v[iv(i, j + 1, l)]),
            0.5 * (self.w[iw(i, j, l)] + self.w[iw(i, j, l + 1)]),
        )
    }

    pub fn mean_pressure(&self) -> f64 {
        self.p.iter().sum::<f64>() / self.p.len() as f64
    }

    /// Max-norm discrete divergence over all cells.
    pub fn max_divergence(&self) -> f64 {
        let k = self.k;
        let mut worst = 0.0_f64;
        for l in 0..k {
            for j in 0..k {
                for i in 0..k {
                    let iu = (l * k + j) * (k + 1) + i;
                    let iv = (l * (k + 1) + j) * k + i;
                    let iw = (l * k + j) * k + i;
                    let div = (self.u[iu + 1] - self.u[iu]
                        + self.v[iv + k] - self.v[iv]
                        + self.w[iw + k * k] - self.w[iw])
                        / self.h;
                    worst = worst.max(div.abs());
                }
            }
        }
        worst
    }

    /// Velocity at an arbitrary point by per-component piecewise-linear
    /// interpolation. `wall` supplies the tangential boundary values the
    /// staggered arrays do not store (the normal components on each wall
    /// are stored exactly).
    pub fn interpolate_velocity<F>(&self, x: Vec3, wall: F) -> Vec3
    where
        F: Fn(Vec3) -> Vec3,
    {
        let mut out = Vec3::ZERO;
        for c in 0..3 {
            out.set(c, self.interpolate_component(c, x, &wall));
        }
        out
    }

    fn interpolate_component<F>(&self, c: usize, x: Vec3, wall: &F) -> f64
    where
        F: Fn(Vec3) -> Vec3,
    {
        let k = self.k;
        let h = self.h;
        let t = (x - self.domain.origin) / h;
        // Per-axis knot layout: the normal axis has samples at 0..k (on the
        // walls), tangential axes at half-offsets with the wall value as an
        // extra knot at each end.
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut at_wall = [false; 3]; // true if segment touches a wall knot
        let mut wall_side = [0usize; 3];
        for axis in 0..3 {
            let ta = t.get(axis);
            if axis == c {
                let a = ta.clamp(0.0, k as f64);
                let i0 = (a.floor() as usize).min(k - 1);
                idx[axis] = i0;
                frac[axis] = a - i0 as f64;
            } else {
                let b = ta - 0.5;
                if b <= 0.0 {
                    at_wall[axis] = true;
                    wall_side[axis] = 0;
                    idx[axis] = 0;
                    frac[axis] = (ta / 0.5).clamp(0.0, 1.0); // 0 at wall, 1 at first sample
                } else if b >= (k - 1) as f64 {
                    at_wall[axis] = true;
                    wall_side[axis] = 1;
                    idx[axis] = k - 1;
                    frac[axis] = ((k as f64 - ta) / 0.5).clamp(0.0, 1.0);
                } else {
                    let i0 = b.floor() as usize;
                    idx[axis] = i0;
                    frac[axis] = b - i0 as f64;
                }
            }
        }

        let arr = self.component(c);
        let (nx, ny, _) = self.dims(c);
        let sample = |i: usize, j: usize, l: usize| arr[(l * ny + j) * nx + i];
        // Gather the 8 corner values, substituting wall values where a
        // tangential axis hit its wall segment.
        let mut value = 0.0;
        for corner in 0..8usize {
            let mut widx = [0usize; 3];
            let mut weight = 1.0;
            let mut use_wall = false;
            let mut wall_point = x;
            for axis in 0..3 {
                let hi = (corner >> axis) & 1 == 1;
                if at_wall[axis] {
                    // frac: weight of the sample side
                    if hi {
                        widx[axis] = idx[axis];
                        weight *= frac[axis];
                    } else {
                        use_wall = true;
                        weight *= 1.0 - frac[axis];
                        let wall_coord = if wall_side[axis] == 0 {
                            self.domain.origin.get(axis)
                        } else {
                            self.domain.origin.get(axis) + self.domain.side_length
                        };
                        wall_point.set(axis, wall_coord);
                        widx[axis] = idx[axis];
                    }
                } else {
                    let i = idx[axis] + usize::from(hi);
                    widx[axis] = i;
                    weight *= if hi { frac[axis] } else { 1.0 - frac[axis] };
                }
            }
            if weight == 0.0 {
                continue;
            }
            let val = if use_wall {
                // snap the in-plane coordinates of the wall point to the
                // corner's sample position for bilinear consistency
                let mut wp = wall_point;
                for axis in 0..3 {
                    if !(at_wall[axis] && (corner >> axis) & 1 == 0) {
                        let pos = self.knot_position(c, axis, widx[axis]);
                        wp.set(axis, pos);
                    }
                }
                wall(wp).get(c)
            } else {
                sample(widx[0], widx[1], widx[2])
            };
            value += weight * val;
        }
        value
    }

    fn knot_position(&self, c: usize, axis: usize, i: usize) -> f64 {
        let o = self.domain.origin.get(axis);
        if axis == c {
            o + i as f64 * self.h
        } else {
            o + (i as f64 + 0.5) * self.h
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    resolution: usize,
    spacing: f64,
    domain: Domain,
    component_order: String,
    lengths: [usize; 4],
}

/// Write `<base>.json` (header) and `<base>.bin` (little-endian f64 payload,
/// components in u,v,w,p order, each row-major x-fastest). Round-trips
/// bit-exactly.
pub fn write_field(field: &StaggeredField, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let header = FieldHeader {
        resolution: field.k,
        spacing: field.h,
        domain: field.domain,
        component_order: "u,v,w,p".to_string(),
        lengths: [field.u.len(), field.v.len(), field.w.len(), field.p.len()],
    };
    let json_path = base.with_extension("json");
    let bin_path = base.with_extension("bin");
    serde_json::to_writer_pretty(std::fs::File::create(&json_path)?, &header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
    for arr in [&field.u, &field.v, &field.w, &field.p] {
        for &x in arr.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok((json_path, bin_path))
}

/// Read a field pair written by [`write_field`].
pub fn read_field(base: &Path) -> Result<StaggeredField> {
    let header: FieldHeader =
        serde_json::from_reader(std::fs::File::open(base.with_extension("json"))?)?;
    let k = header.resolution;
    let expect = [(k + 1) * k * k, k * (k + 1) * k, k * k * (k + 1), k * k * k];
    if header.lengths != expect {
        return Err(Error::InvalidInput(format!(
            "field header lengths {:?} inconsistent with resolution {k}",
            header.lengths
        )));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(base.with_extension("bin"))?.read_to_end(&mut bytes)?;
    let total: usize = header.lengths.iter().sum();
    if bytes.len() != total * 8 {
        return Err(Error::InvalidInput(format!(
            "field payload holds {} bytes, expected {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    Ok(StaggeredField {
        k,
        h: header.spacing,
        domain: header.domain,
        u: take(header.lengths[0]),
        v: take(header.lengths[1]),
        w: take(header.lengths[2]),
        p: take(header.lengths[3]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_field(domain: Domain, k: usize) -> StaggeredField {
        // u = (x, -y, 0), p = x + 2y - z
        let mut f = StaggeredField::zeros(domain, k);
        for c in 0..3 {
            let (nx, ny, nz) = f.dims(c);
            for l in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let pos = f.face_position(c, i, j, l);
                        let val = match c {
                            0 => pos.x,
                            1 => -pos.y,
                            _ => 0.0,
                        };
                        f.component_mut(c)[(l * ny + j) * nx + i] = val;
                    }
                }
            }
        }
        for l in 0..k {
            for j in 0..k {
                for i in 0..k {
                    let cpos = f.cell_center(i, j, l);
                    let ci = f.cell_index(i, j, l);
                    f.p[ci] = cpos.x + 2.0 * cpos.y - cpos.z;
                }
            }
        }
        f
    }

    #[test]
    fn divergence_of_linear_solenoidal_field_is_zero() {
        let f = linear_field(Domain::unit(), 8);
        assert!(f.max_divergence() < 1e-13);
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let f = linear_field(Domain::unit(), 8);
        let wall = |x: Vec3| Vec3::new(x.x, -x.y, 0.0);
        for probe in [
            Vec3::new(0.37, 0.51, 0.73),
            Vec3::new(0.01, 0.5, 0.99),
            Vec3::new(0.0, 0.0, 0.5),
            Vec3::new(1.0, 0.33, 0.02),
        ] {
            let got = f.interpolate_velocity(probe, wall);
            let expect = Vec3::new(probe.x, -probe.y, 0.0);
            assert!(
                (got - expect).norm() < 1e-12,
                "at {probe:?}: got {got:?} expected {expect:?}"
            );
        }
    }

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let mut f = linear_field(Domain::unit(), 5);
        f.u[17] = 0.1 + 0.2; // non-representable decimal
        f.p[3] = f64::MIN_POSITIVE;
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("field");
        write_field(&f, &base).unwrap();
        let back = read_field(&base).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn cell_velocity_averages_faces() {
        let f = linear_field(Domain::unit(), 4);
        let cv = f.cell_velocity(1, 2, 3);
        let center = f.cell_center(1, 2, 3);
        assert_relative_eq!(cv.x, center.x, max_relative = 1e-14);
        assert_relative_eq!(cv.y, -center.y, max_relative = 1e-14);
    }
}
