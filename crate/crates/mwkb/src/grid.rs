//! Complex-valued fields over rectangular phase-space grids (n = 1), with
//! per-point sheet metadata and classification, plus the self-describing
//! binary container and CSV export.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{MwkbError, Result};

const MAGIC: &[u8; 4] = b"MWKB";
const VERSION: u32 = 1;

/// Uniform grid over (q, p); values are stored q-major: index = iq * np + ip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub q0: f64,
    pub dq: f64,
    pub nq: usize,
    pub p0: f64,
    pub dp: f64,
    pub np: usize,
}

impl GridAxes {
    /// Endpoint-exclusive uniform cover of [qmin,qmax) x [pmin,pmax).
    pub fn new(qmin: f64, qmax: f64, nq: usize, pmin: f64, pmax: f64, np: usize) -> Self {
        Self {
            q0: qmin,
            dq: (qmax - qmin) / nq as f64,
            nq,
            p0: pmin,
            dp: (pmax - pmin) / np as f64,
            np,
        }
    }

    /// Square grid centered at the origin with half-width l.
    pub fn centered(l: f64, n: usize) -> Self {
        Self::new(-l, l, n, -l, l, n)
    }

    pub fn q(&self, iq: usize) -> f64 {
        self.q0 + iq as f64 * self.dq
    }

    pub fn p(&self, ip: usize) -> f64 {
        self.p0 + ip as f64 * self.dp
    }

    pub fn len(&self) -> usize {
        self.nq * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, iq: usize, ip: usize) -> usize {
        iq * self.np + ip
    }

    /// Nearest grid index pair, or None when outside.
    pub fn locate(&self, q: f64, p: f64) -> Option<(usize, usize)> {
        let iq = ((q - self.q0) / self.dq).round();
        let ip = ((p - self.p0) / self.dp).round();
        if iq < 0.0 || ip < 0.0 || iq >= self.nq as f64 || ip >= self.np as f64 {
            return None;
        }
        Some((iq as usize, ip as usize))
    }
}

/// Per-point classification against the advanced manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum PointClass {
    NonFocal = 0,
    Caustic = 1,
    Forbidden = 2,
}

/// One WKB branch contribution at a grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SheetValue {
    pub sheet_id: u32,
    pub phase: f64,
    pub amplitude: f64,
    pub maslov: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeta {
    pub t: f64,
    pub hbar: f64,
    /// "u" | "rho" | "wigner" | custom
    pub kind: String,
    pub scenario_hash: String,
}

/// A complex field over a phase-space grid.
#[derive(Debug, Clone)]
pub struct SymbolGrid {
    pub axes: GridAxes,
    pub values: Vec<Complex64>,
    pub class: Vec<PointClass>,
    /// Per-point sheet lists when the field came from a WKB assembly.
    pub sheets: Option<Vec<Vec<SheetValue>>>,
    pub meta: GridMeta,
}

impl SymbolGrid {
    pub fn zeros(axes: GridAxes, meta: GridMeta) -> Self {
        let n = axes.len();
        Self {
            axes,
            values: vec![Complex64::new(0.0, 0.0); n],
            class: vec![PointClass::NonFocal; n],
            sheets: None,
            meta,
        }
    }

    pub fn from_fn(axes: GridAxes, meta: GridMeta, mut f: impl FnMut(f64, f64) -> Complex64) -> Self {
        let mut g = Self::zeros(axes, meta);
        for iq in 0..g.axes.nq {
            for ip in 0..g.axes.np {
                let idx = g.axes.index(iq, ip);
                g.values[idx] = f(g.axes.q(iq), g.axes.p(ip));
            }
        }
        g
    }

    pub fn value_at(&self, iq: usize, ip: usize) -> Complex64 {
        self.values[self.axes.index(iq, ip)]
    }

    /// Largest |value| on the outermost frame, relative to the global max.
    pub fn boundary_magnitude(&self) -> f64 {
        let max = self
            .values
            .iter()
            .fold(0.0f64, |a, v| a.max(v.norm()))
            .max(1e-300);
        let mut edge = 0.0f64;
        for iq in 0..self.axes.nq {
            edge = edge.max(self.value_at(iq, 0).norm());
            edge = edge.max(self.value_at(iq, self.axes.np - 1).norm());
        }
        for ip in 0..self.axes.np {
            edge = edge.max(self.value_at(0, ip).norm());
            edge = edge.max(self.value_at(self.axes.nq - 1, ip).norm());
        }
        edge / max
    }

    /// Maximum |self - other| over points where both are NonFocal, restricted
    /// to an interior window |q| <= window_q, |p| <= window_p.
    pub fn max_abs_diff(&self, other: &SymbolGrid, window_q: f64, window_p: f64) -> f64 {
        assert_eq!(self.axes, other.axes, "grids must match");
        let mut worst = 0.0f64;
        for iq in 0..self.axes.nq {
            for ip in 0..self.axes.np {
                if self.axes.q(iq).abs() > window_q || self.axes.p(ip).abs() > window_p {
                    continue;
                }
                let idx = self.axes.index(iq, ip);
                if self.class[idx] != PointClass::NonFocal
                    || other.class[idx] != PointClass::NonFocal
                {
                    continue;
                }
                worst = worst.max((self.values[idx] - other.values[idx]).norm());
            }
        }
        worst
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let mut buf: Vec<u8> = Vec::with_capacity(128 + 17 * self.values.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes()); // dof
        buf.extend_from_slice(&(self.axes.nq as u64).to_le_bytes());
        buf.extend_from_slice(&(self.axes.np as u64).to_le_bytes());
        for v in [
            self.axes.q0,
            self.axes.dq,
            self.axes.p0,
            self.axes.dp,
            self.meta.t,
            self.meta.hbar,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let kind_bytes = self.meta.kind.as_bytes();
        buf.extend_from_slice(&(kind_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(kind_bytes);
        let hash_bytes = self.meta.scenario_hash.as_bytes();
        buf.extend_from_slice(&(hash_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(hash_bytes);
        for v in &self.values {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
        for c in &self.class {
            buf.push(*c as u8);
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(MwkbError::BadGridFile("truncated".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(MwkbError::BadGridFile("bad magic".into()));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != VERSION {
            return Err(MwkbError::BadGridFile(format!("unsupported version {ver}")));
        }
        let dof = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if dof != 1 {
            return Err(MwkbError::BadGridFile(format!("unsupported dof {dof}")));
        }
        let nq = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let np = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut fs = [0.0f64; 6];
        for v in fs.iter_mut() {
            *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        }
        let klen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let kind = String::from_utf8(take(&mut pos, klen)?.to_vec())
            .map_err(|_| MwkbError::BadGridFile("bad kind string".into()))?;
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let hash = String::from_utf8(take(&mut pos, hlen)?.to_vec())
            .map_err(|_| MwkbError::BadGridFile("bad hash string".into()))?;
        let n = nq * np;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let re = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let im = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            values.push(Complex64::new(re, im));
        }
        let mut class = Vec::with_capacity(n);
        for _ in 0..n {
            class.push(match take(&mut pos, 1)?[0] {
                0 => PointClass::NonFocal,
                1 => PointClass::Caustic,
                2 => PointClass::Forbidden,
                other => {
                    return Err(MwkbError::BadGridFile(format!(
                        "bad classification byte {other}"
                    )))
                }
            });
        }
        Ok(Self {
            axes: GridAxes {
                q0: fs[0],
                dq: fs[1],
                nq,
                p0: fs[2],
                dp: fs[3],
                np,
            },
            values,
            class,
            sheets: None,
            meta: GridMeta {
                t: fs[4],
                hbar: fs[5],
                kind,
                scenario_hash: hash,
            },
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "q,p,re,im,class")?;
        for iq in 0..self.axes.nq {
            for ip in 0..self.axes.np {
                let idx = self.axes.index(iq, ip);
                writeln!(
                    f,
                    "{:.17e},{:.17e},{:.17e},{:.17e},{}",
                    self.axes.q(iq),
                    self.axes.p(ip),
                    self.values[idx].re,
                    self.values[idx].im,
                    self.class[idx] as u8
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_binary() {
        let axes = GridAxes::centered(3.0, 8);
        let meta = GridMeta {
            t: 1.5,
            hbar: 0.5,
            kind: "rho".into(),
            scenario_hash: "deadbeef".into(),
        };
        let mut g = SymbolGrid::from_fn(axes, meta, |q, p| Complex64::new(q * p, q - p));
        g.class[5] = PointClass::Caustic;
        g.class[10] = PointClass::Forbidden;
        let dir = std::env::temp_dir().join("mwkb_grid_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.mwkb");
        g.write_binary(&path).unwrap();
        let back = SymbolGrid::read_binary(&path).unwrap();
        assert_eq!(back.axes, g.axes);
        assert_eq!(back.values, g.values);
        assert_eq!(back.class, g.class);
        assert_eq!(back.meta.kind, "rho");
        assert_eq!(back.meta.scenario_hash, "deadbeef");
        assert_eq!(back.meta.t, 1.5);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("mwkb_grid_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.mwkb");
        std::fs::write(&path, b"NOPE123456").unwrap();
        assert!(matches!(
            SymbolGrid::read_binary(&path),
            Err(MwkbError::BadGridFile(_))
        ));
    }

    #[test]
    fn locate_and_index() {
        let axes = GridAxes::new(-2.0, 2.0, 4, -1.0, 1.0, 4);
        assert_eq!(axes.locate(-2.0, -1.0), Some((0, 0)));
        assert_eq!(axes.locate(-1.0, 0.0), Some((1, 2)));
        assert_eq!(axes.locate(5.0, 0.0), None);
    }
}
