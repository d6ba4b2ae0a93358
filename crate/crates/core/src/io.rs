//! Field container and CSV writers.
//!
//! Container layout (all little-endian): the 8-byte magic `HMKVFLD1`,
//! `u32` rank, then per axis `u64` cell count, `f64` lower corner and `f64`
//! spacing, then `f64` β, ε, t, `u64` value count and the row-major `f64`
//! cell values.

use std::io::{Read, Write};

use crate::chain_dynamics::{ChainState, EmpiricalMoments};
use crate::error::{Error, Result};
use crate::grid::TensorGrid;

pub const MAGIC: &[u8; 8] = b"HMKVFLD1";

/// Self-describing dump of a cell-centred field on a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldContainer {
    pub dims: Vec<usize>,
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    pub beta: f64,
    pub eps: f64,
    pub time: f64,
    pub values: Vec<f64>,
}

impl FieldContainer {
    pub fn new(grid: &TensorGrid, beta: f64, eps: f64, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} values for {} cells", values.len(), grid.len())));
        }
        Ok(Self {
            dims: grid.shape().to_vec(),
            lower: grid.lower().to_vec(),
            spacing: grid.spacing().to_vec(),
            beta,
            eps,
            time,
            values,
        })
    }

    pub fn grid(&self) -> Result<TensorGrid> {
        let hi: Vec<f64> = (0..self.dims.len()).map(|a| self.lower[a] + self.spacing[a] * self.dims[a] as f64).collect();
        TensorGrid::new(&self.lower, &hi, &self.dims)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for a in 0..self.dims.len() {
            w.write_all(&(self.dims[a] as u64).to_le_bytes())?;
            w.write_all(&self.lower[a].to_le_bytes())?;
            w.write_all(&self.spacing[a].to_le_bytes())?;
        }
        for x in [self.beta, self.eps, self.time] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for x in &self.values {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 64 {
            return Err(Error::Container(format!("implausible rank {rank}")));
        }
        let (mut dims, mut lower, mut spacing) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
            lower.push(read_f64(&mut r)?);
            spacing.push(read_f64(&mut r)?);
        }
        let beta = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let time = read_f64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let expect = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expect != Some(n) {
            return Err(Error::Container(format!("value count {n} does not match dims {dims:?}")));
        }
        let mut bytes = vec![0u8; n * 8];
        read_exact(&mut r, &mut bytes)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::Container(e.to_string()))? != 0 {
            return Err(Error::Container("trailing bytes after payload".into()));
        }
        Ok(Self { dims, lower, spacing, beta, eps, time, values })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Container(format!("truncated: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Rows `time, chain_id, bead_id, r…, v…`.
pub fn write_snapshot_csv<W: Write>(mut w: W, time: f64, chains: &[ChainState], d: usize, header: bool) -> std::io::Result<()> {
    if header {
        write!(w, "time,chain_id,bead_id")?;
        for k in 0..d {
            write!(w, ",r{k}")?;
        }
        for k in 0..d {
            write!(w, ",v{k}")?;
        }
        writeln!(w)?;
    }
    for (id, c) in chains.iter().enumerate() {
        for j in 0..c.r.len() / d {
            write!(w, "{time:e},{id},{j}")?;
            for k in 0..d {
                write!(w, ",{:.17e}", c.r[j * d + k])?;
            }
            for k in 0..d {
                write!(w, ",{:.17e}", c.v[j * d + k])?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Rows `time, i0…, count, rho_bar, J…, P…`; empty bins leave the moment
/// columns blank.
pub fn write_moments_csv<W: Write>(mut w: W, time: f64, m: &EmpiricalMoments, header: bool) -> std::io::Result<()> {
    let n = m.grid.ndim();
    if header {
        write!(w, "time")?;
        for a in 0..n {
            write!(w, ",i{a}")?;
        }
        write!(w, ",count,rho_bar")?;
        for a in 0..n {
            write!(w, ",J{a}")?;
        }
        for a in 0..n {
            for b in 0..n {
                write!(w, ",P{a}{b}")?;
            }
        }
        writeln!(w)?;
    }
    let mut idx = vec![0; n];
    for c in 0..m.grid.len() {
        m.grid.unflat(c, &mut idx);
        write!(w, "{time:e}")?;
        for i in &idx {
            write!(w, ",{i}")?;
        }
        write!(w, ",{},{:.17e}", m.counts[c], m.rho_bar[c])?;
        match (&m.current[c], &m.second[c]) {
            (Some(j), Some(p)) => {
                for x in j.iter().chain(p) {
                    write!(w, ",{x:.17e}")?;
                }
            }
            _ => {
                for _ in 0..n + n * n {
                    write!(w, ",")?;
                }
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_dynamics::empirical_moments;

    #[test]
    fn container_round_trip() {
        let g = TensorGrid::new(&[-1.0, 0.0], &[1.0, 3.0], &[4, 3]).unwrap();
        let vals: Vec<f64> = (0..12).map(|k| k as f64 * 0.37 - 1.0).collect();
        let c = FieldContainer::new(&g, 1.5, 0.25, 2.0, vals).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 2 * 24 + 24 + 8 + 12 * 8);
        let back = FieldContainer::read_from(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert!(back.grid().unwrap().same_layout(&g));
    }

    #[test]
    fn container_rejects_corruption() {
        let g = TensorGrid::uniform(0.0, 1.0, 3, 1).unwrap();
        let c = FieldContainer::new(&g, 1.0, 1.0, 0.0, vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(FieldContainer::read_from(&bad[..]), Err(Error::Container(_))));
        assert!(FieldContainer::read_from(&buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(FieldContainer::read_from(&long[..]).is_err());
        assert!(FieldContainer::new(&g, 1.0, 1.0, 0.0, vec![1.0]).is_err());
    }

    #[test]
    fn csv_shapes() {
        let chains = vec![
            ChainState { r: vec![0.1, 0.2, -0.3, 0.4], v: vec![1.0, 0.0, 0.0, -1.0] },
            ChainState { r: vec![-0.5, 0.5, 0.5, -0.5], v: vec![0.0; 4] },
        ];
        let mut out = Vec::new();
        write_snapshot_csv(&mut out, 0.5, &chains, 2, true).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().count(), 5);
        assert_eq!(s.lines().next().unwrap(), "time,chain_id,bead_id,r0,r1,v0,v1");
        assert!(s.lines().nth(2).unwrap().starts_with("5e-1,0,1,"));

        let g = TensorGrid::uniform(-1.0, 1.0, 2, 4).unwrap();
        let m = empirical_moments(&chains, &g, 1.0).unwrap();
        let mut out = Vec::new();
        write_moments_csv(&mut out, 0.0, &m, true).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().count(), 17);
        let cols = s.lines().next().unwrap().split(',').count();
        assert!(s.lines().all(|l| l.split(',').count() == cols));
    }
}
