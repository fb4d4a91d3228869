//! Binary kernel cache.
//!
//! Layout (all integers `u32`, all floats `f64`, little-endian):
//!
//! ```text
//! magic "MEQK" | version | config hash (32 bytes) | epochs T
//! | quad order | off-node rule (u8) | moment correction (u8)
//! for t in 1..T:
//!     N_t | M_u | N_{t+1}
//!     control nodes  [N_t × M_u]            row-major
//!     weights        [N_t × M_u × N_{t+1}]  row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DiscretizeOptions, DiscretizedKernel, EpochSlice, KernelRow, OffNodeRule, RowView};
use crate::error::{Error, Result};
use crate::model::Model;

pub const CACHE_MAGIC: &[u8; 4] = b"MEQK";
pub const CACHE_VERSION: u32 = 1;

pub fn write_cache(dk: &DiscretizedKernel, path: &Path, hash: &[u8; 32]) -> Result<()> {
    let io = |e: std::io::Error| Error::Cache(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let opts = dk.options();
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io);
    put(CACHE_MAGIC)?;
    put(&CACHE_VERSION.to_le_bytes())?;
    put(hash)?;
    put(&(dk.epochs() as u32).to_le_bytes())?;
    put(&(opts.quad_order as u32).to_le_bytes())?;
    put(&[(opts.off_node == OffNodeRule::Blend) as u8, opts.moment_correction as u8])?;
    for s in &dk.slices {
        for d in [s.n_states, s.n_controls, s.n_next] {
            put(&(d as u32).to_le_bytes())?;
        }
        for c in &s.controls {
            put(&c.to_le_bytes())?;
        }
        for i in 0..s.n_states {
            for j in 0..s.n_controls {
                for w in s.row(i, j).to_dense(s.n_next) {
                    put(&w.to_le_bytes())?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Cache("truncated file".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads a cached tabulation for `model`; fails on any hash, option or
/// dimension mismatch so a stale cache is never used silently.
pub fn read_cache(path: &Path, model: &Model, hash: &[u8; 32], quad_order: usize) -> Result<DiscretizedKernel> {
    let bytes = fs::read(path).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION as usize {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    if r.take(32)? != hash {
        return Err(Error::Cache("config hash mismatch".into()));
    }
    let epochs = r.u32()?;
    if epochs != model.epochs() {
        return Err(Error::Cache(format!("horizon {epochs} does not match model")));
    }
    let order = r.u32()?;
    if model.kernel.as_additive().is_some() && order != quad_order {
        return Err(Error::Cache(format!("quadrature order {order} does not match {quad_order}")));
    }
    let flags = r.take(2)?;
    let options = DiscretizeOptions {
        quad_order: order,
        off_node: if flags[0] == 1 { OffNodeRule::Blend } else { OffNodeRule::Requadrature },
        moment_correction: flags[1] == 1,
    };
    let mut slices = Vec::with_capacity(epochs - 1);
    for t in 1..epochs {
        let (n, mu, nn) = (r.u32()?, r.u32()?, r.u32()?);
        if n != model.grids.at(t).len() || nn != model.grids.at(t + 1).len() || mu != model.constraints.resolution() {
            return Err(Error::Cache(format!("dimensions at t={t} do not match model")));
        }
        let controls = (0..n * mu).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(n * mu);
        for _ in 0..n * mu {
            let dense = (0..nn).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let first = dense.iter().position(|&w| w != 0.0).unwrap_or(0);
            let last = dense.iter().rposition(|&w| w != 0.0).unwrap_or(first);
            rows.push((
                KernelRow {
                    start: first,
                    weights: dense[first..=last].to_vec(),
                },
                0.0,
            ));
        }
        slices.push(EpochSlice::from_rows(n, mu, nn, controls, rows));
    }
    if r.pos != bytes.len() {
        return Err(Error::Cache("trailing bytes".into()));
    }
    DiscretizedKernel::from_parts(model, slices, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::{lq_model, LqParams};

    #[test]
    fn round_trip_is_exact() {
        let model = lq_model(&LqParams::default()).unwrap().with_control_resolution(7).unwrap();
        let dk = model.discretize().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        let hash = [7u8; 32];
        write_cache(&dk, &path, &hash).unwrap();
        let back = read_cache(&path, &model, &hash, dk.options().quad_order).unwrap();
        for t in 1..model.epochs() {
            for i in [0, 10, 60] {
                assert_eq!(back.controls(t, i), dk.controls(t, i));
                for j in 0..7 {
                    assert_eq!(back.row(t, i, j).weights, dk.row(t, i, j).weights);
                }
            }
        }
        assert!(matches!(read_cache(&path, &model, &[0u8; 32], 16), Err(Error::Cache(_))));
    }
}
