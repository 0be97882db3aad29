//! Compressed N:M storage.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PNMC"
//! 4       2     version (u16) = 1
//! 6       4     rows (u32)
//! 10      4     cols (u32)
//! 14      1     N, zeros per group (u8)
//! 15      1     M, group width (u8)
//! 16      4·K   retained values, f32, row-major then group-major
//! 16+4K   K     within-group position of each retained value (u8)
//! ```
//!
//! with `K = rows · (cols / M) · (M − N)`. Positions inside a group are
//! stored in increasing order.

use std::path::Path;

use super::mask::{is_occupied, NmConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CODEC_MAGIC: [u8; 4] = *b"PNMC";
pub const CODEC_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedNm {
    pub rows: usize,
    pub cols: usize,
    pub cfg: NmConfig,
    pub values: Vec<f32>,
    pub indices: Vec<u8>,
}

impl CompressedNm {
    fn retained_len(rows: usize, cols: usize, cfg: NmConfig) -> usize {
        rows * (cols / cfg.group) * cfg.keep()
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.values.len() * 4 + self.indices.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&CODEC_MAGIC);
        out.extend_from_slice(&CODEC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(self.cfg.n_zero as u8);
        out.push(self.cfg.group as u8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.indices);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Codec(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != CODEC_MAGIC {
            return Err(Error::Codec("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CODEC_VERSION {
            return Err(Error::Codec(format!("unsupported version {version}")));
        }
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let cfg = NmConfig::new(bytes[14] as usize, bytes[15] as usize)?;
        if rows == 0 || cols == 0 || !cols.is_multiple_of(cfg.group) {
            return Err(Error::Codec(format!("bad shape {rows}x{cols} for {cfg}")));
        }
        let k = Self::retained_len(rows, cols, cfg);
        let expected = HEADER_LEN + 5 * k;
        if bytes.len() != expected {
            return Err(Error::Codec(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let values = bytes[HEADER_LEN..HEADER_LEN + 4 * k]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let indices = bytes[HEADER_LEN + 4 * k..].to_vec();
        let c = CompressedNm {
            rows,
            cols,
            cfg,
            values,
            indices,
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let keep = self.cfg.keep();
        let k = Self::retained_len(self.rows, self.cols, self.cfg);
        if self.values.len() != k || self.indices.len() != k {
            return Err(Error::Codec(format!(
                "{} values / {} indices, expected {k}",
                self.values.len(),
                self.indices.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Codec(format!("non-finite value at {i}")));
        }
        for (gi, pos) in self.indices.chunks(keep).enumerate() {
            let increasing = pos.windows(2).all(|w| w[0] < w[1]);
            if !increasing || pos.iter().any(|&p| p as usize >= self.cfg.group) {
                return Err(Error::Codec(format!("invalid positions {pos:?} in group {gi}")));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Packs an N:M-valid masked matrix. Groups with fewer occupied entries than
/// `M − N` are padded with the lowest free positions.
pub fn compress_nm(w_masked: &Matrix<f32>, cfg: NmConfig) -> Result<CompressedNm> {
    cfg.check_divides(w_masked.cols(), "the column count")?;
    let keep = cfg.keep();
    let k = CompressedNm::retained_len(w_masked.rows(), w_masked.cols(), cfg);
    let mut values = Vec::with_capacity(k);
    let mut indices = Vec::with_capacity(k);
    let mut chosen = Vec::with_capacity(cfg.group);
    for r in 0..w_masked.rows() {
        for (g, chunk) in w_masked.row(r).chunks(cfg.group).enumerate() {
            chosen.clear();
            chosen.extend((0..cfg.group).filter(|&p| is_occupied(chunk[p])));
            if chosen.len() > keep {
                return Err(Error::NmViolation {
                    row: r,
                    group: g,
                    detail: format!("{} nonzeros, at most {keep} allowed", chosen.len()),
                });
            }
            let mut p = 0;
            while chosen.len() < keep {
                if !chosen.contains(&p) {
                    chosen.push(p);
                }
                p += 1;
            }
            chosen.sort_unstable();
            for &p in &chosen {
                values.push(chunk[p]);
                indices.push(p as u8);
            }
        }
    }
    Ok(CompressedNm {
        rows: w_masked.rows(),
        cols: w_masked.cols(),
        cfg,
        values,
        indices,
    })
}

pub fn decompress_nm(c: &CompressedNm) -> Result<Matrix<f32>> {
    c.validate()?;
    let keep = c.cfg.keep();
    let groups_per_row = c.cols / c.cfg.group;
    let mut out = Matrix::zeros(c.rows, c.cols);
    for (gi, (vals, pos)) in c.values.chunks(keep).zip(c.indices.chunks(keep)).enumerate() {
        let r = gi / groups_per_row;
        let base = (gi % groups_per_row) * c.cfg.group;
        for (&v, &p) in vals.iter().zip(pos) {
            out[(r, base + p as usize)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sparsity::{magnitude_scores, nm_mask};

    fn random_masked(rng: &mut Rng, rows: usize, cols: usize, cfg: NmConfig) -> Matrix<f32> {
        let w = rng.gaussian_matrix::<f32>(rows, cols, 1.0);
        let m = nm_mask(&magnitude_scores(&w).unwrap(), cfg).unwrap();
        m.apply(&w).unwrap()
    }

    #[test]
    fn zero_matrix_uses_lowest_positions() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let c = compress_nm(&Matrix::zeros(2, 8), cfg).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert_eq!(c.indices, vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let mut rng = Rng::new(9);
        let w = random_masked(&mut rng, 4, 8, cfg);
        let c = compress_nm(&w, cfg).unwrap();
        let back = CompressedNm::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let d = decompress_nm(&back).unwrap();
        for (a, b) in d.as_slice().iter().zip(w.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let c = compress_nm(&Matrix::zeros(1, 4), cfg).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"PNMC");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[1, 0, 0, 0]);
        assert_eq!(&b[10..14], &[4, 0, 0, 0]);
        assert_eq!(&b[14..16], &[2, 4]);
        assert_eq!(b.len(), 16 + 2 * 4 + 2);
    }

    #[test]
    fn half_of_dense_at_two_four() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let c = compress_nm(&Matrix::zeros(4096, 4096), cfg).unwrap();
        assert_eq!(c.values.len(), 4096 * 4096 / 2);
        assert_eq!(c.indices.len(), 4096 * 4096 / 2);
    }

    #[test]
    fn violation_names_first_offender() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let mut w = Matrix::<f32>::zeros(3, 8);
        w.row_mut(1)[4..7].copy_from_slice(&[1.0, 2.0, 3.0]);
        match compress_nm(&w, cfg) {
            Err(Error::NmViolation { row: 1, group: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let cfg = NmConfig::new(2, 4).unwrap();
        let mut rng = Rng::new(1);
        let c = compress_nm(&random_masked(&mut rng, 2, 8, cfg), cfg).unwrap();
        let bytes = c.to_bytes();
        assert!(CompressedNm::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CompressedNm::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] = 9;
        assert!(CompressedNm::from_bytes(&bad).is_err());
    }
}
