//! Binary weight file.
//!
//! Layout, all little-endian: magic `OMOE`, `u32` version, then `u64` d, N,
//! N_r, N_c, d_ffn, K. Seven matrices follow in the order W, V, W_r, W_c,
//! W_gate, W_up, W_down, each as `u64` rows, `u64` cols and row-major `f32`
//! data. Weights are always stored in 32 bits.

use std::io::Write;
use std::path::Path;

use omnimoe::experts::{ExpertStore, LayerDims, OmniLayer, SharedMlp};
use omnimoe::router::RouterParams;
use omnimoe::tensor::{Matrix, Scalar};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"OMOE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 8;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("not a weight file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated weight file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("shape mismatch in {matrix}: header implies {expected:?}, file records {found:?}")]
    ShapeMismatch { matrix: &'static str, expected: (usize, usize), found: (usize, usize) },
    #[error("{0} trailing bytes after the last matrix")]
    TrailingBytes(usize),
    #[error("inconsistent header: {0}")]
    Header(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn encode<T: Scalar>(layer: &OmniLayer<T>) -> Vec<u8> {
    let dims = layer.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [dims.d, dims.n_experts(), dims.n_rows, dims.n_cols, dims.d_ffn, dims.k] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for m in [
        &layer.store.w_in,
        &layer.store.w_out,
        &layer.router.w_row,
        &layer.router.w_col,
        &layer.shared.w_gate,
        &layer.shared.w_up,
        &layer.shared.w_down,
    ] {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(WeightError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize, WeightError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| WeightError::Header(format!("value {v} does not fit in memory")))
    }

    fn matrix(&mut self, name: &'static str, expected: (usize, usize)) -> Result<Matrix<f32>, WeightError> {
        let found = (self.u64()?, self.u64()?);
        if found != expected {
            return Err(WeightError::ShapeMismatch { matrix: name, expected, found });
        }
        let len = expected.0 * expected.1;
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Matrix::from_vec(expected.0, expected.1, data).expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<OmniLayer<f32>, WeightError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(WeightError::Truncated { offset: 0, needed: HEADER_LEN, available: bytes.len() });
    }
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(WeightError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightError::UnsupportedVersion(version));
    }
    let (d, n, n_rows, n_cols, d_ffn, k) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    if n_rows.checked_mul(n_cols) != Some(n) {
        return Err(WeightError::Header(format!("N={n} but N_r·N_c = {n_rows}·{n_cols}")));
    }
    let w_in = r.matrix("W", (n, d))?;
    let w_out = r.matrix("V", (n, d))?;
    let w_row = r.matrix("W_r", (d, n_rows))?;
    let w_col = r.matrix("W_c", (d, n_cols))?;
    let w_gate = r.matrix("W_gate", (d, d_ffn))?;
    let w_up = r.matrix("W_up", (d, d_ffn))?;
    let w_down = r.matrix("W_down", (d_ffn, d))?;
    let rest = bytes.len() - r.pos;
    if rest != 0 {
        return Err(WeightError::TrailingBytes(rest));
    }
    let header = |e: omnimoe::Error| WeightError::Header(e.to_string());
    OmniLayer::new(
        ExpertStore::new(w_in, w_out).map_err(header)?,
        RouterParams::new(w_row, w_col).map_err(header)?,
        SharedMlp::new(w_gate, w_up, w_down).map_err(header)?,
        k,
    )
    .map_err(header)
}

pub fn save_weights<T: Scalar>(layer: &OmniLayer<T>, path: &Path) -> Result<(), WeightError> {
    let io = |source| WeightError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(layer)).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_weights(path: &Path) -> Result<OmniLayer<f32>, WeightError> {
    let bytes = std::fs::read(path).map_err(|source| WeightError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

/// Expected file size for the given dimensions.
pub fn file_len(dims: LayerDims) -> usize {
    let n = dims.n_experts();
    let elems = 2 * n * dims.d + dims.d * (dims.n_rows + dims.n_cols) + 3 * dims.d * dims.d_ffn;
    HEADER_LEN + 7 * 16 + 4 * elems
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> OmniLayer<f32> {
        OmniLayer::init(LayerDims { d: 3, n_rows: 2, n_cols: 4, d_ffn: 5, k: 2 }, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let l = layer();
        let bytes = encode(&l);
        assert_eq!(bytes.len(), file_len(l.dims()));
        let back = decode(&bytes).unwrap();
        assert_eq!(back, l);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn verification_precision_upcasts() {
        let l64: OmniLayer<f64> = layer().cast();
        assert_eq!(decode(&encode(&l64)).unwrap(), layer());
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&layer());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(WeightError::BadMagic(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(WeightError::Truncated { .. })));
        assert!(matches!(decode(&bytes[..2]), Err(WeightError::Truncated { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(WeightError::UnsupportedVersion(9))));
        // rows field of W
        let mut shape = bytes.clone();
        shape[HEADER_LEN] = 7;
        assert!(matches!(decode(&shape), Err(WeightError::ShapeMismatch { matrix: "W", .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(WeightError::TrailingBytes(1))));
        let mut hdr = bytes;
        hdr[16] = 99; // N
        assert!(matches!(decode(&hdr), Err(WeightError::Header(_))));
    }
}
