//! DNW1 checkpoint files.
//!
//! ```text
//! "DNW1"                      magic
//! u32 version (= 1), u32 depth, u32 hidden width
//! per layer: f32 kernel (out, in, 3, 3), f32 biases, f32 slopes (not on the last layer)
//! u64 training-step counter
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::{Network, Real};
use crate::error::{Error, Result};
use crate::io::write_file_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNW1";
const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(net: &Network<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 4 * net.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.depth() as u32).to_le_bytes());
    buf.extend_from_slice(&(net.width() as u32).to_le_bytes());
    // The flat parameter layout already follows the on-disk order.
    for &p in net.params() {
        buf.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    buf.extend_from_slice(&net.steps().to_le_bytes());
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let fv = |m: &str| Error::FormatViolation(m.to_string());
    if bytes.len() < 16 + 8 {
        return Err(fv("checkpoint shorter than its header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fv("bad magic, expected DNW1"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (version, depth, width) = (word(1), word(2) as usize, word(3) as usize);
    if version != VERSION {
        return Err(Error::FormatViolation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    if depth == 0 || width == 0 || depth > 4096 || width > 4096 {
        return Err(Error::FormatViolation(format!(
            "implausible shape depth={depth} width={width}"
        )));
    }
    let n = Network::<f32>::zeros(depth, width)?.parameter_count();
    let expected = 16 + 4 * n + 8;
    if bytes.len() != expected {
        return Err(Error::FormatViolation(format!(
            "checkpoint is {} bytes, expected {expected} for depth {depth} width {width}",
            bytes.len()
        )));
    }
    let mut params = Vec::with_capacity(n);
    for chunk in bytes[16..16 + 4 * n].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fv("non-finite parameter"));
        }
        params.push(v);
    }
    let steps = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    Network::from_parts(depth, width, params, steps)
}

/// Atomic write (temporary file, then rename).
pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file_atomic(path.as_ref(), &encode_checkpoint(net))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_matches_parameter_count() {
        let net = Network::<f32>::init(20, 64, 1).unwrap();
        let bytes = encode_checkpoint(&net);
        assert_eq!(bytes.len(), 16 + 4 * net.parameter_count() + 8);
    }

    #[test]
    fn rejects_corruption() {
        let mut net = Network::<f32>::init(3, 8, 2).unwrap();
        net.set_steps(77);
        let bytes = encode_checkpoint(&net);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.steps(), 77);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_checkpoint(&v2).is_err());
    }
}
