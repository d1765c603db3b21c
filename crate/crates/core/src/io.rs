//! SPX1 binary spectrum files and CSV import/export.
//!
//! SPX1 layout (little-endian, no padding):
//!
//! ```text
//! "SPX1"            4 bytes magic
//! height, width     u32, u32
//! energy min, max   f64, f64
//! momentum min, max f64, f64
//! energy label      u16 length + UTF-8 bytes
//! momentum label    u16 length + UTF-8 bytes
//! values            height*width f32, row-major
//! ```
//!
//! Values are held as f64 in memory and quantized to f32 on write, so integer
//! counts up to 2^24 survive exactly and a write/read/write cycle is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::spectrum::{AxisInfo, SignedMap, Spectrum};

pub const SPX_MAGIC: &[u8; 4] = b"SPX1";

/// Encode a grid with its axes into SPX1 bytes.
pub fn encode_spx(values: &Array2<f64>, energy: &AxisInfo, momentum: &AxisInfo) -> Result<Vec<u8>> {
    let (h, w) = values.dim();
    let mut buf = Vec::with_capacity(64 + 4 * h * w);
    buf.extend_from_slice(SPX_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for x in [
        energy.minimum(),
        energy.maximum(),
        momentum.minimum(),
        momentum.maximum(),
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for label in [energy.label(), momentum.label()] {
        let bytes = label.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::InvalidArgument(format!("axis label longer than 65535 bytes: {label:.32}...")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    for &v in values.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::FormatViolation(format!(
                "truncated payload: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn label(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::FormatViolation("axis label is not valid UTF-8".into()))
    }
}

/// Decode SPX1 bytes into a signed map. Sign is not checked here.
pub fn decode_spx(bytes: &[u8]) -> Result<SignedMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::FormatViolation("file shorter than magic".into()))?
        != SPX_MAGIC
    {
        return Err(Error::FormatViolation("bad magic, expected SPX1".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let (emin, emax, kmin, kmax) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let elabel = r.label()?;
    let klabel = r.label()?;
    let energy = AxisInfo::new(elabel, emin, emax, h).map_err(|e| Error::FormatViolation(e.to_string()))?;
    let momentum = AxisInfo::new(klabel, kmin, kmax, w).map_err(|e| Error::FormatViolation(e.to_string()))?;
    let n = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::FormatViolation("grid dimensions overflow".into()))?;
    let payload = r.take(n)?;
    if r.pos != bytes.len() {
        return Err(Error::FormatViolation(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let mut values = Vec::with_capacity(h * w);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::FormatViolation("non-finite value in payload".into()));
        }
        values.push(v as f64);
    }
    let values = Array2::from_shape_vec((h, w), values).expect("length checked above");
    SignedMap::new(values, energy, momentum)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

pub fn save_spectrum(s: &Spectrum, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(
        path.as_ref(),
        &encode_spx(s.values(), s.energy_axis(), s.momentum_axis())?,
    )
}

pub fn save_signed(m: &SignedMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(
        path.as_ref(),
        &encode_spx(m.values(), m.energy_axis(), m.momentum_axis())?,
    )
}

pub fn load_signed(path: impl AsRef<Path>) -> Result<SignedMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_spx(&bytes)
}

/// Load an SPX1 file that must hold a non-negative spectrum.
pub fn load_spectrum(path: impl AsRef<Path>) -> Result<Spectrum> {
    let m = load_signed(path)?;
    if m.values().iter().any(|&v| v < 0.0) {
        return Err(Error::FormatViolation("negative value in spectrum file".into()));
    }
    Ok(m.into_spectrum())
}

/// Write `energy,momentum,value` rows, one per pixel, row-major.
pub fn export_csv(m: &SignedMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(32 * m.values().len());
    out.push_str("energy,momentum,value\n");
    let ev = m.energy_axis().values();
    let kv = m.momentum_axis().values();
    for ((i, j), v) in m.values().indexed_iter() {
        out.push_str(&format!("{},{},{}\n", ev[i], kv[j], v));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn axis_from_coords(label: &str, coords: &[f64]) -> Result<AxisInfo> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::FormatViolation(format!(
            "{label} axis has fewer than 2 distinct values"
        )));
    }
    let axis = AxisInfo::new(label, coords[0], coords[n - 1], n).map_err(|e| Error::FormatViolation(e.to_string()))?;
    let tol = 1e-6 * axis.step();
    for (i, &c) in coords.iter().enumerate() {
        if (c - axis.value(i)).abs() > tol {
            return Err(Error::FormatViolation(format!(
                "{label} axis is not uniformly sampled near {c}"
            )));
        }
    }
    Ok(axis)
}

/// Read `energy,momentum,value` triples covering a complete uniform grid.
pub fn import_csv(path: impl AsRef<Path>) -> Result<Spectrum> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::FormatViolation(e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::FormatViolation(e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["energy", "momentum", "value"] {
        return Err(Error::FormatViolation(format!(
            "expected header energy,momentum,value, got {}",
            names.join(",")
        )));
    }
    let mut triples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::FormatViolation(e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::FormatViolation(format!("expected 3 fields, got {}", rec.len())));
        }
        let mut parsed = [0.0; 3];
        for (slot, field) in parsed.iter_mut().zip(rec.iter()) {
            *slot = field
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::FormatViolation(format!("unparsable number '{field}'")))?;
        }
        triples.push(parsed);
    }
    // Coordinates are keyed by their bit pattern after sorting numerically.
    let distinct = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = triples.iter().map(|t| t[k]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let es = distinct(0);
    let ks = distinct(1);
    let energy = axis_from_coords("energy", &es)?;
    let momentum = axis_from_coords("momentum", &ks)?;
    let eidx: BTreeMap<u64, usize> = es.iter().enumerate().map(|(i, e)| (e.to_bits(), i)).collect();
    let kidx: BTreeMap<u64, usize> = ks.iter().enumerate().map(|(i, k)| (k.to_bits(), i)).collect();
    let mut values = Array2::from_elem((es.len(), ks.len()), f64::NAN);
    for t in &triples {
        values[[eidx[&t[0].to_bits()], kidx[&t[1].to_bits()]]] = t[2];
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::FormatViolation("CSV does not cover a complete grid".into()));
    }
    Spectrum::new(values, energy, momentum).map_err(|e| Error::FormatViolation(e.to_string()))
}
