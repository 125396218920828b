//! Binary record file, version 1. All integers and floats little-endian.
//!
//! ```text
//! offset  size           field
//! 0       8              magic "SATFDATA"
//! 8       4   u32        version
//! 12      8   u64        record count R
//! 20      16  u32×4      input shape  T, C, H, W
//! 36      12  u32×3      rain shape   T′, H′, W′
//! 48      R·4·(X+Y)      payloads: per record X input floats then Y rain
//!                        floats, f32
//! ...     R·28           index: per record region u32, t0 u32, top u32,
//!                        left u32, y_reg f64, label u32
//! ```

use std::io::Write;
use std::path::Path;

use super::{SampleOrigin, SampleRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"SATFDATA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 48;
const INDEX_ENTRY_LEN: usize = 28;

pub fn write_dataset(records: &[SampleRecord], path: &Path) -> Result<()> {
    let (x_shape, r_shape): (Vec<usize>, Vec<usize>) = match records.first() {
        Some(r) => (r.x_raw.shape().to_vec(), r.rain.shape().to_vec()),
        None => (vec![0; 4], vec![0; 3]),
    };
    if x_shape.len() != 4 || r_shape.len() != 3 {
        return Err(Error::Contract("records need 4-D inputs and 3-D rain fields".into()));
    }
    let mut buf = Vec::with_capacity(
        HEADER_LEN
            + records.len() * (4 * (x_shape.iter().product::<usize>() + r_shape.iter().product::<usize>()) + INDEX_ENTRY_LEN),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for &d in x_shape.iter().chain(&r_shape) {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for r in records {
        if r.x_raw.shape() != x_shape.as_slice() || r.rain.shape() != r_shape.as_slice() {
            return Err(Error::dim("write_dataset", r.x_raw.shape(), &x_shape));
        }
        for &v in r.x_raw.data().iter().chain(r.rain.data()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for r in records {
        let o = r.origin;
        for v in [o.region, o.t0, o.top, o.left] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.y_reg.to_le_bytes());
        buf.extend_from_slice(&(r.label as u32).to_le_bytes());
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&buf)?;
    file.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked up front");
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Reads a whole file. Any structural problem fails the read; no partial
/// record list is returned.
pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(format_error(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_error(0, "bad magic"));
    }
    let mut rd = Reader { bytes: &bytes, pos: 8 };
    let version = rd.u32();
    if version != FORMAT_VERSION {
        return Err(format_error(8, format!("unsupported version {version}")));
    }
    let count = rd.u64() as usize;
    let x_shape: Vec<usize> = (0..4).map(|_| rd.u32() as usize).collect();
    let r_shape: Vec<usize> = (0..3).map(|_| rd.u32() as usize).collect();
    let x_len: usize = x_shape.iter().product();
    let r_len: usize = r_shape.iter().product();
    if count > 0 && (x_len == 0 || r_len == 0) {
        return Err(format_error(20, "zero-sized record shape"));
    }
    let expected = count
        .checked_mul(4 * (x_len + r_len) + INDEX_ENTRY_LEN)
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| format_error(12, "record count overflows"))?;
    if bytes.len() < expected {
        return Err(format_error(
            bytes.len(),
            format!("truncated: header promises {count} records ({expected} bytes)"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_error(
            expected,
            format!("{} bytes beyond the {count} records the header declares", bytes.len() - expected),
        ));
    }

    let mut payloads = Vec::with_capacity(count);
    for _ in 0..count {
        let x: Vec<f64> = (0..x_len).map(|_| f64::from(rd.f32())).collect();
        let r: Vec<f64> = (0..r_len).map(|_| f64::from(rd.f32())).collect();
        payloads.push((x, r));
    }
    let mut records = Vec::with_capacity(count);
    for (x, r) in payloads {
        let entry = rd.pos;
        let origin = SampleOrigin {
            region: rd.u32(),
            t0: rd.u32(),
            top: rd.u32(),
            left: rd.u32(),
        };
        let y_reg = rd.f64();
        let label = rd.u32() as usize;
        let x_raw = Tensor::new(&x_shape, x).map_err(|e| format_error(entry, e.to_string()))?;
        let rain = Tensor::new(&r_shape, r).map_err(|e| format_error(entry, e.to_string()))?;
        records.push(SampleRecord {
            x_raw,
            rain,
            y_reg,
            label,
            origin,
        });
    }
    Ok(records)
}
