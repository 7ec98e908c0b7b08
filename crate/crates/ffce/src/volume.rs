//! MVOL volume container.
//!
//! | bytes | content                                             |
//! |-------|-----------------------------------------------------|
//! | 0–3   | magic `MVOL`                                        |
//! | 4     | version (1)                                         |
//! | 5     | dtype: 0 = f32 LE intensities, 1 = u16 LE labels    |
//! | 6–7   | reserved, zero                                      |
//! | 8–31  | extents D, H, W as u64 LE                           |
//! | 32–   | row-major payload, W fastest                        |

use std::{
    fs,
    io::{Cursor, Read},
    path::Path,
};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MVOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U16 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::U16 => 2,
        }
    }
}

/// Intensity volume; axis 0 is coronal.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

/// Integer label volume with values below the class count it was
/// validated against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u16>,
}

fn check_len(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Invalid(format!("volume extents must be positive, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::Invalid(format!(
            "volume extents {dims:?} do not match {len} values"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite intensity at element {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let len = self.dims[1] * self.dims[2];
        &self.data[i * len..(i + 1) * len]
    }

    /// Rescales intensities to [0, 1]; constant volumes become all zero.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        for v in &mut self.data {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(DType::F32, self.dims);
        for &v in &self.data {
            out.write_f32::<LE>(v).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (dims, mut payload) = parse_header(bytes, DType::F32, path)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims.iter().product::<usize>() {
            let v = payload.read_f32::<LE>().expect("payload length checked");
            if !v.is_finite() {
                let offset = (HEADER_LEN + 4 * i) as u64;
                return Err(Error::format(path, offset, format!("non-finite intensity {v}")));
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn plane(&self, i: usize) -> &[u16] {
        let len = self.dims[1] * self.dims[2];
        &self.data[i * len..(i + 1) * len]
    }

    /// Checks every label against the class count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            Some(i) => Err(Error::Invalid(format!(
                "label {} at element {i} is out of range for {classes} classes",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn counts(&self, classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; classes];
        for &v in &self.data {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header(DType::U16, self.dims);
        for &v in &self.data {
            out.write_u16::<LE>(v).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (dims, mut payload) = parse_header(bytes, DType::U16, path)?;
        let data = (0..dims.iter().product::<usize>())
            .map(|_| payload.read_u16::<LE>().expect("payload length checked"))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }
}

fn header(dtype: DType, dims: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dims.iter().product::<usize>() * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype as u8, 0, 0]);
    for d in dims {
        out.write_u64::<LE>(d as u64).expect("writing to a Vec cannot fail");
    }
    out
}

fn parse_header<'a>(bytes: &'a [u8], expected: DType, path: &Path) -> Result<([usize; 3], Cursor<&'a [u8]>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != expected as u8 {
        let found = match bytes[5] {
            0 => "f32",
            1 => "u16",
            _ => "unknown",
        };
        return Err(Error::format(
            path,
            5,
            format!("dtype code {} ({found}), expected {}", bytes[5], expected as u8),
        ));
    }
    if bytes[6..8] != [0, 0] {
        return Err(Error::format(path, 6, "reserved bytes must be zero"));
    }
    let mut cursor = Cursor::new(&bytes[8..HEADER_LEN]);
    let mut dims = [0usize; 3];
    let mut count: u64 = 1;
    for (axis, d) in dims.iter_mut().enumerate() {
        let v = cursor.read_u64::<LE>().expect("header length checked");
        let offset = 8 + 8 * axis as u64;
        if v == 0 {
            return Err(Error::format(path, offset, "zero extent"));
        }
        count = count
            .checked_mul(v)
            .filter(|c| c.checked_mul(expected.width() as u64).is_some())
            .ok_or_else(|| Error::format(path, offset, "extents overflow"))?;
        *d = usize::try_from(v).map_err(|_| Error::format(path, offset, "extent too large"))?;
    }
    let want = count * expected.width() as u64;
    let have = (bytes.len() - HEADER_LEN) as u64;
    if have != want {
        return Err(Error::format(
            path,
            HEADER_LEN as u64 + have.min(want),
            format!("payload size {have} bytes, extents {dims:?} require {want}"),
        ));
    }
    Ok((dims, Cursor::new(&bytes[HEADER_LEN..])))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
