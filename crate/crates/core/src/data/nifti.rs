//! Uncompressed single-file NIfTI-1 (`.nii`) reading, plus a writer used
//! for fixtures and round trips.
//!
//! Header fields used (byte offsets):
//!
//! | offset | field        | type     |
//! |--------|--------------|----------|
//! | 0      | sizeof_hdr   | i32      |
//! | 40     | dim[8]       | i16 × 8  |
//! | 70     | datatype     | i16      |
//! | 72     | bitpix       | i16      |
//! | 76     | pixdim[8]    | f32 × 8  |
//! | 108    | vox_offset   | f32      |
//! | 112    | scl_slope    | f32      |
//! | 116    | scl_inter    | f32      |
//! | 344    | magic        | `n+1\0`  |

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 348;
pub const MAGIC: &[u8; 4] = b"n+1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not an uncompressed NIfTI-1 file: magic is {found:?}, expected \"n+1\\0\"")]
    BadMagic { found: [u8; 4] },
    #[error("gzip-compressed input; decompress the .nii.gz first")]
    Compressed,
    #[error("unsupported NIfTI datatype code {0} (supported: 2 u8, 4 i16, 16 f32, 64 f64)")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed NIfTI header: {0}")]
    Header(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(NiftiError::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Decoded scalar volume, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `(nx, ny, nz[, nt, ...])`.
    pub dims: Vec<usize>,
    /// Millimetres per voxel along each of `dims`.
    pub spacing: Vec<f64>,
    pub data: Vec<f64>,
    pub datatype: Datatype,
}

impl Volume {
    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims.get(1).copied().unwrap_or(1)
    }

    /// Number of 2D planes: the product of every extent past y.
    pub fn planes(&self) -> usize {
        self.dims.iter().skip(2).product()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().expect("in bounds")
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(at)),
            Endian::Big => i16::from_be_bytes(self.arr(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(at)),
            Endian::Big => f32::from_be_bytes(self.arr(at)),
        }
    }

    fn f64(&self, at: usize) -> f64 {
        match self.endian {
            Endian::Little => f64::from_le_bytes(self.arr(at)),
            Endian::Big => f64::from_be_bytes(self.arr(at)),
        }
    }

    fn value(&self, dt: Datatype, at: usize) -> f64 {
        match dt {
            Datatype::U8 => self.bytes[at] as f64,
            Datatype::I16 => self.i16(at) as f64,
            Datatype::F32 => self.f32(at) as f64,
            Datatype::F64 => self.f64(at),
        }
    }
}

/// Parses a NIfTI-1 byte buffer. Nothing is returned unless the whole
/// payload decodes.
pub fn read_nifti1(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&GZIP_MAGIC) {
        return Err(NiftiError::Compressed);
    }
    if bytes.len() < HEADER_LEN {
        return Err(NiftiError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[344..348].try_into().expect("in bounds");
    if &found != MAGIC {
        return Err(NiftiError::BadMagic { found });
    }
    let mut r = Reader {
        bytes,
        endian: Endian::Little,
    };
    if !(1..=7).contains(&r.i16(40)) {
        r.endian = Endian::Big;
        if !(1..=7).contains(&r.i16(40)) {
            return Err(NiftiError::Header(format!(
                "dim[0] is {} in either byte order",
                r.i16(40)
            )));
        }
    }
    let ndim = r.i16(40) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 1..=ndim {
        let d = r.i16(40 + 2 * i);
        if d < 1 {
            return Err(NiftiError::Header(format!("dim[{i}] = {d}")));
        }
        dims.push(d as usize);
    }
    let datatype = Datatype::from_code(r.i16(70))?;
    let bitpix = r.i16(72);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(NiftiError::Header(format!(
            "bitpix {bitpix} disagrees with datatype {datatype:?}"
        )));
    }
    // unused or unset spacings default to 1 mm
    let spacing = (1..=ndim)
        .map(|i| {
            let s = r.f32(76 + 4 * i) as f64;
            if s.is_finite() && s != 0.0 {
                s.abs()
            } else {
                1.0
            }
        })
        .collect();
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_LEN as f32) {
        return Err(NiftiError::Header(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let count: usize = dims.iter().product();
    let expected = offset + count * datatype.bytes();
    if bytes.len() < expected {
        return Err(NiftiError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let data = (0..count)
        .map(|i| {
            let v = r.value(datatype, offset + i * datatype.bytes());
            if scale {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    Ok(Volume {
        dims,
        spacing,
        data,
        datatype,
    })
}

pub fn read_nifti1_file(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti1(&std::fs::read(path)?)
}

/// Encoding options for [`write_nifti1`].
#[derive(Debug, Clone, Copy)]
pub struct WriteOptions {
    pub endian: Endian,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            endian: Endian::Little,
            scl_slope: 0.0,
            scl_inter: 0.0,
        }
    }
}

/// Serializes `vol` with its own datatype. Values are stored as given
/// (casts truncate); the scaling fields are written verbatim, so a reader
/// applies them on top of the stored values.
pub fn write_nifti1(vol: &Volume, opts: &WriteOptions) -> Result<Vec<u8>> {
    if vol.dims.is_empty() || vol.dims.len() > 7 {
        return Err(NiftiError::Header(format!("{} dimensions", vol.dims.len())));
    }
    if vol.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(NiftiError::Header(format!("extents {:?}", vol.dims)));
    }
    if vol.dims.iter().product::<usize>() != vol.data.len() || vol.spacing.len() != vol.dims.len() {
        return Err(NiftiError::Header("dims, spacing and data disagree".into()));
    }
    let big = opts.endian == Endian::Big;
    let mut out = vec![0u8; HEADER_LEN + 4];
    let put = |out: &mut Vec<u8>, at: usize, le: &[u8], be: &[u8]| {
        out[at..at + le.len()].copy_from_slice(if big { be } else { le });
    };
    let put_i16 = |out: &mut Vec<u8>, at: usize, v: i16| put(out, at, &v.to_le_bytes(), &v.to_be_bytes());
    let put_f32 = |out: &mut Vec<u8>, at: usize, v: f32| put(out, at, &v.to_le_bytes(), &v.to_be_bytes());
    put(&mut out, 0, &348i32.to_le_bytes(), &348i32.to_be_bytes());
    put_i16(&mut out, 40, vol.dims.len() as i16);
    for i in 0..7 {
        put_i16(&mut out, 42 + 2 * i, vol.dims.get(i).map_or(1, |&d| d as i16));
    }
    put_i16(&mut out, 70, vol.datatype.code());
    put_i16(&mut out, 72, 8 * vol.datatype.bytes() as i16);
    put_f32(&mut out, 76, 1.0);
    for i in 0..7 {
        put_f32(&mut out, 80 + 4 * i, vol.spacing.get(i).map_or(1.0, |&s| s as f32));
    }
    put_f32(&mut out, 108, (HEADER_LEN + 4) as f32);
    put_f32(&mut out, 112, opts.scl_slope);
    put_f32(&mut out, 116, opts.scl_inter);
    out[344..348].copy_from_slice(MAGIC);
    out.reserve(vol.data.len() * vol.datatype.bytes());
    for &v in &vol.data {
        match vol.datatype {
            Datatype::U8 => out.push(v as u8),
            Datatype::I16 => {
                let v = v as i16;
                out.extend_from_slice(&if big { v.to_be_bytes() } else { v.to_le_bytes() })
            }
            Datatype::F32 => {
                let v = v as f32;
                out.extend_from_slice(&if big { v.to_be_bytes() } else { v.to_le_bytes() })
            }
            Datatype::F64 => out.extend_from_slice(&if big { v.to_be_bytes() } else { v.to_le_bytes() }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(datatype: Datatype) -> Volume {
        Volume {
            dims: vec![4, 4, 2],
            spacing: vec![1.25, 1.25, 10.0],
            data: (0..32).map(|v| v as f64).collect(),
            datatype,
        }
    }

    /// Header and payload assembled field by field, independent of the writer.
    fn handmade_f32_le() -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [3i16, 4, 4, 2, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&16i16.to_le_bytes());
        b[72..74].copy_from_slice(&32i16.to_le_bytes());
        for (i, s) in [1.0f32, 1.25, 1.25, 10.0, 1.0, 1.0, 1.0, 1.0].iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&s.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for v in 0..32 {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        b
    }

    #[test]
    fn handmade_fixture_decodes() {
        let v = read_nifti1(&handmade_f32_le()).unwrap();
        assert_eq!(v.dims, vec![4, 4, 2]);
        assert_eq!(v.spacing, vec![1.25, 1.25, 10.0]);
        assert_eq!(v.data, (0..32).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(v.datatype, Datatype::F32);
        assert_eq!(v.planes(), 2);
        assert_eq!(write_nifti1(&v, &WriteOptions::default()).unwrap(), handmade_f32_le());
    }

    #[test]
    fn round_trip_every_datatype_and_order() {
        for dt in [Datatype::U8, Datatype::I16, Datatype::F32, Datatype::F64] {
            for endian in [Endian::Little, Endian::Big] {
                let vol = fixture(dt);
                let bytes = write_nifti1(&vol, &WriteOptions { endian, ..Default::default() }).unwrap();
                assert_eq!(read_nifti1(&bytes).unwrap(), vol, "{dt:?} {endian:?}");
            }
        }
    }

    #[test]
    fn slope_and_intercept() {
        let mut vol = fixture(Datatype::I16);
        vol.data = vec![3.0; 32];
        let opts = WriteOptions {
            scl_slope: 2.0,
            scl_inter: 1.0,
            ..Default::default()
        };
        let back = read_nifti1(&write_nifti1(&vol, &opts).unwrap()).unwrap();
        assert!(back.data.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_datatype() {
        let mut b = handmade_f32_le();
        b[345] = b'i';
        assert!(matches!(read_nifti1(&b), Err(NiftiError::BadMagic { .. })));

        let b = handmade_f32_le();
        match read_nifti1(&b[..b.len() - 3]) {
            Err(NiftiError::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (352 + 128, 352 + 125))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_nifti1(&b[..100]), Err(NiftiError::Truncated { .. })));

        let mut b = handmade_f32_le();
        b[70..72].copy_from_slice(&8i16.to_le_bytes());
        assert!(matches!(read_nifti1(&b), Err(NiftiError::UnsupportedDatatype(8))));

        assert!(matches!(read_nifti1(&[0x1f, 0x8b, 0, 0]), Err(NiftiError::Compressed)));
    }
}
