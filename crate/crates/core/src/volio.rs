//! NIfTI-1 single-file reading and writing.
//!
//! Reading accepts `n+1` files in either byte order (detected from `dim[0]`),
//! optionally gzip-compressed, with datatypes uint8, int16, int32, float32 and
//! float64. Everything is converted to float32 with `scl_slope`/`scl_inter`
//! applied. The voxel-to-world affine is taken from the sform when
//! `sform_code > 0`, else from the qform quaternion when `qform_code > 0`,
//! else the diagonal of `pixdim`.
//!
//! Writing always produces float32, `vox_offset = 352`, identity scaling and
//! `sform_code = 1`. A 4th dimension is treated as channels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{Affine, AffineVolume, VolumeError, IDENTITY_AFFINE};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated payload: need {needed} bytes after offset {offset}, found {found}")]
    TruncatedPayload {
        offset: usize,
        needed: usize,
        found: usize,
    },
    #[error("invalid volume: {0}")]
    Volume(#[from] VolumeError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Voxel storage types this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self, VolioError> {
        Ok(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            other => return Err(VolioError::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// The subset of NIfTI-1 header fields the engine reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [0; 8],
            datatype: Datatype::F32.code(),
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2, // mm
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            magic: MAGIC_SINGLE,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Cursor<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        b
    }
    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(at)),
            Endian::Big => i16::from_be_bytes(self.arr(at)),
        }
    }
    fn i32(&self, at: usize) -> i32 {
        match self.endian {
            Endian::Little => i32::from_le_bytes(self.arr(at)),
            Endian::Big => i32::from_be_bytes(self.arr(at)),
        }
    }
    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(at)),
            Endian::Big => f32::from_be_bytes(self.arr(at)),
        }
    }
    fn f32s<const N: usize>(&self, at: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(at + 4 * i))
    }
}

struct Sink {
    bytes: Vec<u8>,
    endian: Endian,
}

impl Sink {
    fn put(&mut self, at: usize, le: &[u8], be: &[u8]) {
        let src = match self.endian {
            Endian::Little => le,
            Endian::Big => be,
        };
        self.bytes[at..at + src.len()].copy_from_slice(src);
    }
    fn i16(&mut self, at: usize, v: i16) {
        self.put(at, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn i32(&mut self, at: usize, v: i32) {
        self.put(at, &v.to_le_bytes(), &v.to_be_bytes());
    }
    fn f32(&mut self, at: usize, v: f32) {
        self.put(at, &v.to_le_bytes(), &v.to_be_bytes());
    }
}

impl NiftiHeader {
    /// Parses the first 348 bytes, returning the header and its byte order.
    pub fn parse(bytes: &[u8]) -> Result<(Self, Endian), VolioError> {
        if bytes.len() < HEADER_SIZE {
            return Err(VolioError::MalformedHeader(format!(
                "need {HEADER_SIZE} header bytes, found {}",
                bytes.len()
            )));
        }
        let le = Cursor {
            bytes,
            endian: Endian::Little,
        };
        let endian = if (1..=7).contains(&le.i16(40)) {
            Endian::Little
        } else {
            Endian::Big
        };
        let c = Cursor { bytes, endian };
        let sizeof_hdr = c.i32(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(VolioError::MalformedHeader(format!(
                "sizeof_hdr is {sizeof_hdr}, expected 348"
            )));
        }
        let magic: [u8; 4] = c.arr(344);
        if magic == MAGIC_PAIR {
            return Err(VolioError::MalformedHeader(
                "hdr/img pairs (magic ni1) are not supported".into(),
            ));
        }
        if magic != MAGIC_SINGLE {
            return Err(VolioError::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let dim: [i16; 8] = std::array::from_fn(|i| c.i16(40 + 2 * i));
        Ok((
            Self {
                sizeof_hdr,
                dim,
                datatype: c.i16(70),
                bitpix: c.i16(72),
                pixdim: c.f32s(76),
                vox_offset: c.f32(108),
                scl_slope: c.f32(112),
                scl_inter: c.f32(116),
                xyzt_units: bytes[123],
                descrip: c.arr(148),
                qform_code: c.i16(252),
                sform_code: c.i16(254),
                quatern: c.f32s(256),
                qoffset: c.f32s(268),
                srow_x: c.f32s(280),
                srow_y: c.f32s(296),
                srow_z: c.f32s(312),
                magic,
            },
            endian,
        ))
    }

    /// Serializes to the 348-byte header followed by a zero extension flag.
    pub fn to_bytes(&self, endian: Endian) -> Vec<u8> {
        let mut s = Sink {
            bytes: vec![0u8; VOX_OFFSET],
            endian,
        };
        s.i32(0, self.sizeof_hdr);
        for (i, &d) in self.dim.iter().enumerate() {
            s.i16(40 + 2 * i, d);
        }
        s.i16(70, self.datatype);
        s.i16(72, self.bitpix);
        for (i, &p) in self.pixdim.iter().enumerate() {
            s.f32(76 + 4 * i, p);
        }
        s.f32(108, self.vox_offset);
        s.f32(112, self.scl_slope);
        s.f32(116, self.scl_inter);
        s.bytes[123] = self.xyzt_units;
        s.bytes[148..228].copy_from_slice(&self.descrip);
        s.i16(252, self.qform_code);
        s.i16(254, self.sform_code);
        for i in 0..3 {
            s.f32(256 + 4 * i, self.quatern[i]);
            s.f32(268 + 4 * i, self.qoffset[i]);
        }
        for i in 0..4 {
            s.f32(280 + 4 * i, self.srow_x[i]);
            s.f32(296 + 4 * i, self.srow_y[i]);
            s.f32(312 + 4 * i, self.srow_z[i]);
        }
        s.bytes[344..348].copy_from_slice(&self.magic);
        s.bytes
    }

    /// Validated spatial extents and channel count.
    fn extents(&self) -> Result<(Vec<usize>, usize), VolioError> {
        let nd = self.dim[0];
        if !(2..=4).contains(&nd) {
            return Err(VolioError::MalformedHeader(format!(
                "dim[0] = {nd}, only 2, 3 or 4 dimensions are supported"
            )));
        }
        let nd = nd as usize;
        let mut dims = Vec::with_capacity(nd);
        for i in 1..=nd {
            let d = self.dim[i];
            if d < 1 {
                return Err(VolioError::MalformedHeader(format!("dim[{i}] = {d}")));
            }
            dims.push(d as usize);
        }
        Ok(match nd {
            2 => (dims, 1),
            3 => (dims, 1),
            _ => (dims[..3].to_vec(), dims[3]),
        })
    }

    /// Voxel-to-world matrix by sform > qform > pixdim precedence.
    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut a = IDENTITY_AFFINE;
            for (row, srow) in a.iter_mut().zip([&self.srow_x, &self.srow_y, &self.srow_z]) {
                for (x, &s) in row.iter_mut().zip(srow.iter()) {
                    *x = s as f64;
                }
            }
            return a;
        }
        if self.qform_code > 0 {
            return self.qform_affine();
        }
        let mut a = IDENTITY_AFFINE;
        for (i, row) in a.iter_mut().take(3).enumerate() {
            let p = self.pixdim[i + 1] as f64;
            row[i] = if p > 0.0 { p } else { 1.0 };
        }
        a
    }

    fn qform_affine(&self) -> Affine {
        let [b, c, d] = self.quatern.map(|v| v as f64);
        let mut a = 1.0 - (b * b + c * c + d * d);
        let (b, c, d) = if a < 1e-7 {
            // quaternion not unit-ish: renormalize (b,c,d) and use a = 0
            let n = (b * b + c * c + d * d).sqrt();
            a = 0.0;
            (b / n, c / n, d / n)
        } else {
            a = a.sqrt();
            (b, c, d)
        };
        let px = if self.pixdim[1] > 0.0 {
            self.pixdim[1] as f64
        } else {
            1.0
        };
        let py = if self.pixdim[2] > 0.0 {
            self.pixdim[2] as f64
        } else {
            1.0
        };
        let mut pz = if self.pixdim[3] > 0.0 {
            self.pixdim[3] as f64
        } else {
            1.0
        };
        if self.pixdim[0] < 0.0 {
            pz = -pz;
        }
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let mut m = IDENTITY_AFFINE;
        for i in 0..3 {
            m[i][0] = r[i][0] * px;
            m[i][1] = r[i][1] * py;
            m[i][2] = r[i][2] * pz;
            m[i][3] = self.qoffset[i] as f64;
        }
        m
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Decodes an in-memory NIfTI-1 file (gzip detected from the leading bytes).
pub fn decode_nifti(bytes: &[u8]) -> Result<AffineVolume, VolioError> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        MultiGzDecoder::new(bytes).read_to_end(&mut raw)?;
        return decode_raw(&raw);
    }
    decode_raw(bytes)
}

fn decode_raw(bytes: &[u8]) -> Result<AffineVolume, VolioError> {
    let (hdr, endian) = NiftiHeader::parse(bytes)?;
    let dtype = Datatype::from_code(hdr.datatype)?;
    if hdr.bitpix as usize != dtype.bytes() * 8 {
        return Err(VolioError::MalformedHeader(format!(
            "bitpix {} inconsistent with datatype {}",
            hdr.bitpix, hdr.datatype
        )));
    }
    let (spatial, channels) = hdr.extents()?;
    if !hdr.vox_offset.is_finite() || hdr.vox_offset < HEADER_SIZE as f32 {
        return Err(VolioError::MalformedHeader(format!(
            "vox_offset {} precedes the end of the header",
            hdr.vox_offset
        )));
    }
    let offset = hdr.vox_offset as usize;
    let count = spatial
        .iter()
        .chain(std::iter::once(&channels))
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolioError::MalformedHeader("voxel count overflows".into()))?;
    let needed = count
        .checked_mul(dtype.bytes())
        .ok_or_else(|| VolioError::MalformedHeader("payload size overflows".into()))?;
    let found = bytes.len().saturating_sub(offset);
    if found < needed {
        return Err(VolioError::TruncatedPayload {
            offset,
            needed,
            found,
        });
    }
    let payload = &bytes[offset..offset + needed];
    let raw = decode_values(payload, dtype, endian);
    let (slope, inter) = (hdr.scl_slope, hdr.scl_inter);
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();

    // NIfTI stores x fastest then y, z, t; the engine is channels-last with
    // the first axis slowest.
    let nx = spatial[0];
    let ny = spatial[1];
    let nz = spatial.get(2).copied().unwrap_or(1);
    let mut data = vec![0f32; count];
    for c in 0..channels {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let src = ((c * nz + z) * ny + y) * nx + x;
                    let dst = ((x * ny + y) * nz + z) * channels + c;
                    let v = raw[src];
                    data[dst] = if scale {
                        (v * slope as f64 + inter as f64) as f32
                    } else {
                        v as f32
                    };
                }
            }
        }
    }
    let shape = if hdr.dim[0] == 2 {
        vec![nx, ny, 1]
    } else {
        vec![nx, ny, nz, channels]
    };
    let mut vol = AffineVolume::new(data, shape, hdr.affine())?;
    let descrip: String = hdr
        .descrip
        .iter()
        .take_while(|&&b| b != 0)
        .map(|&b| b as char)
        .collect();
    if !descrip.is_empty() {
        vol.meta.insert("description".into(), descrip);
    }
    Ok(vol)
}

fn decode_values(payload: &[u8], dtype: Datatype, endian: Endian) -> Vec<f64> {
    let n = dtype.bytes();
    payload
        .chunks_exact(n)
        .map(|b| {
            let mut buf = [0u8; 8];
            buf[..n].copy_from_slice(b);
            if endian == Endian::Big {
                buf[..n].reverse();
            }
            match dtype {
                Datatype::U8 => buf[0] as f64,
                Datatype::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
                Datatype::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                Datatype::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
                Datatype::F64 => f64::from_le_bytes(buf),
            }
        })
        .collect()
}

/// Header the writer emits for `vol`.
pub fn header_for(vol: &AffineVolume) -> NiftiHeader {
    let mut hdr = NiftiHeader::default();
    let s = vol.shape();
    let (spatial, channels) = (vol.spatial_shape(), vol.channels());
    if spatial.len() == 2 && channels == 1 {
        hdr.dim[0] = 2;
        hdr.dim[1] = s[0] as i16;
        hdr.dim[2] = s[1] as i16;
        hdr.dim[3] = 1;
    } else {
        hdr.dim[0] = if channels > 1 { 4 } else { 3 };
        hdr.dim[1] = spatial[0] as i16;
        hdr.dim[2] = spatial[1] as i16;
        hdr.dim[3] = spatial.get(2).copied().unwrap_or(1) as i16;
        hdr.dim[4] = channels as i16;
    }
    let used = hdr.dim[0] as usize;
    for d in hdr.dim.iter_mut().skip(used + 1) {
        *d = 1;
    }
    let aff = vol.affine();
    hdr.pixdim = [1.0; 8];
    for (i, &sp) in vol.spacing().iter().enumerate().take(3) {
        hdr.pixdim[i + 1] = sp as f32;
    }
    hdr.sform_code = 1;
    hdr.srow_x = std::array::from_fn(|j| aff[0][j] as f32);
    hdr.srow_y = std::array::from_fn(|j| aff[1][j] as f32);
    hdr.srow_z = std::array::from_fn(|j| aff[2][j] as f32);
    if let Some(d) = vol.meta.get("description") {
        for (dst, b) in hdr.descrip.iter_mut().zip(d.bytes().take(79)) {
            *dst = b;
        }
    }
    hdr
}

/// Encodes to uncompressed NIfTI-1 bytes in the requested byte order.
pub fn encode_nifti_with(vol: &AffineVolume, endian: Endian) -> Vec<u8> {
    let hdr = header_for(vol);
    let mut out = hdr.to_bytes(endian);
    let spatial = vol.spatial_shape();
    let (nx, ny) = (spatial[0], spatial[1]);
    let nz = spatial.get(2).copied().unwrap_or(1);
    let channels = vol.channels();
    let data = vol.data();
    out.reserve(data.len() * 4);
    for c in 0..channels {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = data[((x * ny + y) * nz + z) * channels + c];
                    match endian {
                        Endian::Little => out.extend_from_slice(&v.to_le_bytes()),
                        Endian::Big => out.extend_from_slice(&v.to_be_bytes()),
                    }
                }
            }
        }
    }
    out
}

/// Encodes to bytes, optionally gzip-compressed. The gzip member carries no
/// filename and a zero mtime, so output is byte-stable.
pub fn encode_nifti(vol: &AffineVolume, gzip: bool) -> Result<Vec<u8>, VolioError> {
    let raw = encode_nifti_with(vol, Endian::Little);
    if !gzip {
        return Ok(raw);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
    enc.write_all(&raw)?;
    Ok(enc.finish()?)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<AffineVolume, VolioError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let gz_name = path.extension().is_some_and(|e| e == "gz");
    let mut vol = if gz_name && !is_gzip(&bytes) {
        return Err(VolioError::MalformedHeader(
            "file has a .gz suffix but no gzip signature".into(),
        ));
    } else {
        decode_nifti(&bytes)?
    };
    vol.meta
        .insert("source".into(), path.to_string_lossy().into_owned());
    Ok(vol)
}

pub fn write_nifti(
    vol: &AffineVolume,
    path: impl AsRef<Path>,
    gzip: bool,
) -> Result<(), VolioError> {
    let bytes = encode_nifti(vol, gzip)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Whether `path` names a NIfTI file by extension.
pub fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase());
    name.is_some_and(|n| n.ends_with(".nii") || n.ends_with(".nii.gz"))
}
