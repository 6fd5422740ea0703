//! Byte layout shared by the dataset archive (`DNAR`) and model (`DNMD`) files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic
//! 4       4     version, u32 little-endian
//! 8       8     manifest length in bytes, u64 little-endian
//! 16      n     manifest, UTF-8 JSON
//! ...           zero padding up to the next multiple of 64
//! D       ...   blob section: little-endian float32 blobs, each starting on a
//!               64-byte boundary relative to D, zero padding in between
//! ```
//!
//! Blob offsets recorded in manifests are relative to `D`, so the manifest
//! does not depend on its own length. Each blob carries a CRC32 (IEEE) of
//! its bytes.

use thiserror::Error;

pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("blob {name:?} checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch {
        name: String,
        stored: u32,
        computed: u32,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Location of one blob inside the blob section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Accumulates blobs; offsets are handed out in insertion order.
#[derive(Default)]
pub struct BlobWriter {
    section: Vec<u8>,
}

impl BlobWriter {
    pub fn push_f32(&mut self, values: &[f32]) -> BlobRef {
        let start = align_up(self.section.len());
        self.section.resize(start, 0);
        for v in values {
            self.section.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = &self.section[start..];
        BlobRef {
            offset: start as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(bytes),
        }
    }

    pub fn finish(self, magic: [u8; 4], version: u32, manifest: &[u8]) -> Vec<u8> {
        let data_start = align_up(PREAMBLE + manifest.len());
        let mut out = Vec::with_capacity(data_start + self.section.len());
        out.extend_from_slice(&magic);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest);
        out.resize(data_start, 0);
        out.extend_from_slice(&self.section);
        out
    }
}

/// A parsed container: manifest bytes plus bounds-checked blob access.
pub struct Container<'a> {
    pub version: u32,
    pub manifest: &'a [u8],
    section: &'a [u8],
}

impl<'a> Container<'a> {
    pub fn parse(
        bytes: &'a [u8],
        magic: [u8; 4],
        max_version: u32,
    ) -> Result<Self, ContainerError> {
        if bytes.len() < PREAMBLE {
            if bytes.len() >= 4 && bytes[..4] != magic {
                return Err(ContainerError::BadMagic {
                    expected: magic,
                    found: bytes[..4].to_vec(),
                });
            }
            return Err(ContainerError::Truncated(format!(
                "{} byte file",
                bytes.len()
            )));
        }
        if bytes[..4] != magic {
            return Err(ContainerError::BadMagic {
                expected: magic,
                found: bytes[..4].to_vec(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version == 0 || version > max_version {
            return Err(ContainerError::VersionUnsupported(version));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= bytes.len() - PREAMBLE)
            .ok_or_else(|| ContainerError::Truncated(format!("manifest length {len}")))?;
        let manifest = &bytes[PREAMBLE..PREAMBLE + len];
        let data_start = align_up(PREAMBLE + len);
        let section = bytes.get(data_start..).unwrap_or(&[]);
        Ok(Self {
            version,
            manifest,
            section,
        })
    }

    /// Checks bounds and checksum, then decodes the blob as float32.
    pub fn read_f32(&self, name: &str, blob: &BlobRef) -> Result<Vec<f32>, ContainerError> {
        let start =
            usize::try_from(blob.offset).map_err(|_| ContainerError::Truncated(name.into()))?;
        let len =
            usize::try_from(blob.length).map_err(|_| ContainerError::Truncated(name.into()))?;
        if len % 4 != 0 {
            return Err(ContainerError::Manifest(format!(
                "blob {name:?} length {len} is not a multiple of 4"
            )));
        }
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.section.len())
            .ok_or_else(|| ContainerError::Truncated(format!("blob {name:?} exceeds file")))?;
        let bytes = &self.section[start..end];
        let computed = crc32fast::hash(bytes);
        if computed != blob.crc32 {
            return Err(ContainerError::ChecksumMismatch {
                name: name.into(),
                stored: blob.crc32,
                computed,
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Blobs must be strictly increasing and non-overlapping in listing order.
pub fn check_layout<'b>(
    blobs: impl IntoIterator<Item = (&'b str, &'b BlobRef)>,
) -> Result<(), ContainerError> {
    let mut prev_end: Option<u64> = None;
    for (name, b) in blobs {
        if let Some(end) = prev_end {
            if b.offset < end {
                return Err(ContainerError::Manifest(format!(
                    "blob {name:?} at offset {} overlaps the previous blob ending at {end}",
                    b.offset
                )));
            }
        }
        prev_end =
            Some(b.offset.checked_add(b.length).ok_or_else(|| {
                ContainerError::Manifest(format!("blob {name:?} extent overflows"))
            })?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_alignment_and_roundtrip() {
        let mut w = BlobWriter::default();
        let a = w.push_f32(&[1.0, 2.0, 3.0]);
        let b = w.push_f32(&[4.0]);
        assert_eq!(a.offset, 0);
        assert_eq!(b.offset, 64);
        let bytes = w.finish(*b"TEST", 1, b"{}");
        assert_eq!(&bytes[..4], b"TEST");
        assert_eq!(bytes.len(), 64 + 64 + 4);
        let c = Container::parse(&bytes, *b"TEST", 1).unwrap();
        assert_eq!(c.manifest, b"{}");
        assert_eq!(c.read_f32("a", &a).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.read_f32("b", &b).unwrap(), vec![4.0]);
        check_layout([("a", &a), ("b", &b)]).unwrap();
        assert!(check_layout([("b", &b), ("a", &a)]).is_err());
    }

    #[test]
    fn structured_errors() {
        let bytes = BlobWriter::default().finish(*b"TEST", 2, b"{}");
        assert!(matches!(
            Container::parse(&bytes, *b"TEST", 1),
            Err(ContainerError::VersionUnsupported(2))
        ));
        assert!(matches!(
            Container::parse(&bytes, *b"ELSE", 2),
            Err(ContainerError::BadMagic { .. })
        ));
        assert!(matches!(
            Container::parse(&bytes[..10], *b"TEST", 2),
            Err(ContainerError::Truncated(_))
        ));
    }
}
