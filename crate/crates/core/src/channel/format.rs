//! BFCH binary dataset format.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "BFCH"
//!      4     2  format version (u16 LE)
//!      6     4  m_t (u32 LE)
//!     10     4  m_r (u32 LE)
//!     14     8  n_samples (u64 LE)
//!     22     2  flags (u16 LE); bit 0 = path metadata section present
//!     24        payload: per sample, per receive antenna (column-major),
//!               per transmit antenna: re f32 LE, im f32 LE
//!               split tags: one byte per sample (0 train, 1 val, 2 test)
//!               [flag bit 0] per sample: sample_id u64, path count u32,
//!               then per path aod f64, aoa f64, gain re f64, gain im f64
//!               footer: length u32 LE, then the system config as TOML
//! ```
//! Without the metadata section sample ids are the sample positions.

use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use super::{ChannelDataset, ChannelMatrix, ChannelSample, PathInfo, Split, SystemConfig};
use crate::Error;

pub const MAGIC: [u8; 4] = *b"BFCH";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
const FLAG_PATHS: u16 = 1;
const KNOWN_FLAGS: u16 = FLAG_PATHS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated payload: {section} needs {needed} bytes, {available} available")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("unknown flags {0:#06x}")]
    UnknownFlags(u16),
    #[error("invalid split tag {tag} at sample {index}")]
    BadSplitTag { index: u64, tag: u8 },
    #[error("invalid channel at sample {index}: {reason}")]
    BadSample { index: u64, reason: String },
    #[error("bad config footer: {0}")]
    BadFooter(String),
    #[error("header dimensions {header:?} disagree with config footer {footer:?}")]
    HeaderMismatch { header: (u32, u32), footer: (u32, u32) },
    #[error("{0} trailing bytes after footer")]
    TrailingBytes(u64),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: u64, section: &'static str) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() as u64 {
            return Err(FormatError::Truncated {
                section,
                needed: n,
                available: self.remaining() as u64,
            });
        }
        let n = n as usize;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, section: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }
    fn u32(&mut self, section: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
    fn u64(&mut self, section: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
    fn f64(&mut self, section: &'static str) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

/// Serializes a dataset. Entries are written at 32-bit precision.
pub fn encode_dataset(ds: &ChannelDataset) -> Vec<u8> {
    let (m_t, m_r) = (ds.config.m_t(), ds.config.m_r());
    let n = ds.samples.len();
    let with_paths = ds
        .samples
        .iter()
        .enumerate()
        .any(|(i, s)| !s.paths.is_empty() || s.sample_id != i as u64);
    let flags = if with_paths { FLAG_PATHS } else { 0 };

    let mut out = Vec::with_capacity(HEADER_LEN + n * (m_t * m_r * 8 + 1) + 256);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m_t as u32).to_le_bytes());
    out.extend_from_slice(&(m_r as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for s in &ds.samples {
        for c in s.h.as_slice() {
            out.extend_from_slice(&(c.re as f32).to_le_bytes());
            out.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
    }
    out.extend(ds.splits.iter().map(|s| s.tag()));
    if with_paths {
        for s in &ds.samples {
            out.extend_from_slice(&s.sample_id.to_le_bytes());
            out.extend_from_slice(&(s.paths.len() as u32).to_le_bytes());
            for p in &s.paths {
                for x in [p.aod, p.aoa, p.gain.re, p.gain.im] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let footer = ds.config.to_toml();
    out.extend_from_slice(&(footer.len() as u32).to_le_bytes());
    out.extend_from_slice(footer.as_bytes());
    out
}

/// Parses a BFCH byte buffer.
pub fn decode_dataset(bytes: &[u8]) -> Result<ChannelDataset, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16("header")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let m_t = r.u32("header")?;
    let m_r = r.u32("header")?;
    let n = r.u64("header")?;
    let flags = r.u16("header")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(FormatError::UnknownFlags(flags));
    }

    let entries = (m_t as u64).checked_mul(m_r as u64);
    let payload_len = entries.and_then(|e| e.checked_mul(8)).and_then(|b| b.checked_mul(n));
    let payload = match payload_len {
        Some(len) => r.take(len, "channel payload")?,
        None => {
            return Err(FormatError::Truncated {
                section: "channel payload",
                needed: u64::MAX,
                available: r.remaining() as u64,
            })
        }
    };
    let tags = r.take(n, "split tags")?;
    let per_sample = (m_t as usize) * (m_r as usize);

    let mut meta: Vec<(u64, Vec<PathInfo>)> = Vec::new();
    if flags & FLAG_PATHS != 0 {
        for _ in 0..n {
            let id = r.u64("path metadata")?;
            let count = r.u32("path metadata")?;
            let need = count as u64 * 32;
            if need > r.remaining() as u64 {
                return Err(FormatError::Truncated {
                    section: "path metadata",
                    needed: need,
                    available: r.remaining() as u64,
                });
            }
            let mut paths = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let aod = r.f64("path metadata")?;
                let aoa = r.f64("path metadata")?;
                let re = r.f64("path metadata")?;
                let im = r.f64("path metadata")?;
                paths.push(PathInfo {
                    aod,
                    aoa,
                    gain: Complex64::new(re, im),
                });
            }
            meta.push((id, paths));
        }
    }

    let footer_len = r.u32("footer length")?;
    let footer = r.take(footer_len as u64, "footer")?;
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining() as u64));
    }
    let text = std::str::from_utf8(footer).map_err(|e| FormatError::BadFooter(e.to_string()))?;
    let config = SystemConfig::from_toml(text).map_err(|e| FormatError::BadFooter(e.to_string()))?;
    if config.m_t() as u64 != m_t as u64 || config.m_r() as u64 != m_r as u64 {
        return Err(FormatError::HeaderMismatch {
            header: (m_t, m_r),
            footer: (config.m_t() as u32, config.m_r() as u32),
        });
    }

    let mut splits = Vec::with_capacity(n as usize);
    for (i, &tag) in tags.iter().enumerate() {
        splits.push(Split::from_tag(tag).ok_or(FormatError::BadSplitTag { index: i as u64, tag })?);
    }
    let mut meta = meta.into_iter();
    let mut samples = Vec::with_capacity(n as usize);
    for (i, chunk) in payload.chunks_exact(per_sample * 8).enumerate() {
        let data = chunk
            .chunks_exact(8)
            .map(|b| {
                let re = f32::from_le_bytes(b[..4].try_into().unwrap());
                let im = f32::from_le_bytes(b[4..].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        let h = ChannelMatrix::from_column_major(m_t as usize, m_r as usize, data);
        let (id, paths) = meta.next().unwrap_or((i as u64, Vec::new()));
        let sample = ChannelSample::new(h, paths, id).map_err(|e| FormatError::BadSample {
            index: i as u64,
            reason: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(ChannelDataset {
        config,
        samples,
        splits,
    })
}

pub fn save_dataset(ds: &ChannelDataset, path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChannelDataset, Error> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_dataset, Scenario};

    fn tiny() -> ChannelDataset {
        let cfg = SystemConfig::new(2, 1, 2, 1, 0.5, 0.0, Some(-170.0), 1e6).unwrap();
        let h = ChannelMatrix::from_vector(vec![Complex64::new(1.0, -0.5), Complex64::new(0.25, 2.0)]);
        ChannelDataset {
            config: cfg,
            samples: vec![ChannelSample::new(h, vec![], 0).unwrap()],
            splits: vec![Split::Val],
        }
    }

    #[test]
    fn payload_size_for_single_small_sample() {
        let bytes = encode_dataset(&tiny());
        let footer_len = u32::from_le_bytes(bytes[HEADER_LEN + 17..HEADER_LEN + 21].try_into().unwrap()) as usize;
        // 16 payload bytes, 1 split byte, 4 footer-length bytes, footer
        assert_eq!(bytes.len(), HEADER_LEN + 16 + 1 + 4 + footer_len);
        assert_eq!(decode_dataset(&bytes).unwrap(), tiny());
    }

    #[test]
    fn distinct_errors() {
        let good = encode_dataset(&tiny());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode_dataset(&bad).unwrap_err(), FormatError::BadMagic);
        assert_eq!(decode_dataset(&bad).unwrap_err().to_string(), "bad magic");
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_dataset(&bad).unwrap_err(),
            FormatError::VersionMismatch { found: 9, .. }
        ));
        let bad = &good[..HEADER_LEN + 10];
        assert!(matches!(
            decode_dataset(bad).unwrap_err(),
            FormatError::Truncated {
                section: "channel payload",
                ..
            }
        ));
        let mut bad = good.clone();
        bad[HEADER_LEN + 16] = 7;
        assert!(matches!(
            decode_dataset(&bad).unwrap_err(),
            FormatError::BadSplitTag { tag: 7, .. }
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode_dataset(&bad).unwrap_err(), FormatError::TrailingBytes(1));
        assert_eq!(decode_dataset(b"BF").unwrap_err(), FormatError::BadMagic);
    }

    #[test]
    fn huge_sample_count_does_not_allocate() {
        let mut bytes = encode_dataset(&tiny());
        bytes[14..22].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            decode_dataset(&bytes).unwrap_err(),
            FormatError::Truncated { .. }
        ));
    }

    #[test]
    fn generated_dataset_round_trips_with_metadata() {
        let ds = gen_dataset(&SystemConfig::desk_mimo(), 11, &Scenario::default(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bfch");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), encode_dataset(&ds));
    }
}
