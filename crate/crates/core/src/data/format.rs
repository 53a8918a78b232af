//! `.tmds` dataset files.
//!
//! ```text
//! "TMDS"  version:u16
//! modality_count:u8
//!   per modality: name_len:u8 name:utf8 token_count:u32 native_dim:u32
//! label_count:u8  sample_count:u64
//! per sample:
//!   presence:u8 (bit0 image, bit1 text, bit2 tabular)  labels:u16 (low bits)
//!   for each present modality, in header order: token_count×native_dim f32
//! ```
//! All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, DatasetHeader, LabelSet, ModalityHeader, ModalityShape, Sample};
use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalityMask};

pub const MAGIC: &[u8; 4] = b"TMDS";
pub const VERSION: u16 = 1;

pub fn write_dataset<W: Write>(mut w: W, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let io = |e| Error::io("<dataset stream>", e);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dataset.header.modalities.len() as u8);
    for h in &dataset.header.modalities {
        let name = h.id.name().as_bytes();
        buf.push(name.len() as u8);
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(h.shape.token_count as u32).to_le_bytes());
        buf.extend_from_slice(&(h.shape.native_dim as u32).to_le_bytes());
    }
    buf.push(dataset.header.label_count as u8);
    buf.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    w.write_all(&buf).map_err(io)?;

    for s in &dataset.samples {
        buf.clear();
        buf.push(s.presence().bits());
        buf.extend_from_slice(&s.labels.0.to_le_bytes());
        for h in &dataset.header.modalities {
            if let Some(e) = s.embedding(h.id) {
                for v in e {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes to `path` via a temporary file and rename.
pub fn write_dataset_file(path: &Path, dataset: &Dataset) -> Result<()> {
    let tmp = path.with_extension("tmds.partial");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_dataset(BufWriter::new(file), dataset)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset,
            message: message.into(),
        })
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    self.offset += read as u64;
                    return self.fail(format!("truncated while reading {what}"));
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("<dataset stream>", e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut c = Cursor {
        inner: reader,
        offset: 0,
    };
    let magic: [u8; 4] = c.bytes("magic")?;
    if &magic != MAGIC {
        c.offset = 0;
        return c.fail(format!("bad magic {magic:?}"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        c.offset -= 2;
        return c.fail(format!("unsupported version {version}"));
    }

    let count = c.u8("modality count")?;
    if count == 0 || count > 3 {
        c.offset -= 1;
        return c.fail(format!("modality count {count} outside 1..=3"));
    }
    let mut modalities = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = c.offset;
        let len = c.u8("modality name length")? as usize;
        let mut name = vec![0u8; len];
        c.fill(&mut name, "modality name")?;
        let id = std::str::from_utf8(&name)
            .ok()
            .and_then(|n| n.parse::<ModalityId>().ok());
        let Some(id) = id else {
            c.offset = start;
            return c.fail(format!("unknown modality name {:?}", String::from_utf8_lossy(&name)));
        };
        let token_count = c.u32("token count")? as usize;
        let native_dim = c.u32("native dim")? as usize;
        modalities.push(ModalityHeader {
            id,
            shape: ModalityShape {
                token_count,
                native_dim,
            },
        });
    }
    let label_count = c.u8("label count")? as usize;
    let header = DatasetHeader {
        modalities,
        label_count,
    };
    if let Err(e) = header.validate() {
        return c.fail(e.to_string());
    }
    let declared = header.declared();
    let sample_count = c.u64("sample count")?;

    let mut samples = Vec::with_capacity(sample_count.min(1 << 20) as usize);
    for i in 0..sample_count {
        let at = c.offset;
        let bits = c.u8("presence")?;
        let presence = ModalityMask::from_bits(bits)
            .filter(|p| p.intersect(declared) == *p)
            .ok_or_else(|| Error::Format {
                offset: at,
                message: format!("sample {i}: presence bits {bits:#05b} name undeclared modalities"),
            })?;
        let labels = c.u16("labels")?;
        if labels >> label_count != 0 {
            c.offset -= 2;
            return c.fail(format!("sample {i}: label bits beyond the {label_count} declared labels"));
        }
        let mut embeddings: [Option<Vec<f32>>; 3] = [None, None, None];
        for h in &header.modalities {
            if !presence.contains(h.id) {
                continue;
            }
            let mut raw = vec![0u8; h.shape.numel() * 4];
            c.fill(&mut raw, &format!("sample {i} {} matrix", h.id))?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if !values.iter().all(|v| v.is_finite()) {
                return c.fail(format!("sample {i}: non-finite value in {}", h.id));
            }
            embeddings[h.id.index()] = Some(values);
        }
        samples.push(Sample {
            embeddings,
            labels: LabelSet(labels),
        });
    }
    let mut probe = [0u8; 1];
    if matches!(c.inner.read(&mut probe), Ok(n) if n > 0) {
        return c.fail("trailing bytes after the last sample");
    }
    Ok(Dataset { header, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let header = DatasetHeader {
            modalities: vec![
                ModalityHeader {
                    id: ModalityId::Image,
                    shape: ModalityShape { token_count: 2, native_dim: 3 },
                },
                ModalityHeader {
                    id: ModalityId::Tabular,
                    shape: ModalityShape { token_count: 4, native_dim: 1 },
                },
            ],
            label_count: 14,
        };
        let samples = vec![
            Sample {
                embeddings: [Some(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), None, Some(vec![0.5; 4])],
                labels: LabelSet(0b10_0000_0000_0001),
            },
            Sample {
                embeddings: [None, None, Some(vec![-1.0; 4])],
                labels: LabelSet(0),
            },
        ];
        Dataset { header, samples }
    }

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(&mut out, d).unwrap();
        out
    }

    #[test]
    fn write_read_write_identical() {
        let d = tiny();
        let first = bytes(&d);
        let back = read_dataset(&first[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(bytes(&back), first);
    }

    #[test]
    fn exact_layout() {
        let b = bytes(&tiny());
        assert_eq!(&b[..4], b"TMDS");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 2);
        assert_eq!(b[7], 5);
        assert_eq!(&b[8..13], b"image");
        assert_eq!(&b[13..17], &2u32.to_le_bytes());
        assert_eq!(&b[17..21], &3u32.to_le_bytes());
        // tabular header is 1 + 7 + 8 bytes, then labels + sample count
        let after_headers = 21 + 16;
        assert_eq!(b[after_headers], 14);
        assert_eq!(&b[after_headers + 1..after_headers + 9], &2u64.to_le_bytes());
        let s0 = after_headers + 9;
        assert_eq!(b[s0], 0b101);
        assert_eq!(&b[s0 + 1..s0 + 3], &0b10_0000_0000_0001u16.to_le_bytes());
        assert_eq!(&b[s0 + 3..s0 + 7], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), s0 + 3 + 24 + 16 + 3 + 16);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let mut d = tiny();
        d.samples.clear();
        let b = bytes(&d);
        assert_eq!(read_dataset(&b[..]).unwrap(), d);
    }

    #[test]
    fn record_mismatch_names_sample() {
        let mut d = tiny();
        d.samples[1].embeddings[0] = Some(vec![0.0; 5]);
        let err = write_dataset(Vec::new(), &d).unwrap_err().to_string();
        assert!(err.contains("sample 1"), "{err}");
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let good = bytes(&tiny());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_dataset(&bad_magic[..]), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(read_dataset(&bad_version[..]), Err(Error::Format { offset: 4, .. })));

        let truncated = &good[..good.len() - 3];
        match read_dataset(truncated) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, truncated.len());
                assert!(message.contains("sample 1"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }

        let mut trailing = good;
        trailing.push(0);
        assert!(read_dataset(&trailing[..]).is_err());
    }
}
