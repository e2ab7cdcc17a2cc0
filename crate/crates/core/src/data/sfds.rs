//! SFDS binary dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! "SFDS"  u32 version=1  u32 N  u16 channels  u16 height  u16 width  u16 num_classes
//! N × { i32 label (-1 = unlabeled), u8 × channels·height·width pixels }
//! ```
//!
//! Pixels load as `p / 255`. Vector datasets are stored as `channels = 1,
//! height = 1, width = d`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::CountingReader;

pub const MAGIC: &[u8; 4] = b"SFDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub count: u32,
    pub channels: u16,
    pub height: u16,
    pub width: u16,
    pub num_classes: u16,
}

impl Header {
    pub fn sample_len(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        if self.channels == 1 && self.height == 1 {
            vec![self.width as usize]
        } else {
            vec![self.channels as usize, self.height as usize, self.width as usize]
        }
    }
}

/// Streaming record reader; yields examples with ids `0..N` in file order.
pub struct SfdsReader<R> {
    inner: R,
    header: Header,
    offset: u64,
    next_id: u64,
}

impl<R: Read> SfdsReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut rd = CountingReader {
            inner: &mut inner,
            offset: 0,
        };
        let magic: [u8; 4] = rd.array()?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}"),
            });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let header = Header {
            count: rd.u32()?,
            channels: rd.u16()?,
            height: rd.u16()?,
            width: rd.u16()?,
            num_classes: rd.u16()?,
        };
        if header.sample_len() == 0 {
            return Err(Error::Format {
                offset: 12,
                detail: "zero-sized sample shape".into(),
            });
        }
        Ok(SfdsReader {
            inner,
            header,
            offset: HEADER_LEN,
            next_id: 0,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    fn read_record(&mut self) -> Result<Example> {
        let mut rd = CountingReader {
            inner: &mut self.inner,
            offset: self.offset,
        };
        let label_at = rd.offset;
        let raw = rd.i32()?;
        let pixels = rd.bytes(self.header.sample_len())?;
        self.offset = rd.offset;
        let label = match raw {
            -1 => None,
            y if y >= 0 && (y as u32) < self.header.num_classes as u32 => Some(y as usize),
            y => {
                return Err(Error::Format {
                    offset: label_at,
                    detail: format!("label {y} outside [0, {}) and not -1", self.header.num_classes),
                })
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        Ok(Example {
            id,
            features: pixels.into_iter().map(|p| p as f32 / 255.0).collect(),
            label,
        })
    }
}

impl<R: Read> Iterator for SfdsReader<R> {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.next_id < self.header.count as u64).then(|| self.read_record())
    }
}

pub fn read_dataset(reader: impl Read) -> Result<Dataset> {
    let rd = SfdsReader::new(reader)?;
    let header = rd.header();
    let examples = rd.collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        sample_shape: header.sample_shape(),
        num_classes: header.num_classes as usize,
        examples,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

fn header_for(shape: &[usize], count: usize, num_classes: usize) -> Result<Header> {
    let (c, h, w) = match *shape {
        [d] => (1, 1, d),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Spec(format!("SFDS cannot store sample shape {shape:?}"))),
    };
    let narrow =
        |v: usize, what: &str| u16::try_from(v).map_err(|_| Error::Spec(format!("{what} {v} does not fit in u16")));
    Ok(Header {
        count: u32::try_from(count).map_err(|_| Error::Spec(format!("{count} records exceed u32")))?,
        channels: narrow(c, "channels")?,
        height: narrow(h, "height")?,
        width: narrow(w, "width")?,
        num_classes: narrow(num_classes, "num_classes")?,
    })
}

fn write_header(w: &mut impl Write, h: &Header) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&h.count.to_le_bytes())?;
    for v in [h.channels, h.height, h.width, h.num_classes] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes `(label, features)` records. Features are quantized with
/// `round(v·255)` after clamping to `[0, 1]`.
pub fn write_records<'a>(
    w: &mut impl Write,
    shape: &[usize],
    num_classes: usize,
    records: impl ExactSizeIterator<Item = (Option<usize>, &'a [f32])>,
) -> Result<()> {
    let header = header_for(shape, records.len(), num_classes)?;
    write_header(w, &header)?;
    for (label, features) in records {
        if features.len() != header.sample_len() {
            return Err(Error::dim("sfds record", shape, &[features.len()]));
        }
        let raw = match label {
            None => -1i32,
            Some(y) if y < num_classes => y as i32,
            Some(y) => return Err(Error::Label { label: y, num_classes }),
        };
        w.write_all(&raw.to_le_bytes())?;
        let pixels: Vec<u8> = features
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&pixels)?;
    }
    Ok(())
}

pub fn write_dataset(w: &mut impl Write, data: &Dataset) -> Result<()> {
    write_records(
        w,
        &data.sample_shape,
        data.num_classes,
        data.examples.iter().map(|e| (e.label, e.features.as_slice())),
    )
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Reads CIFAR-10 binary batches (`u8 label, 3072 u8 pixels` per record,
/// channel-major) into one dataset.
pub fn read_cifar10(inputs: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut examples = Vec::new();
    for path in inputs {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let rec = CIFAR_PIXELS + 1;
        if bytes.len() % rec != 0 {
            return Err(Error::Format {
                offset: (bytes.len() - bytes.len() % rec) as u64,
                detail: format!("{} is not a whole number of CIFAR-10 records", path.as_ref().display()),
            });
        }
        for (i, r) in bytes.chunks_exact(rec).enumerate() {
            if r[0] >= 10 {
                return Err(Error::Format {
                    offset: (i * rec) as u64,
                    detail: format!("CIFAR-10 label {} out of range", r[0]),
                });
            }
            examples.push(Example {
                id: examples.len() as u64,
                features: r[1..].iter().map(|&p| p as f32 / 255.0).collect(),
                label: Some(r[0] as usize),
            });
        }
    }
    Ok(Dataset {
        sample_shape: vec![3, 32, 32],
        num_classes: 10,
        examples,
    })
}

pub fn convert_cifar10(inputs: &[impl AsRef<Path>], output: impl AsRef<Path>) -> Result<usize> {
    let data = read_cifar10(inputs)?;
    save_dataset(output, &data)?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            sample_shape: vec![1, 2, 2],
            num_classes: 3,
            examples: vec![
                Example {
                    id: 0,
                    features: [0u8, 128, 255, 7].iter().map(|&p| p as f32 / 255.0).collect(),
                    label: Some(2),
                },
                Example {
                    id: 1,
                    features: [1u8, 2, 3, 4].iter().map(|&p| p as f32 / 255.0).collect(),
                    label: None,
                },
            ],
        }
    }

    fn encode(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(&mut buf, d).unwrap();
        buf
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        assert_eq!(read_dataset(encode(&d).as_slice()).unwrap(), d);
    }

    #[test]
    fn empty_dataset() {
        let d = Dataset {
            examples: vec![],
            ..tiny()
        };
        let back = read_dataset(encode(&d).as_slice()).unwrap();
        assert!(back.examples.is_empty());
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let mut bytes = encode(&tiny());
        bytes[0] = b'X';
        assert!(matches!(
            read_dataset(bytes.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = encode(&tiny());
        let cut = &bytes[..bytes.len() - 1];
        match read_dataset(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, HEADER_LEN + 8 + 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_reports_offset() {
        let mut bytes = encode(&tiny());
        let at = HEADER_LEN as usize;
        bytes[at..at + 4].copy_from_slice(&3i32.to_le_bytes());
        assert!(matches!(
            read_dataset(bytes.as_slice()),
            Err(Error::Format { offset: 20, .. })
        ));
    }

    /// Streams a CIFAR-10-sized SFDS file without materializing it.
    struct SyntheticFile {
        header: Vec<u8>,
        pos: usize,
        total: usize,
    }

    impl Read for SyntheticFile {
        fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
            let rec = 4 + CIFAR_PIXELS;
            let mut n = 0;
            while n < buf.len() && self.pos < self.total {
                buf[n] = if self.pos < self.header.len() {
                    self.header[self.pos]
                } else {
                    let k = (self.pos - self.header.len()) % rec;
                    let i = (self.pos - self.header.len()) / rec;
                    if k < 4 {
                        ((i % 10) as i32).to_le_bytes()[k]
                    } else {
                        (k % 251) as u8
                    }
                };
                n += 1;
                self.pos += 1;
            }
            Ok(n)
        }
    }

    #[test]
    fn cifar10_sized_header() {
        let h = header_for(&[3, 32, 32], 50_000, 10).unwrap();
        let mut header = Vec::new();
        write_header(&mut header, &h).unwrap();
        let total = header.len() + 50_000 * (4 + CIFAR_PIXELS);
        let file = std::io::BufReader::new(SyntheticFile { header, pos: 0, total });
        let rd = SfdsReader::new(file).unwrap();
        assert_eq!(rd.header().sample_shape(), vec![3, 32, 32]);
        let mut n = 0;
        for e in rd {
            let e = e.unwrap();
            assert_eq!(e.label, Some(n % 10));
            n += 1;
        }
        assert_eq!(n, 50_000);
    }

    #[test]
    fn cifar_batch_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let batch = dir.path().join("data_batch_1.bin");
        let mut bytes = Vec::new();
        for label in [3u8, 9] {
            bytes.push(label);
            bytes.extend((0..CIFAR_PIXELS).map(|i| (i % 256) as u8));
        }
        std::fs::write(&batch, &bytes).unwrap();
        let out = dir.path().join("train.sfds");
        assert_eq!(convert_cifar10(&[&batch], &out).unwrap(), 2);
        let d = load_dataset(&out).unwrap();
        assert_eq!(d.sample_shape, vec![3, 32, 32]);
        assert_eq!(d.examples[1].label, Some(9));
        assert_eq!(d.examples[0].features[255], 1.0);
    }
}
