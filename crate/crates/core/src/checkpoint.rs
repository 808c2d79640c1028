//! Flat binary checkpoint container.
//!
//! Layout: magic `RPFZ1`, version u32 LE, then one record per entry:
//!   name_len u32 LE, UTF-8 name, dtype tag u8, rank u8,
//!   extents u64 LE each, raw little-endian values.
//! Round-trips are bit-exact. Raw byte records (dtype tag 2) carry
//! metadata such as the embedded architecture description.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"RPFZ1";
pub const VERSION: u32 = 1;

/// One named record: either a tensor of scalars or raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32 { extents: Vec<u64>, values: Vec<f32> },
    F64 { extents: Vec<u64>, values: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Name -> record, ordered for reproducible files.
    pub records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert_tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        let extents: Vec<u64> = t.shape().iter().map(|&e| e as u64).collect();
        let record = match S::DTYPE {
            DType::F32 => Record::F32 {
                extents,
                values: t.data().iter().map(|v| v.to_f64() as f32).collect(),
            },
            _ => Record::F64 {
                extents,
                values: t.data().iter().map(|v| v.to_f64()).collect(),
            },
        };
        self.records.insert(name.to_string(), record);
    }

    pub fn insert_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.records.insert(name.to_string(), Record::Bytes(bytes));
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let rec = self.records.get(name).ok_or_else(|| Error::Format {
            what: "checkpoint".into(),
            expected: format!("record {name}"),
            got: "missing".into(),
        })?;
        let (extents, data): (&[u64], Vec<S>) = match rec {
            Record::F32 { extents, values } => (
                extents,
                values.iter().map(|&v| S::from_f64(v as f64)).collect(),
            ),
            Record::F64 { extents, values } => {
                (extents, values.iter().map(|&v| S::from_f64(v)).collect())
            }
            Record::Bytes(_) => {
                return Err(Error::Format {
                    what: format!("record {name}"),
                    expected: "tensor".into(),
                    got: "bytes".into(),
                })
            }
        };
        if extents.len() != 4 {
            return Err(Error::Format {
                what: format!("record {name}"),
                expected: "rank 4".into(),
                got: format!("rank {}", extents.len()),
            });
        }
        let shape = [
            extents[0] as usize,
            extents[1] as usize,
            extents[2] as usize,
            extents[3] as usize,
        ];
        Tensor::new(shape, data)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.records.get(name) {
            Some(Record::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::Format {
                what: format!("record {name}"),
                expected: "bytes".into(),
                got: "tensor".into(),
            }),
            None => Err(Error::Format {
                what: "checkpoint".into(),
                expected: format!("record {name}"),
                got: "missing".into(),
            }),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, rec) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match rec {
                Record::F32 { extents, values } => {
                    write_header(&mut w, DType::F32, extents)?;
                    for v in values {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Record::F64 { extents, values } => {
                    write_header(&mut w, DType::F64, extents)?;
                    for v in values {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Record::Bytes(bytes) => {
                    write_header(&mut w, DType::U8, &[bytes.len() as u64])?;
                    w.write_all(bytes)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                what: "checkpoint magic".into(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                got: format!("{magic:?}"),
            });
        }
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4, "version")?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(Error::Format {
                what: "checkpoint version".into(),
                expected: VERSION.to_string(),
                got: version.to_string(),
            });
        }
        let mut records = BTreeMap::new();
        loop {
            let mut len4 = [0u8; 4];
            match r.read(&mut len4)? {
                0 => break,
                4 => {}
                n => {
                    // Partial header read; try to complete it.
                    read_exact(&mut r, &mut len4[n..], "record name length")?;
                }
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf, "record name")?;
            let name = String::from_utf8(name_buf).map_err(|_| Error::Format {
                what: "record name".into(),
                expected: "UTF-8".into(),
                got: "invalid bytes".into(),
            })?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag, "dtype tag")?;
            let dtype = DType::from_tag(tag[0]).ok_or_else(|| Error::Format {
                what: "dtype tag".into(),
                expected: "0, 1 or 2".into(),
                got: tag[0].to_string(),
            })?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "rank")?;
            let mut extents = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut e8 = [0u8; 8];
                read_exact(&mut r, &mut e8, "extent")?;
                extents.push(u64::from_le_bytes(e8));
            }
            let numel: u64 = extents.iter().product();
            let mut raw = vec![0u8; numel as usize * dtype.size_bytes()];
            read_exact(&mut r, &mut raw, "record payload")?;
            let rec = match dtype {
                DType::F32 => Record::F32 {
                    extents,
                    values: raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                },
                DType::F64 => Record::F64 {
                    extents,
                    values: raw
                        .chunks_exact(8)
                        .map(f64::from_le_slice)
                        .collect(),
                },
                DType::U8 => Record::Bytes(raw),
            };
            records.insert(name, rec);
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Snapshot every parameter (weights, alphas and buffers) by name.
    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Self {
        let mut ckpt = Checkpoint::new();
        for (_, p) in store.iter() {
            ckpt.insert_tensor(&p.name, &p.value);
        }
        ckpt
    }

    /// Load values back into an identically-structured store.
    pub fn into_store<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t: Tensor<S> = self.tensor(&name)?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Format {
                    what: format!("record {name}"),
                    expected: format!("{:?}", store.value(id).shape()),
                    got: format!("{:?}", t.shape()),
                });
            }
            *store.value_mut(id) = t;
        }
        Ok(())
    }
}

fn write_header(w: &mut impl Write, dtype: DType, extents: &[u64]) -> Result<()> {
    w.write_all(&[dtype.tag()])?;
    w.write_all(&[extents.len() as u8])?;
    for e in extents {
        w.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format {
        what: what.to_string(),
        expected: format!("{} bytes", buf.len()),
        got: "EOF".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::new();
        let t32 = Tensor::<f32>::from_fn([2, 3, 1, 2], |i| (i as f32) * 0.37 - 1.5);
        let t64 = Tensor::<f64>::from_fn([1, 1, 2, 2], |i| (i as f64).exp());
        ckpt.insert_tensor("a.kernel", &t32);
        ckpt.insert_tensor("b.kernel", &t64);
        ckpt.insert_bytes("__meta__/arch", b"{\"blocks\":[]}".to_vec());

        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(ckpt, back);
        let r32: Tensor<f32> = back.tensor("a.kernel").unwrap();
        assert_eq!(r32.data(), t32.data());
        assert_eq!(back.bytes("__meta__/arch").unwrap(), b"{\"blocks\":[]}");
    }

    #[test]
    fn store_round_trip_preserves_values() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add(
            "w1",
            ParamKind::Weight,
            Tensor::from_fn([4, 3, 3, 3], |i| i as f32 * 0.001),
        );
        store.add(
            "bn.mean",
            ParamKind::Buffer,
            Tensor::from_fn([1, 4, 1, 1], |i| i as f32),
        );
        let ckpt = Checkpoint::from_store(&store);
        let mut store2 = ParamStore::<f32>::new();
        store2.add("w1", ParamKind::Weight, Tensor::zeros([4, 3, 3, 3]));
        store2.add("bn.mean", ParamKind::Buffer, Tensor::zeros([1, 4, 1, 1]));
        ckpt.into_store(&mut store2).unwrap();
        assert_eq!(store.value(a).data(), store2.value(a).data());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_tensor("x", &Tensor::<f32>::zeros([1, 1, 1, 1]));
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&bad[..]).is_err());

        let truncated = &buf[..buf.len() - 2];
        assert!(Checkpoint::read_from(truncated).is_err());
    }
}
