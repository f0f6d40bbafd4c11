//! Versioned binary container for trained models.
//!
//! Layout (all integers little-endian):
//! `MAGIC`, `u32` format version, `u32`-prefixed variant tag, `u64`-prefixed
//! JSON header, `u32` parameter count, then per parameter a `u32`-prefixed
//! name, `u64` rows, `u64` cols and `rows·cols` `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{ModelHeader, TransformerModel};
use crate::numerics::{Matrix, ParamStore};

pub const MAGIC: &[u8; 8] = b"MMRECCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub header: String,
    pub params: Vec<(String, Matrix)>,
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().unwrap()))
}

fn read_string<R: Read>(r: &mut R, len: usize, what: &str) -> Result<String> {
    String::from_utf8(read_exact(r, len, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

/// Upper bound on any single length field, to reject corrupt files before
/// allocating.
const MAX_FIELD: u64 = 1 << 32;

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tag.len() as u32).to_le_bytes())?;
        w.write_all(self.tag.as_bytes())?;
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, m) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let magic = read_exact(&mut r, MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let tag_len = read_u32(&mut r, "tag length")? as usize;
        let tag = read_string(&mut r, tag_len, "tag")?;
        let header_len = read_u64(&mut r, "header length")?;
        if header_len > MAX_FIELD {
            return Err(Error::Checkpoint(format!("header length {header_len} too large")));
        }
        let header = read_string(&mut r, header_len as usize, "header")?;
        let count = read_u32(&mut r, "parameter count")?;
        let mut params = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r, "parameter name length")? as usize;
            let name = read_string(&mut r, name_len, "parameter name")?;
            let rows = read_u64(&mut r, "rows")?;
            let cols = read_u64(&mut r, "cols")?;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= MAX_FIELD)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} has implausible shape {rows}x{cols}")))?
                as usize;
            let bytes = read_exact(&mut r, n * 8, &name)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Matrix::from_vec(rows as usize, cols as usize, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
        }
        Ok(Self { tag, header, params })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn expect_tag(&self, tags: &[&str]) -> Result<()> {
        if tags.contains(&self.tag.as_str()) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint holds '{}', expected one of {tags:?}",
                self.tag
            )))
        }
    }

    pub fn param(&self, name: &str) -> Result<&Matrix> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }
}

pub fn params_of(store: &ParamStore) -> Vec<(String, Matrix)> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

/// Copies `params` into `store`, which must declare the same names and
/// shapes in the same order.
pub fn load_params(store: &mut ParamStore, params: &[(String, Matrix)]) -> Result<()> {
    if store.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            store.len(),
            params.len()
        )));
    }
    for (p, (name, m)) in store.iter_mut().zip(params) {
        if &p.name != name || p.value.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: model {} {:?}, checkpoint {name} {:?}",
                p.name,
                p.value.shape(),
                m.shape()
            )));
        }
        p.value = m.clone();
    }
    Ok(())
}

impl TransformerModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: self.variant().name().to_string(),
            header: serde_json::to_string(&self.header()).expect("header serializes"),
            params: params_of(&self.store),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: ModelHeader =
            serde_json::from_str(&ck.header).map_err(|e| Error::Checkpoint(format!("bad model header: {e}")))?;
        if ck.tag != header.config.variant.name() {
            return Err(Error::Checkpoint(format!(
                "tag '{}' disagrees with header variant '{}'",
                ck.tag,
                header.config.variant.name()
            )));
        }
        let mut model = Self::from_header(&header)?;
        load_params(&mut model.store, &ck.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aux::{AuxTables, FusionConfig, FusionMode, Modality, ModalityEmbeddingTable};
    use crate::model::{ModelConfig, Variant};
    use crate::numerics::SeededRng;

    fn model(variant: Variant) -> TransformerModel {
        let mut t = ModalityEmbeddingTable::new(Modality::Image, 3);
        t.insert(1, vec![0.1, 0.2, 0.3]).unwrap();
        let tables = AuxTables::new(vec![t]).unwrap();
        let cfg = ModelConfig {
            variant,
            heads: if variant == Variant::SasrecPlus { 1 } else { 2 },
            dim: 8,
            max_len: 5,
            layers: 2,
            ..ModelConfig::default()
        };
        let fusion = FusionConfig::new(FusionMode::Sum, &[Modality::Image], 8).unwrap();
        let mut m = TransformerModel::new(&cfg, 12, Some(&fusion), &tables).unwrap();
        let mut rng = SeededRng::new(1);
        for p in m.store.iter_mut() {
            for v in p.value.as_mut_slice() {
                *v = rng.normal() * 1e-3 + f64::EPSILON;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
            let m = model(variant);
            let bytes = m.to_checkpoint().to_bytes();
            let ck = Checkpoint::from_bytes(&bytes).unwrap();
            let back = TransformerModel::from_checkpoint(&ck).unwrap();
            for (a, b) in m.store.iter().zip(back.store.iter()) {
                assert_eq!(a.name, b.name);
                let bits = |x: &Matrix| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.value), bits(&b.value));
            }
            assert_eq!(back.header(), m.header());
            assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = model(Variant::SasrecPlus).to_checkpoint().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
        let mut ver = bytes;
        ver[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = model(Variant::SasrecPlus);
        let mut ck = m.to_checkpoint();
        ck.params[0].1 = Matrix::zeros(2, 2);
        assert!(matches!(
            TransformerModel::from_checkpoint(&ck),
            Err(Error::Checkpoint(_))
        ));
        ck.tag = "bert4rec_plus".into();
        assert!(TransformerModel::from_checkpoint(&ck).is_err());
    }
}
