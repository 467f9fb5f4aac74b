//! Portable binary encoding of models and tensor collections.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "XLAB"                    magic
//! u32                       format version (1)
//! u32 + bytes               spec text (see `ModelSpec::to_text`)
//! u32 + bytes               metadata text, `key=value` per line
//! u32                       record count
//! records:
//!   u32 + bytes             parameter name
//!   u32                     rank
//!   rank × u32              extents
//!   volume × f32            payload
//! ```
//!
//! Tensor blobs (used for transfer sets) share the record encoding under the
//! magic `"XLTS"`: magic, version, record count, records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::attack::Technique;
use crate::error::{Error, Result};
use crate::model::{AdvTag, Model, ModelMeta, ModelSpec};
use crate::tensor::{volume, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XLAB";
pub const BLOB_MAGIC: &[u8; 4] = b"XLTS";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!(
                "unexpected end of data at byte {} (need {n} more, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        core::str::from_utf8(b)
            .map(|s| s.to_string())
            .map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("record `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = volume(&shape);
        if n == 0 {
            return Err(Error::Corrupt(format!("record `{name}` is empty")));
        }
        let payload = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Corrupt(format!("bad magic {m:?}")));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(v));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn meta_to_text(model: &Model) -> String {
    let m = &model.meta;
    let mut s = format!(
        "seed={}\nepochs={}\nfinal_lr={}\ndataset={}\n",
        model.rng_seed, m.epochs, m.final_lr, m.dataset
    );
    if let Some(adv) = m.adversarial {
        s.push_str(&format!(
            "adv_technique={}\nadv_epsilon={}\n",
            adv.technique, adv.epsilon
        ));
    }
    for (k, v) in &m.tags {
        s.push_str(&format!("tag.{k}={v}\n"));
    }
    s
}

fn meta_from_text(text: &str) -> Result<(u64, ModelMeta)> {
    let bad = |k: &str| Error::Corrupt(format!("bad metadata value for `{k}`"));
    let mut seed = 0;
    let mut meta = ModelMeta::default();
    let mut technique = None;
    let mut epsilon = None;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corrupt(format!("metadata line `{line}`")))?;
        match k {
            "seed" => seed = v.parse().map_err(|_| bad(k))?,
            "epochs" => meta.epochs = v.parse().map_err(|_| bad(k))?,
            "final_lr" => meta.final_lr = v.parse().map_err(|_| bad(k))?,
            "dataset" => meta.dataset = v.to_string(),
            "adv_technique" => technique = Some(v.parse::<Technique>().map_err(|_| bad(k))?),
            "adv_epsilon" => epsilon = Some(v.parse::<f32>().map_err(|_| bad(k))?),
            _ => match k.strip_prefix("tag.") {
                Some(tag) => {
                    meta.tags.insert(tag.to_string(), v.to_string());
                }
                None => return Err(Error::Corrupt(format!("unknown metadata key `{k}`"))),
            },
        }
    }
    meta.adversarial = match (technique, epsilon) {
        (Some(technique), Some(epsilon)) => Some(AdvTag { technique, epsilon }),
        (None, None) => None,
        _ => return Err(Error::Corrupt("incomplete adversarial metadata".into())),
    };
    Ok((seed, meta))
}

fn check_meta_values(model: &Model) -> Result<()> {
    let m = &model.meta;
    let clean = |s: &str| !s.contains('\n') && !s.contains('=');
    let ok = !m.dataset.contains('\n')
        && m.tags.iter().all(|(k, v)| clean(k) && !v.contains('\n'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(
            "metadata values may not contain newlines (or `=` in keys)".into(),
        ))
    }
}

/// Serializes a model, its spec and metadata.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    check_meta_values(model)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &model.spec.to_text());
    put_str(&mut out, &meta_to_text(model));
    put_u32(&mut out, model.params().len() as u32);
    for (name, t) in model.params() {
        put_record(&mut out, name, t);
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let spec = ModelSpec::parse(&r.string()?)?;
    let (seed, meta) = meta_from_text(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        params.push(r.record()?);
    }
    r.finish()?;
    let mut model = Model::from_params(spec, params, seed)?;
    model.meta = meta;
    Ok(model)
}

/// Serializes named tensors.
pub fn encode_tensors(records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        put_record(&mut out, name, t);
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(BLOB_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.record()?;
        out.insert(name, t);
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged_model() -> Model {
        let mut m = Model::build(ModelSpec::cnn_small([1, 12, 12], 4), 11).unwrap();
        m.meta.epochs = 30;
        m.meta.final_lr = 0.001;
        m.meta.dataset = "synth-victim".into();
        m.meta.adversarial = Some(AdvTag {
            technique: Technique::Pgd,
            epsilon: 0.1,
        });
        m.meta.tags.insert("oracle".into(), "http://127.0.0.1:1/v1".into());
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tagged_model();
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..4], b"XLAB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in back.params().iter().zip(m.params()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = encode_model(&tagged_model()).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_model(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(Error::Corrupt(_))));
    }

    #[test]
    fn future_version_is_unsupported() {
        let mut bytes = encode_model(&tagged_model()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode_model(&bytes), Err(Error::UnsupportedVersion(2)));
    }

    #[test]
    fn unknown_layer_in_stored_spec() {
        let m = tagged_model();
        let bytes = encode_model(&m).unwrap();
        let text = m.spec.to_text();
        let patched = text.replace("maxpool", "avgpool");
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        put_str(&mut out, &patched);
        out.extend_from_slice(&bytes[8 + 4 + text.len()..]);
        assert_eq!(
            decode_model(&out),
            Err(Error::UnknownLayer("avgpool".into()))
        );
    }

    #[test]
    fn tensor_blob_round_trip() {
        let a = Tensor::new([2, 3], alloc::vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]).unwrap();
        let b = Tensor::new([1], alloc::vec![0.25]).unwrap();
        let bytes = encode_tensors(&[("inputs", &a), ("soft_labels", &b)]);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back["inputs"], a);
        assert_eq!(back["soft_labels"], b);
    }
}
