//! Flat binary checkpoint format.
//!
//! ```text
//! "STYF"  version:u32  count:u32
//! count × { name_len:u32  name:utf8  rank:u32  dims:u32[rank]  payload:f32[∏dims] }
//! crc32:u32   (over the concatenated payload bytes of every tensor)
//! ```
//!
//! All integers and floats are little-endian. Scalar metadata (model
//! dimensions, variant code, network kind) travels as `meta.*` tensors.

use std::collections::HashSet;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{bail, Result};
use crate::models::{Comparator, Discriminator, GeneratorBundle, LanguageModel};
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, Variant};

pub const MAGIC: &[u8; 4] = b"STYF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Kind {
    LanguageModel,
    Generator,
    Comparator,
    Discriminator,
}

impl Kind {
    fn code(&self) -> f32 {
        match self {
            Kind::LanguageModel => 1.0,
            Kind::Generator => 2.0,
            Kind::Comparator => 3.0,
            Kind::Discriminator => 4.0,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Kind::LanguageModel => "language model",
            Kind::Generator => "generator",
            Kind::Comparator => "comparator",
            Kind::Discriminator => "discriminator",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_meta(&mut self, key: &str, value: f32) {
        self.push(format!("meta.{key}"), Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<f32> {
        match self.get(&format!("meta.{key}")) {
            Some(t) => Ok(t.item()),
            None => bail!(Integrity, "checkpoint lacks metadata {key:?}"),
        }
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            bail!(Integrity, "metadata {key:?} is not a count: {v}");
        }
        Ok(v as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut crc = crc32fast::Hasher::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let start = out.len();
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&out[start..]);
        }
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Integrity, "not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Integrity, "unsupported checkpoint version {version}");
        }
        let count = r.u32()? as usize;
        let mut crc = crc32fast::Hasher::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| crate::Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                bail!(Integrity, "duplicate tensor name {name:?}");
            }
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(n) = n.filter(|&n| n > 0 && n <= bytes.len() / 4) else {
                bail!(Integrity, "tensor {name:?} has implausible dims {dims:?}");
            };
            let payload = r.take(n * 4)?;
            crc.update(payload);
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            bail!(Integrity, "{} trailing bytes after checkpoint", bytes.len() - r.pos);
        }
        if crc.finalize() != stored {
            bail!(Integrity, "checksum mismatch: checkpoint is corrupt");
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            bail!(MissingArtifact, "checkpoint {} not found", path.display());
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn with_store(kind: &Kind, store: &ParamStore) -> Self {
        let mut c = Checkpoint::default();
        c.push_meta("kind", kind.code());
        for (name, t) in store.iter() {
            c.push(name, t.clone());
        }
        c
    }

    fn expect_kind(&self, kind: &Kind) -> Result<()> {
        if self.meta("kind")? != kind.code() {
            bail!(Integrity, "checkpoint does not hold a {}", kind.name());
        }
        Ok(())
    }

    /// Overwrite every parameter of `store` from same-named tensors.
    fn fill(&self, store: &mut ParamStore) -> Result<()> {
        let params = self.tensors.iter().filter(|(n, _)| !n.starts_with("meta.")).count();
        if params != store.len() {
            bail!(Integrity, "checkpoint has {params} parameters, model expects {}", store.len());
        }
        for id in 0..store.len() {
            let name = store.name(id).to_string();
            let Some(t) = self.get(&name) else {
                bail!(Integrity, "checkpoint lacks parameter {name:?}");
            };
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    fn push_model_config(&mut self, c: &ModelConfig) {
        self.push_meta("hidden", c.hidden as f32);
        self.push_meta("heads", c.heads as f32);
        self.push_meta("layers", c.layers as f32);
        self.push_meta("max_len", c.max_len as f32);
        self.push_meta("vocab", c.vocab as f32);
        self.push_meta("variant", c.variant.code() as f32);
        self.push_meta("ln_eps", c.ln_eps);
    }

    fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            hidden: self.meta_usize("hidden")?,
            heads: self.meta_usize("heads")?,
            layers: self.meta_usize("layers")?,
            max_len: self.meta_usize("max_len")?,
            vocab: self.meta_usize("vocab")?,
            variant: Variant::from_code(self.meta_usize("variant")? as u32)?,
            ln_eps: self.meta("ln_eps")?,
        })
    }

    pub fn from_lm(lm: &LanguageModel) -> Self {
        let mut c = Self::with_store(&Kind::LanguageModel, &lm.store);
        c.push_model_config(lm.config());
        c
    }

    pub fn to_lm(&self) -> Result<LanguageModel> {
        self.expect_kind(&Kind::LanguageModel)?;
        let mut lm = LanguageModel::new(&self.model_config()?, 0)?;
        self.fill(&mut lm.store)?;
        Ok(lm)
    }

    pub fn from_generator(g: &GeneratorBundle) -> Self {
        let mut c = Self::with_store(&Kind::Generator, &g.store);
        c.push_model_config(g.config());
        c
    }

    pub fn to_generator(&self) -> Result<GeneratorBundle> {
        self.expect_kind(&Kind::Generator)?;
        let mut g = GeneratorBundle::new(&self.model_config()?, 0)?;
        self.fill(&mut g.store)?;
        Ok(g)
    }

    pub fn from_comparator(cmp: &Comparator) -> Self {
        let mut c = Self::with_store(&Kind::Comparator, &cmp.store);
        c.push_meta("width", cmp.width as f32);
        c
    }

    pub fn to_comparator(&self) -> Result<Comparator> {
        self.expect_kind(&Kind::Comparator)?;
        let mut cmp = Comparator::new(self.meta_usize("width")?, 0);
        self.fill(&mut cmp.store)?;
        Ok(cmp)
    }

    pub fn from_discriminator(d: &Discriminator) -> Self {
        let mut c = Self::with_store(&Kind::Discriminator, &d.store);
        c.push_model_config(&d.net.config);
        c
    }

    pub fn to_discriminator(&self) -> Result<Discriminator> {
        self.expect_kind(&Kind::Discriminator)?;
        let cfg = self.model_config()?;
        let mut d = Discriminator::new(&cfg, cfg.layers, 0)?;
        self.fill(&mut d.store)?;
        Ok(d)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Integrity, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { hidden: 8, heads: 2, layers: 1, max_len: 10, vocab: 260, variant: Variant::None, ln_eps: 1e-5 }
    }

    #[test]
    fn byte_layout() {
        let mut c = Checkpoint::default();
        c.push("w", Tensor::row(vec![1.0, -2.0]));
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"STYF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        // name_len, "w", rank, 2 dims, 2 floats, crc
        assert_eq!(b.len(), 12 + 4 + 1 + 4 + 8 + 8 + 4);
        let payload = &b[b.len() - 12..b.len() - 4];
        assert_eq!(u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap()), crc32fast::hash(payload));
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let lm = LanguageModel::new(&tiny(), 3).unwrap();
        let bytes = Checkpoint::from_lm(&lm).to_bytes();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(crate::Error::Integrity(_))));
        assert!(Checkpoint::from_bytes(&bytes[..n - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn model_round_trips() {
        let lm = LanguageModel::new(&tiny(), 3).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_lm(&lm).to_bytes()).unwrap().to_lm().unwrap();
        assert_eq!(back.store.digest(), lm.store.digest());
        assert_eq!(back.config(), lm.config());
        let g = GeneratorBundle::new(&tiny().with_variant(Variant::B), 4).unwrap();
        let back = Checkpoint::from_generator(&g).to_generator().unwrap();
        assert_eq!(back.store.digest(), g.store.digest());
        assert_eq!(back.variant(), Variant::B);
        assert!(Checkpoint::from_generator(&g).to_lm().is_err());
        let c = Comparator::new(8, 1);
        assert_eq!(Checkpoint::from_comparator(&c).to_comparator().unwrap().store.digest(), c.store.digest());
        let d = Discriminator::new(&tiny(), 1, 2).unwrap();
        assert_eq!(Checkpoint::from_discriminator(&d).to_discriminator().unwrap().store.digest(), d.store.digest());
    }
}
