//! Named weight tensors and the `MBFW` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"MBFW"
//! version    u32 = 1
//! count      u32
//! count × {
//!     name_len  u16
//!     name      [u8; name_len]   UTF-8
//!     rank      u8               1..=4
//!     dims      [u32; rank]
//!     payload   [f32; prod(dims)]
//! }
//! ```
//!
//! Version 1 carries no checksum. Loading rejects anything that does not parse
//! exactly: unknown magic or version, truncation, trailing bytes, duplicate
//! names, zero dimensions and non-finite payloads.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{FlipHeadSpec, Init, WeightBinding};
use crate::ops::{BatchNormParams, ConvParams, DwConvParams, FcParams, PReLUParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MBFW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor>,
    /// Architecture id; informational, not part of the on-disk format.
    pub arch: Option<String>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces an existing tensor in place, keeping its position.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        Ok(std::mem::replace(slot, t))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn float_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Bitwise equality of names, order, shapes and payloads.
    pub fn bitwise_eq(&self, other: &WeightStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Checks that every binding is present with the right shape and that no
    /// unbound tensors are present.
    pub fn validate(&self, bindings: &[WeightBinding]) -> Result<()> {
        for b in bindings {
            let t = self.get(&b.name)?;
            if t.shape() != b.shape.as_slice() {
                return Err(Error::WeightShape { name: b.name.clone(), expected: b.shape.clone(), actual: t.shape().to_vec() });
            }
            t.validate_finite(&b.name)?;
        }
        if self.len() != bindings.len() {
            let bound: std::collections::HashSet<&str> = bindings.iter().map(|b| b.name.as_str()).collect();
            if let Some((name, _)) = self.iter().find(|(n, _)| !bound.contains(n)) {
                return Err(Error::UnexpectedWeight(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn conv(&self, prefix: &str, stride: usize, padding: usize, bias: bool) -> Result<ConvParams> {
        Ok(ConvParams {
            kernel: self.get(&format!("{prefix}.weight"))?.clone(),
            bias: if bias { Some(self.get(&format!("{prefix}.bias"))?.clone()) } else { None },
            stride,
            padding,
        })
    }

    pub fn dwconv(&self, prefix: &str, stride: usize, padding: usize) -> Result<DwConvParams> {
        Ok(DwConvParams { kernel: self.get(&format!("{prefix}.weight"))?.clone(), stride, padding })
    }

    pub fn batchnorm(&self, prefix: &str, epsilon: f32) -> Result<BatchNormParams> {
        Ok(BatchNormParams {
            gamma: self.get(&format!("{prefix}.gamma"))?.clone(),
            beta: self.get(&format!("{prefix}.beta"))?.clone(),
            running_mean: self.get(&format!("{prefix}.running_mean"))?.clone(),
            running_var: self.get(&format!("{prefix}.running_var"))?.clone(),
            epsilon,
        })
    }

    pub fn prelu(&self, prefix: &str) -> Result<PReLUParams> {
        Ok(PReLUParams { slopes: self.get(&format!("{prefix}.slope"))?.clone() })
    }

    pub fn fc(&self, prefix: &str) -> Result<FcParams> {
        Ok(FcParams {
            weight: self.get(&format!("{prefix}.weight"))?.clone(),
            bias: self.get(&format!("{prefix}.bias"))?.clone(),
        })
    }

    /// The flip head stored alongside a backbone with embedding size `dim`,
    /// with its hidden width read from `flip.fc1.weight`. `None` if absent.
    pub fn flip_head(&self, dim: usize) -> Result<Option<FlipHeadSpec>> {
        let Ok(fc1) = self.get("flip.fc1.weight") else { return Ok(None) };
        match *fc1.shape() {
            [hidden, d] if d == dim => Ok(Some(FlipHeadSpec { dim, hidden })),
            _ => Err(Error::WeightShape {
                name: "flip.fc1.weight".into(),
                expected: vec![dim, dim],
                actual: fc1.shape().to_vec(),
            }),
        }
    }

    /// Inserts (or overwrites) an exactly identity-acting flip head of width
    /// `2 * dim`: `fc1 = [I; -I]`, `fc2 = [I, -I]`, zero biases, so that
    /// `fc2(relu(fc1 f)) = relu(f) - relu(-f) = f` for every `f`.
    pub fn set_identity_flip_head(&mut self, dim: usize) -> Result<FlipHeadSpec> {
        let head = FlipHeadSpec { dim, hidden: 2 * dim };
        let fc1 = Tensor::from_fn(&[2 * dim, dim], |i| {
            let (r, c) = (i / dim, i % dim);
            if r == c {
                1.0
            } else if r == c + dim {
                -1.0
            } else {
                0.0
            }
        })?;
        let fc2 = Tensor::from_fn(&[dim, 2 * dim], |i| {
            let (r, c) = (i / (2 * dim), i % (2 * dim));
            if c == r {
                1.0
            } else if c == r + dim {
                -1.0
            } else {
                0.0
            }
        })?;
        let entries = [
            ("flip.fc1.weight", fc1),
            ("flip.fc1.bias", Tensor::zeros(&[2 * dim])?),
            ("flip.fc2.weight", fc2),
            ("flip.fc2.bias", Tensor::zeros(&[dim])?),
        ];
        for (name, t) in entries {
            if self.contains(name) {
                self.replace(name, t)?;
            } else {
                self.insert(name, t)?;
            }
        }
        Ok(head)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(12 + self.float_count() * 4 + self.len() * 64);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.len()).map_err(|_| Error::Malformed("too many entries".into()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.iter() {
            let len = u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} exceeds u32")))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut store = WeightStore::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Malformed(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Malformed(format!("entry `{name}`: rank {rank} outside 1..=4")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            if shape.contains(&0) {
                return Err(Error::Malformed(format!("entry `{name}`: zero dimension in {shape:?}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Malformed(format!("entry `{name}`: shape {shape:?} overflows")))?;
            let payload = r.take(numel * 4, &format!("payload of `{name}`"))?;
            let data: Vec<f32> =
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&shape, data)?;
            t.validate_finite(&name)?;
            store.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("reading {what} at byte {}", self.pos))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// One tensor per binding, drawn in binding order from a ChaCha8 stream
/// seeded with `seed`.
pub fn init_random(bindings: &[WeightBinding], seed: u64) -> Result<WeightStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for b in bindings {
        let t = match b.init {
            Init::Constant(v) => Tensor::full(&b.shape, v)?,
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0f64, std).map_err(|e| Error::InvalidParam(e.to_string()))?;
                Tensor::from_fn(&b.shape, |_| dist.sample(&mut rng) as f32)?
            }
        };
        store.insert(b.name.clone(), t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Architecture, MOBIFACE};

    fn small_store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 - 2.5).unwrap()).unwrap();
        s.insert("a.bias", Tensor::vector(vec![0.5, -0.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn exact_byte_layout() {
        let mut s = WeightStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = s.to_bytes().unwrap();
        let mut want = b"MBFW".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend([1, 0, b'w', 1, 2, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_and_empty() {
        let s = small_store();
        let back = WeightStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert!(back.bitwise_eq(&s));

        let empty = WeightStore::new();
        let bytes = empty.to_bytes().unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(WeightStore::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = small_store().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(WeightStore::from_bytes(&v2), Err(Error::Version(2))));

        for cut in [3, 11, 15, bytes.len() - 1] {
            assert!(matches!(WeightStore::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(WeightStore::from_bytes(&trailing), Err(Error::Malformed(_))));

        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(WeightStore::from_bytes(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut s = WeightStore::new();
        s.insert("x", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(s.insert("x", Tensor::vector(vec![2.0]).unwrap()).is_err());
        // hand-build a file with the same entry twice
        let one = s.to_bytes().unwrap();
        let entry = &one[12..];
        let mut dup = b"MBFW".to_vec();
        dup.extend(1u32.to_le_bytes());
        dup.extend(2u32.to_le_bytes());
        dup.extend(entry);
        dup.extend(entry);
        assert!(matches!(WeightStore::from_bytes(&dup), Err(Error::DuplicateName(n)) if n == "x"));
    }

    #[test]
    fn init_random_is_seeded() {
        let arch = Architecture::by_name(MOBIFACE).unwrap();
        let b = arch.weight_bindings();
        let a1 = init_random(&b, 7).unwrap();
        let a2 = init_random(&b, 7).unwrap();
        let a3 = init_random(&b, 8).unwrap();
        assert!(a1.bitwise_eq(&a2));
        assert!(!a1.bitwise_eq(&a3));
        a1.validate(&b).unwrap();
        assert_eq!(a1.float_count(), b.iter().map(WeightBinding::numel).sum::<usize>());
        assert_eq!(a1.get("stem.bn.running_var").unwrap().data()[0], 1.0);
        assert_eq!(a1.get("stem.prelu.slope").unwrap().data()[0], 0.25);
    }

    #[test]
    fn validation_catches_shape_and_extras() {
        let arch = Architecture::by_name(MOBIFACE).unwrap();
        let b = arch.weight_bindings();
        let mut s = init_random(&b, 1).unwrap();
        s.replace("fc.bias", Tensor::zeros(&[511]).unwrap()).unwrap();
        assert!(matches!(s.validate(&b), Err(Error::WeightShape { .. })));
        let mut s = init_random(&b, 1).unwrap();
        s.insert("stray", Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(matches!(s.validate(&b), Err(Error::UnexpectedWeight(_))));
    }
}
