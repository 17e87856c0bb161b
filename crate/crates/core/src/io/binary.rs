use std::fs;
use std::path::Path;

use crate::anchor::FeatureCache;
use crate::denoiser::pairnet::Tensor;
use crate::denoiser::{PairFeatures, PairNet, TapKey, TapKind};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

const LATENT_MAGIC: &[u8; 4] = b"ANCH";
const WEIGHT_MAGIC: &[u8; 4] = b"ASWT";
const EMBED_MAGIC: &[u8; 4] = b"ASEM";
const CACHE_MAGIC: &[u8; 4] = b"ASFC";
const VERSION: u32 = 1;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self {
            path,
            bytes,
            pos: 0,
        };
        if r.take(4)? != magic {
            return Err(r.error(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(r)
    }

    fn error(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn version(&mut self) -> Result<()> {
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(self.error(format!("unsupported version {v}"))),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.error("size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.error("size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::contract(format!("{v} does not fit in 32 bits")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32s(&mut self, data: &[f64]) {
        for &v in data {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn f64s(&mut self, data: &[f64]) {
        for &v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Latent block: magic, version, `n c h w`, then `n·c·h·w` f32 values.
pub fn write_latents(path: &Path, latents: &[LatentGrid]) -> Result<()> {
    let (c, h, w) = latents.first().map_or((0, 0, 0), LatentGrid::shape);
    let mut out = Writer(LATENT_MAGIC.to_vec());
    out.u32(VERSION as usize)?;
    for v in [latents.len(), c, h, w] {
        out.u32(v)?;
    }
    for l in latents {
        if l.shape() != (c, h, w) {
            return Err(Error::contract("latent block members differ in shape"));
        }
        out.f32s(l.data());
    }
    fs::write(path, out.0).map_err(super::at(path))?;
    Ok(())
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentGrid>> {
    let bytes = fs::read(path).map_err(super::at(path))?;
    let mut r = Reader::new(path, &bytes, LATENT_MAGIC)?;
    r.version()?;
    let (n, c, h, w) = (r.len()?, r.len()?, r.len()?, r.len()?);
    let size = c * h * w;
    if n > 0 && size == 0 {
        return Err(r.error("zero-sized latents"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let data = r.f32s(size)?;
        out.push(LatentGrid::from_vec(c, h, w, data).map_err(|e| r.error(e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

/// Pair network weights: magic, version, seed (u64), latent channels,
/// tensor count, each tensor's rank and dims, then all weights as f32.
pub fn write_pairnet(path: &Path, net: &PairNet) -> Result<()> {
    let tensors = net.tensors();
    let cfg = net.config();
    let mut out = Writer(WEIGHT_MAGIC.to_vec());
    out.u32(VERSION as usize)?;
    out.0.extend_from_slice(&cfg.seed.to_le_bytes());
    out.u32(cfg.latent_channels)?;
    out.u32(tensors.len())?;
    for t in &tensors {
        out.u32(t.dims.len())?;
        for &d in &t.dims {
            out.u32(d)?;
        }
    }
    for t in &tensors {
        out.f32s(&t.data);
    }
    fs::write(path, out.0).map_err(super::at(path))?;
    Ok(())
}

pub fn read_pairnet(path: &Path) -> Result<PairNet> {
    let bytes = fs::read(path).map_err(super::at(path))?;
    let mut r = Reader::new(path, &bytes, WEIGHT_MAGIC)?;
    r.version()?;
    let seed = r.u64()?;
    let channels = r.len()?;
    let count = r.len()?;
    if count > 64 {
        return Err(r.error(format!("implausible tensor count {count}")));
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.len()?;
        if rank > 8 {
            return Err(r.error(format!("implausible tensor rank {rank}")));
        }
        dims.push((0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?);
    }
    let mut tensors = Vec::with_capacity(count);
    for d in dims {
        let n = d.iter().product();
        tensors.push(Tensor {
            dims: d,
            data: r.f32s(n)?,
        });
    }
    r.finish()?;
    PairNet::from_tensors(channels, seed, tensors).map_err(|e| Error::format(path, e.to_string()))
}

/// Embedding sidecar: magic, count, dim, then `count·dim` f32 values.
pub fn write_embeddings(path: &Path, vectors: &[Vec<f64>]) -> Result<()> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut out = Writer(EMBED_MAGIC.to_vec());
    out.u32(vectors.len())?;
    out.u32(dim)?;
    for v in vectors {
        if v.len() != dim {
            return Err(Error::contract("embedding vectors differ in dimension"));
        }
        out.f32s(v);
    }
    fs::write(path, out.0).map_err(super::at(path))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(super::at(path))?;
    let mut r = Reader::new(path, &bytes, EMBED_MAGIC)?;
    let (count, dim) = (r.len()?, r.len()?);
    if count > 0 && dim == 0 {
        return Err(r.error("zero-dimensional embeddings"));
    }
    let out = (0..count)
        .map(|_| r.f32s(dim))
        .collect::<Result<Vec<_>>>()?;
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(r.error("non-finite embedding value"));
    }
    r.finish()?;
    Ok(out)
}

/// Feature cache: magic, version, pairs, steps, entry count; each entry is
/// `pair t taps` followed by `layer kind len0 len1` and f64 data per tap.
pub fn write_feature_cache(path: &Path, cache: &FeatureCache) -> Result<()> {
    let mut out = Writer(CACHE_MAGIC.to_vec());
    out.u32(VERSION as usize)?;
    out.u32(cache.num_pairs())?;
    out.u32(cache.num_steps())?;
    out.u32(cache.len())?;
    for (&(pair, t), feats) in cache.entries() {
        out.u32(pair)?;
        out.u32(t)?;
        out.u32(feats.len())?;
        for (key, [a, b]) in feats.entries() {
            out.u32(key.layer as usize)?;
            out.u32(key.kind.code() as usize)?;
            out.u32(a.len())?;
            out.u32(b.len())?;
            out.f64s(a);
            out.f64s(b);
        }
    }
    fs::write(path, out.0).map_err(super::at(path))?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureCache> {
    let bytes = fs::read(path).map_err(super::at(path))?;
    let mut r = Reader::new(path, &bytes, CACHE_MAGIC)?;
    r.version()?;
    let mut cache = FeatureCache::new(r.len()?, r.len()?);
    let entries = r.len()?;
    for _ in 0..entries {
        let (pair, t, taps) = (r.len()?, r.len()?, r.len()?);
        let mut feats = PairFeatures::default();
        for _ in 0..taps {
            let layer = r.u32()?;
            let code = r.u32()?;
            let kind = TapKind::from_code(code)
                .ok_or_else(|| r.error(format!("unknown tap kind {code}")))?;
            let (la, lb) = (r.len()?, r.len()?);
            let key = TapKey { layer, kind };
            feats.insert(key, 0, r.f64s(la)?);
            feats.insert(key, 1, r.f64s(lb)?);
        }
        cache.insert(pair, t, feats);
    }
    r.finish()?;
    Ok(cache)
}
