//! The retrieval index and its DSMI container.
//!
//! Layout (little-endian): `b"DSMI"`, `u32` version (= 1), then sections in
//! fixed order, each a 4-byte ASCII tag, a `u64` payload length and the
//! payload:
//! - `META` JSON: ids, config, delta, channel count, whitening kind
//! - `DESC` `u32 n`, `u32 k`, `n * k` `f32`
//! - `WHIT` `u32 k`, `k` `f32` mean, `k * k` `f32` projection (row-major)
//! - `FEAT` per image `u32 count`, then 27-byte records
//!   (`u8` scale, `u16` channel, `f32` mu x2, sigma x3, strength)
//! - `GRAF` (optional) `u32 n`, `u32 K`, per node `K` (`u32` neighbour, `f32` affinity)

use std::collections::{BTreeSet, HashMap};
use std::io::{ErrorKind, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, WhiteningMode};
use crate::diffusion::{build_knn_graph, KnnGraph, NO_NEIGHBOR};
use crate::error::{DsmError, Result};
use crate::features::{detect_features, FeatureCollection, LocalFeature, Role};
use crate::global::{apply_whitening, describe, fit_whitening, GlobalDescriptor, WhiteningKind, WhiteningTransform};
use crate::mser::compute_delta;
use crate::tensor::TensorSet;

pub const DSMI_MAGIC: &[u8; 4] = b"DSMI";
pub const DSMI_VERSION: u32 = 1;
pub const FEATURE_RECORD_BYTES: usize = 27;

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub image_ids: Vec<String>,
    /// Whitened, normalized; row `i` belongs to `image_ids[i]`.
    pub descriptors: Vec<GlobalDescriptor>,
    pub whitening: WhiteningTransform,
    /// Database-role features of every scale, one collection per image.
    pub features: Vec<FeatureCollection>,
    pub graph: Option<KnnGraph>,
    pub config: Config,
    /// MSER step used for every image, queries included.
    pub delta: f64,
    pub channels: usize,
}

impl Index {
    pub fn empty(config: Config) -> Self {
        Index {
            image_ids: Vec::new(),
            descriptors: Vec::new(),
            whitening: WhiteningTransform::identity(0),
            features: Vec::new(),
            graph: None,
            config,
            delta: 1.0,
            channels: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.image_ids.iter().position(|id| id == image_id)
    }

    /// Features of image `i` split by scale.
    pub fn scale_features(&self, i: usize) -> Vec<FeatureCollection> {
        let f = &self.features[i];
        f.split_scales(f.scale_count().max(1))
    }
}

/// MSER step from every activation value of every scale of `sets`.
pub fn dataset_delta(sets: &[TensorSet], fraction: f64) -> Result<f64> {
    let sample: Vec<f32> =
        sets.iter().flat_map(|s| s.scales.iter().flat_map(|t| t.tensor.values().iter().copied())).collect();
    compute_delta(&sample, fraction)
}

/// Detects database features, pools and whitens descriptors and optionally
/// builds the diffusion graph. Images are processed in image-id order; `pairs`
/// names matching images for supervised whitening.
pub fn build_index(mut sets: Vec<TensorSet>, config: &Config, pairs: Option<&[(String, String)]>) -> Result<Index> {
    config.validate()?;
    if sets.is_empty() {
        return Err(DsmError::invalid("no tensor sets to index"));
    }
    sets.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for w in sets.windows(2) {
        if w[0].image_id == w[1].image_id {
            return Err(DsmError::DuplicateImageId(w[0].image_id.clone()));
        }
    }
    let k = sets[0].channels();
    for s in &sets {
        s.validate()?;
        if s.channels() != k {
            return Err(DsmError::invalid(format!(
                "image {:?} has {} channels, expected {k}",
                s.image_id,
                s.channels()
            )));
        }
    }
    if k > u16::MAX as usize + 1 {
        return Err(DsmError::invalid(format!("{k} channels exceed the index limit")));
    }

    let delta = dataset_delta(&sets, config.delta_fraction)?;

    let det = config.detector_params(delta);
    let fparams = config.feature_params();
    let pooling = config.global_pooling();
    let per_image: Vec<(FeatureCollection, GlobalDescriptor)> = sets
        .par_iter()
        .map(|s| {
            let mut f = detect_features(s, &det, Role::Database, &fparams)?;
            for list in &mut f.per_channel {
                for x in list.iter_mut() {
                    *x = x.to_storage_precision();
                }
            }
            let f = FeatureCollection::from_features(
                f.image_id.clone(),
                Role::Database,
                k,
                f.iter().copied().collect::<Vec<_>>(),
            );
            Ok((f, describe(s, pooling)?))
        })
        .collect::<Result<_>>()?;
    let (features, raw): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
    let raw: Vec<Vec<f64>> = raw.into_iter().map(|d: GlobalDescriptor| d.values).collect();

    let image_ids: Vec<String> = sets.iter().map(|s| s.image_id.clone()).collect();
    let whitening = fit_for_config(&raw, &image_ids, config, pairs)?.to_storage_precision();
    let descriptors =
        raw.iter().map(|z| Ok(apply_whitening(&whitening, z)?.to_storage_precision())).collect::<Result<Vec<_>>>()?;
    let graph = if config.diffusion { Some(build_knn_graph(&descriptors, config.knn_k, config.gamma)?) } else { None };
    Ok(Index { image_ids, descriptors, whitening, features, graph, config: config.clone(), delta, channels: k })
}

fn fit_for_config(
    raw: &[Vec<f64>],
    ids: &[String],
    config: &Config,
    pairs: Option<&[(String, String)]>,
) -> Result<WhiteningTransform> {
    let k = raw[0].len();
    if let Some(pairs) = pairs {
        let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let lookup = |id: &String| pos.get(id.as_str()).copied().ok_or_else(|| DsmError::UnknownImageId(id.clone()));
        let idx = pairs.iter().map(|(a, b)| Ok((lookup(a)?, lookup(b)?))).collect::<Result<Vec<_>>>()?;
        return fit_whitening(raw, Some(&idx));
    }
    match config.whitening {
        WhiteningMode::None => Ok(WhiteningTransform::identity(k)),
        WhiteningMode::Pca => fit_whitening(raw, None),
        WhiteningMode::Auto if raw.len() > k => fit_whitening(raw, None),
        WhiteningMode::Auto => Ok(WhiteningTransform::identity(k)),
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    ids: Vec<String>,
    config: Config,
    delta: f64,
    channels: usize,
    whitening: WhiteningKind,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn index_to_bytes(index: &Index) -> Result<Vec<u8>> {
    let n = index.len();
    let k = index.channels;
    if index.descriptors.len() != n || index.features.len() != n {
        return Err(DsmError::invalid("index rows disagree in length"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DSMI_MAGIC);
    put_u32(&mut out, DSMI_VERSION);

    let meta = Meta {
        ids: index.image_ids.clone(),
        config: index.config.clone(),
        delta: index.delta,
        channels: k,
        whitening: index.whitening.kind,
    };
    put_section(&mut out, b"META", &serde_json::to_vec(&meta)?);

    let mut desc = Vec::with_capacity(8 + n * k * 4);
    put_u32(&mut desc, n as u32);
    put_u32(&mut desc, k as u32);
    for d in &index.descriptors {
        if d.dim() != k {
            return Err(DsmError::invalid("descriptor dimension differs from channel count"));
        }
        d.values.iter().for_each(|&v| put_f32(&mut desc, v));
    }
    put_section(&mut out, b"DESC", &desc);

    let w = &index.whitening;
    if w.dim() != k || w.projection.len() != k * k {
        return Err(DsmError::invalid("whitening dimension differs from channel count"));
    }
    let mut whit = Vec::with_capacity(4 + (k + k * k) * 4);
    put_u32(&mut whit, k as u32);
    w.mean.iter().chain(&w.projection).for_each(|&v| put_f32(&mut whit, v));
    put_section(&mut out, b"WHIT", &whit);

    let mut feat = Vec::new();
    for c in &index.features {
        put_u32(&mut feat, c.len() as u32);
        for f in c.iter() {
            feat.push(f.scale_index);
            feat.extend_from_slice(&(f.channel as u16).to_le_bytes());
            for v in [f.mu[0], f.mu[1], f.sigma[0], f.sigma[1], f.sigma[2], f.strength] {
                put_f32(&mut feat, v);
            }
        }
    }
    put_section(&mut out, b"FEAT", &feat);

    if let Some(g) = &index.graph {
        let mut graf = Vec::new();
        put_u32(&mut graf, g.len() as u32);
        put_u32(&mut graf, g.k() as u32);
        for list in g.neighbors() {
            for slot in 0..g.k() {
                let (j, a) = list.get(slot).copied().unwrap_or((NO_NEIGHBOR, 0.0));
                put_u32(&mut graf, j);
                graf.extend_from_slice(&a.to_le_bytes());
            }
        }
        put_section(&mut out, b"GRAF", &graf);
    }
    Ok(out)
}

pub fn write_index<W: Write>(index: &Index, sink: &mut W) -> Result<usize> {
    let bytes = index_to_bytes(index)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

/// Bounds-checked little-endian reader over one section payload.
struct Cursor<'a> {
    section: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < len {
            return Err(DsmError::section(self.section, format!("payload ends at byte {}", self.data.len())));
        }
        let s = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(DsmError::section(self.section, "non-finite value"));
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(DsmError::section(self.section, format!("{} unread bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => DsmError::Truncated(what.to_string()),
        _ => DsmError::Io(e),
    })
}

/// Reads the next section, which must carry `tag`. `Ok(None)` on a clean end
/// of stream when `optional`.
fn read_section<R: Read>(src: &mut R, tag: &'static str, optional: bool) -> Result<Option<Vec<u8>>> {
    let mut head = [0u8; 4];
    let got = read_up_to(src, &mut head)?;
    if got == 0 && optional {
        return Ok(None);
    }
    if got < 4 {
        return Err(DsmError::Truncated(format!("section {tag} header")));
    }
    if head != tag.as_bytes() {
        return Err(DsmError::section(tag, format!("found tag {:?}", String::from_utf8_lossy(&head))));
    }
    let mut len = [0u8; 8];
    read_exact_or(src, &mut len, &format!("section {tag} header"))?;
    let len = u64::from_le_bytes(len);
    let mut payload = Vec::new();
    src.take(len).read_to_end(&mut payload)?;
    if (payload.len() as u64) < len {
        return Err(DsmError::section(tag, format!("declared {len} bytes, only {} present", payload.len())));
    }
    Ok(Some(payload))
}

fn read_up_to<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match src.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(m) => got += m,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

/// Parses and validates a DSMI v1 stream. The stream must end after the last section.
pub fn read_index<R: Read>(src: &mut R) -> Result<Index> {
    let mut magic = [0u8; 4];
    read_exact_or(src, &mut magic, "header")?;
    if &magic != DSMI_MAGIC {
        return Err(DsmError::BadMagic { expected: "DSMI" });
    }
    let mut version = [0u8; 4];
    read_exact_or(src, &mut version, "header")?;
    let version = u32::from_le_bytes(version);
    if version != DSMI_VERSION {
        return Err(DsmError::UnsupportedVersion(version));
    }

    let meta_bytes = read_section(src, "META", false)?.unwrap();
    let meta: Meta = serde_json::from_slice(&meta_bytes).map_err(|e| DsmError::section("META", e.to_string()))?;
    meta.config.validate().map_err(|e| DsmError::section("META", e.to_string()))?;
    let n = meta.ids.len();
    let k = meta.channels;
    if meta.ids.iter().collect::<BTreeSet<_>>().len() != n {
        return Err(DsmError::section("META", "duplicate image ids"));
    }
    if !(meta.delta > 0.0 && meta.delta.is_finite()) {
        return Err(DsmError::section("META", "delta must be positive"));
    }

    let payload = read_section(src, "DESC", false)?.unwrap();
    let mut c = Cursor { section: "DESC", data: &payload, pos: 0 };
    let (dn, dk) = (c.u32()? as usize, c.u32()? as usize);
    if dn != n || dk != k {
        return Err(DsmError::section("DESC", format!("shape {dn}x{dk}, expected {n}x{k}")));
    }
    let mut descriptors = Vec::with_capacity(n);
    for _ in 0..n {
        let values = (0..k).map(|_| Ok(c.f32()? as f64)).collect::<Result<Vec<_>>>()?;
        descriptors.push(GlobalDescriptor { values, normalized: true });
    }
    c.finish()?;

    let payload = read_section(src, "WHIT", false)?.unwrap();
    let mut c = Cursor { section: "WHIT", data: &payload, pos: 0 };
    if c.u32()? as usize != k {
        return Err(DsmError::section("WHIT", "dimension differs from channel count"));
    }
    let mean = (0..k).map(|_| Ok(c.f32()? as f64)).collect::<Result<Vec<_>>>()?;
    let projection = (0..k * k).map(|_| Ok(c.f32()? as f64)).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    let whitening = WhiteningTransform { kind: meta.whitening, mean, projection };

    let payload = read_section(src, "FEAT", false)?.unwrap();
    let mut c = Cursor { section: "FEAT", data: &payload, pos: 0 };
    let mut features = Vec::with_capacity(n);
    for id in &meta.ids {
        let count = c.u32()? as usize;
        if count > (payload.len() - c.pos) / FEATURE_RECORD_BYTES {
            return Err(DsmError::section("FEAT", format!("image {id:?} declares {count} features")));
        }
        let mut list = Vec::with_capacity(count);
        for _ in 0..count {
            let scale_index = c.u8()?;
            let channel = c.u16()? as u32;
            let mut v = [0.0f64; 6];
            for x in &mut v {
                *x = c.f32()? as f64;
            }
            let f = LocalFeature { mu: [v[0], v[1]], sigma: [v[2], v[3], v[4]], strength: v[5], channel, scale_index };
            if channel as usize >= k || !(f.sigma[0] > 0.0 && f.det_sigma() > 0.0) {
                return Err(DsmError::section("FEAT", format!("invalid feature record for image {id:?}")));
            }
            list.push(f);
        }
        features.push(FeatureCollection::from_features(id.clone(), Role::Database, k, list));
    }
    c.finish()?;

    let graph = match read_section(src, "GRAF", true)? {
        None => None,
        Some(payload) => {
            let mut c = Cursor { section: "GRAF", data: &payload, pos: 0 };
            let (gn, gk) = (c.u32()? as usize, c.u32()? as usize);
            if gn != n {
                return Err(DsmError::section("GRAF", format!("{gn} nodes, expected {n}")));
            }
            if gk.saturating_mul(gn).saturating_mul(8) != payload.len() - 8 {
                return Err(DsmError::section("GRAF", "length disagrees with node and neighbour counts"));
            }
            let mut neighbors = Vec::with_capacity(gn);
            for _ in 0..gn {
                let mut list = Vec::new();
                for _ in 0..gk {
                    let (j, a) = (c.u32()?, c.f32()?);
                    if j != NO_NEIGHBOR {
                        list.push((j, a));
                    }
                }
                neighbors.push(list);
            }
            c.finish()?;
            Some(KnnGraph::from_neighbors(gk, neighbors).map_err(|e| DsmError::section("GRAF", e.to_string()))?)
        }
    };
    let mut rest = [0u8; 1];
    if read_up_to(src, &mut rest)? != 0 {
        return Err(DsmError::invalid("trailing bytes after last section"));
    }

    Ok(Index {
        image_ids: meta.ids,
        descriptors,
        whitening,
        features,
        graph,
        config: meta.config,
        delta: meta.delta,
        channels: k,
    })
}

pub fn index_from_bytes(bytes: &[u8]) -> Result<Index> {
    read_index(&mut &bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{synth_tensor, Blob};

    fn blob_set(id: &str, k: usize, shift: f64) -> TensorSet {
        let blobs: Vec<Blob> = (0..k)
            .map(|j| Blob {
                channel: j,
                center: [4.0 + shift + j as f64, 6.0 + (j % 3) as f64],
                cov: [[2.0, 0.3], [0.3, 1.5]],
                amplitude: 0.5 + 0.1 * j as f64,
            })
            .collect();
        TensorSet::single(id, synth_tensor(&blobs, k, 16, 20).unwrap())
    }

    #[test]
    fn three_image_index() {
        let sets = vec![blob_set("c", 4, 2.0), blob_set("a", 4, 0.0), blob_set("b", 4, 1.0)];
        let index = build_index(sets, &Config::default(), None).unwrap();
        assert_eq!(index.image_ids, vec!["a", "b", "c"]);
        assert_eq!(index.descriptors.len(), 3);
        assert_eq!(index.features.len(), 3);
        assert_eq!(index.graph.as_ref().unwrap().len(), 3);
        assert!(index.features.iter().all(|f| !f.is_empty()));
        let back = index_from_bytes(&index_to_bytes(&index).unwrap()).unwrap();
        assert_eq!(back, index);
    }

    #[test]
    fn duplicate_id_is_named() {
        let err =
            build_index(vec![blob_set("x", 2, 0.0), blob_set("x", 2, 1.0)], &Config::default(), None).unwrap_err();
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn empty_index_round_trips() {
        let index = Index::empty(Config::default());
        let bytes = index_to_bytes(&index).unwrap();
        assert_eq!(index_from_bytes(&bytes).unwrap(), index);
    }

    #[test]
    fn corruption_names_the_section() {
        let index = build_index(vec![blob_set("a", 3, 0.0), blob_set("b", 3, 1.0)], &Config::default(), None).unwrap();
        let bytes = index_to_bytes(&index).unwrap();
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let desc_len_at = 20 + meta_len + 4;
        for delta in [-4i64, 4] {
            let mut bad = bytes.clone();
            let len = u64::from_le_bytes(bad[desc_len_at..desc_len_at + 8].try_into().unwrap()) as i64 + delta;
            bad[desc_len_at..desc_len_at + 8].copy_from_slice(&(len as u64).to_le_bytes());
            let msg = index_from_bytes(&bad).unwrap_err().to_string();
            assert!(msg.contains("DESC"), "{msg}");
        }
        assert!(matches!(index_from_bytes(&bytes[..bytes.len() - 3]), Err(DsmError::Section { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(index_from_bytes(&bad), Err(DsmError::BadMagic { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(index_from_bytes(&long).is_err());
    }
}
