//! Activation tensors and the DSMT container.
//!
//! Layout (little-endian, no padding):
//! - `b"DSMT"`, `u32` version (= 1), `u32` metadata length
//! - UTF-8 JSON metadata: image id, network tag and per-scale shapes
//! - per scale, `channels * height * width` `f32` values in `[channel][row][col]` order

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};

pub const DSMT_MAGIC: &[u8; 4] = b"DSMT";
pub const DSMT_VERSION: u32 = 1;

/// Dense post-ReLU activations of one image at one scale, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(DsmError::invalid(format!(
                "tensor has {} values, expected {}x{}x{}",
                values.len(),
                channels,
                height,
                width
            )));
        }
        let tensor = FeatureTensor { channels, height, width, values };
        tensor.check_values(0)?;
        Ok(tensor)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureTensor { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// One channel as a contiguous row-major slice.
    pub fn channel(&self, j: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.values[j * plane..(j + 1) * plane]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    fn check_values(&self, scale: usize) -> Result<()> {
        let plane = self.height * self.width;
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                let (channel, rest) = (i / plane.max(1), i % plane.max(1));
                let (row, col) = (rest / self.width.max(1), rest % self.width.max(1));
                return Err(if v.is_finite() {
                    DsmError::Negative { scale, channel, row, col }
                } else {
                    DsmError::NonFinite { scale, channel, row, col }
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledTensor {
    pub factor: f64,
    pub tensor: FeatureTensor,
}

/// All scales extracted from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    pub image_id: String,
    pub network_tag: String,
    pub scales: Vec<ScaledTensor>,
}

/// Scale factors `1, 1/sqrt(2), 1/2`.
pub fn default_scale_factors() -> [f64; 3] {
    [1.0, std::f64::consts::FRAC_1_SQRT_2, 0.5]
}

impl TensorSet {
    pub fn new(image_id: impl Into<String>, network_tag: impl Into<String>, scales: Vec<ScaledTensor>) -> Result<Self> {
        let set = TensorSet { image_id: image_id.into(), network_tag: network_tag.into(), scales };
        set.validate()?;
        Ok(set)
    }

    /// Single-scale set with factor 1.
    pub fn single(image_id: impl Into<String>, tensor: FeatureTensor) -> Self {
        TensorSet {
            image_id: image_id.into(),
            network_tag: "synthetic".into(),
            scales: vec![ScaledTensor { factor: 1.0, tensor }],
        }
    }

    pub fn channels(&self) -> usize {
        self.scales.first().map_or(0, |s| s.tensor.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.scales.first().ok_or_else(|| DsmError::invalid("no scales"))?;
        for (i, s) in self.scales.iter().enumerate() {
            if !(s.factor.is_finite() && s.factor > 0.0) {
                return Err(DsmError::invalid(format!("scale {i}: bad factor {}", s.factor)));
            }
            if i > 0 && s.factor >= self.scales[i - 1].factor {
                return Err(DsmError::invalid("scale factors must be strictly decreasing"));
            }
            if s.tensor.channels != first.tensor.channels {
                return Err(DsmError::invalid(format!(
                    "scale {i} has {} channels, expected {}",
                    s.tensor.channels, first.tensor.channels
                )));
            }
            if s.tensor.values.len() != s.tensor.channels * s.tensor.height * s.tensor.width {
                return Err(DsmError::invalid(format!("scale {i}: size mismatch")));
            }
            s.tensor.check_values(i)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DsmtMeta {
    image_id: String,
    network: String,
    scales: Vec<DsmtScaleMeta>,
}

#[derive(Serialize, Deserialize)]
struct DsmtScaleMeta {
    factor: f64,
    channels: u32,
    height: u32,
    width: u32,
}

/// Serializes `set` as DSMT v1 and returns the number of bytes written.
pub fn write_tensor_set<W: Write>(set: &TensorSet, sink: &mut W) -> Result<usize> {
    set.validate()?;
    let meta = DsmtMeta {
        image_id: set.image_id.clone(),
        network: set.network_tag.clone(),
        scales: set
            .scales
            .iter()
            .map(|s| DsmtScaleMeta {
                factor: s.factor,
                channels: s.tensor.channels as u32,
                height: s.tensor.height as u32,
                width: s.tensor.width as u32,
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta)?;

    let payload: usize = set.scales.iter().map(|s| s.tensor.values.len() * 4).sum();
    let mut buf = Vec::with_capacity(12 + meta.len() + payload);
    buf.extend_from_slice(DSMT_MAGIC);
    buf.extend_from_slice(&DSMT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    for s in &set.scales {
        for v in &s.tensor.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

pub fn tensor_set_to_bytes(set: &TensorSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_tensor_set(set, &mut out)?;
    Ok(out)
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => DsmError::Truncated(what.to_string()),
        _ => DsmError::Io(e),
    })
}

fn read_u32<R: Read>(src: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(src, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses and validates a DSMT v1 stream. The stream must end after the last scale.
pub fn read_tensor_set<R: Read>(source: &mut R) -> Result<TensorSet> {
    let mut magic = [0u8; 4];
    read_exact_or(source, &mut magic, "header")?;
    if &magic != DSMT_MAGIC {
        return Err(DsmError::BadMagic { expected: "DSMT" });
    }
    let version = read_u32(source, "header")?;
    if version != DSMT_VERSION {
        return Err(DsmError::UnsupportedVersion(version));
    }
    let meta_len = read_u32(source, "header")? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact_or(source, &mut meta, "metadata")?;
    let meta: DsmtMeta = serde_json::from_slice(&meta)?;
    if meta.scales.is_empty() {
        return Err(DsmError::invalid("no scales"));
    }

    let mut scales = Vec::with_capacity(meta.scales.len());
    for (si, sm) in meta.scales.iter().enumerate() {
        let (k, h, w) = (sm.channels as usize, sm.height as usize, sm.width as usize);
        let count = k
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| DsmError::invalid(format!("scale {si}: shape overflows")))?;
        let mut raw = vec![0u8; count * 4];
        read_exact_or(source, &mut raw, &format!("payload of scale {si}"))?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = FeatureTensor { channels: k, height: h, width: w, values };
        tensor.check_values(si)?;
        scales.push(ScaledTensor { factor: sm.factor, tensor });
    }

    let mut extra = [0u8; 1];
    match source.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(DsmError::invalid("size mismatch: trailing bytes after payload")),
        Err(e) => return Err(DsmError::Io(e)),
    }

    let set = TensorSet { image_id: meta.image_id, network_tag: meta.network, scales };
    set.validate()?;
    Ok(set)
}

/// Gaussian blob rendered by [`synth_tensor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub channel: usize,
    /// (col, row)
    pub center: [f64; 2],
    /// Covariance in (col, row) coordinates, row-major.
    pub cov: [[f64; 2]; 2],
    pub amplitude: f64,
}

/// Renders `amplitude * exp(-1/2 (x - mu)^T cov^-1 (x - mu))` per blob onto a zero tensor.
pub fn synth_tensor(blobs: &[Blob], k: usize, h: usize, w: usize) -> Result<FeatureTensor> {
    let mut acc = vec![0.0f64; k * h * w];
    for (i, b) in blobs.iter().enumerate() {
        if b.channel >= k {
            return Err(DsmError::invalid(format!("blob {i}: channel {} out of range (k = {k})", b.channel)));
        }
        let [cx, cy] = b.center;
        if !(cx >= 0.0 && cy >= 0.0 && cx <= (w as f64 - 1.0) && cy <= (h as f64 - 1.0)) {
            return Err(DsmError::invalid(format!("blob {i}: center outside grid")));
        }
        let [[sxx, sxy], [syx, syy]] = b.cov;
        let det = sxx * syy - sxy * syx;
        if !(sxx > 0.0 && det > 0.0 && (sxy - syx).abs() <= 1e-12 * sxx.max(syy)) {
            return Err(DsmError::invalid(format!("blob {i}: covariance not symmetric positive definite")));
        }
        if !(b.amplitude > 0.0 && b.amplitude.is_finite()) {
            return Err(DsmError::invalid(format!("blob {i}: amplitude must be > 0")));
        }
        let (ixx, ixy, iyy) = (syy / det, -sxy / det, sxx / det);
        let plane = &mut acc[b.channel * h * w..(b.channel + 1) * h * w];
        for row in 0..h {
            let dy = row as f64 - cy;
            for col in 0..w {
                let dx = col as f64 - cx;
                let q = ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy;
                plane[row * w + col] += b.amplitude * (-0.5 * q).exp();
            }
        }
    }
    let values = acc.into_iter().map(|v| v.max(0.0) as f32).collect();
    Ok(FeatureTensor { channels: k, height: h, width: w, values })
}
