//! Global descriptors: spatial pooling, scale aggregation, whitening and
//! cosine ranking.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{DsmError, Result};
use crate::tensor::{FeatureTensor, TensorSet};

/// Spatial pooling of one activation map into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "p")]
pub enum Pooling {
    Mac,
    Gem(f64),
}

impl Pooling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Pooling::Gem(p) if !(p >= 1.0 && p.is_finite()) => {
                Err(DsmError::invalid(format!("gem p must be >= 1, got {p}")))
            }
            _ => Ok(()),
        }
    }

    /// Scale aggregation paired with this pooling: GeM for GeM, average for MAC.
    pub fn aggregation(&self) -> Aggregation {
        match *self {
            Pooling::Mac => Aggregation::Average,
            Pooling::Gem(p) => Aggregation::Gem(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    Average,
    Gem(f64),
}

/// Power mean of non-negative values; `p = inf` is not accepted.
fn power_mean(values: impl Iterator<Item = f64> + Clone, p: f64) -> f64 {
    // factor out the maximum so that large p cannot overflow
    let max = values.clone().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + (v / max).powf(p), n + 1));
    max * (sum / n as f64).powf(1.0 / p)
}

/// Per-channel pooled values of `tensor`; not normalized.
pub fn pool(tensor: &FeatureTensor, mode: Pooling) -> Vec<f64> {
    (0..tensor.channels())
        .map(|j| {
            let values = tensor.channel(j).iter().map(|&v| v as f64);
            match mode {
                Pooling::Mac => values.fold(0.0, f64::max),
                Pooling::Gem(1.0) => {
                    let n = tensor.channel(j).len();
                    values.sum::<f64>() / n as f64
                }
                Pooling::Gem(p) => power_mean(values, p),
            }
        })
        .collect()
}

/// A k-dimensional image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl GlobalDescriptor {
    /// L2-normalized copy of `values`; a zero or non-finite vector is degenerate.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(DsmError::DegenerateDescriptor);
        }
        Ok(GlobalDescriptor { values: values.into_iter().map(|v| v / norm).collect(), normalized: true })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &GlobalDescriptor) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Rounds every component through `f32`, the precision used on disk.
    pub fn to_storage_precision(mut self) -> Self {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }
}

/// Element-wise aggregation over scales followed by L2 normalization.
pub fn aggregate_scales(per_scale: &[Vec<f64>], mode: Aggregation) -> Result<GlobalDescriptor> {
    let first = per_scale.first().ok_or_else(|| DsmError::invalid("no scales to aggregate"))?;
    let k = first.len();
    if per_scale.iter().any(|v| v.len() != k) {
        return Err(DsmError::invalid("per-scale descriptors differ in length"));
    }
    let agg = (0..k)
        .map(|j| {
            let column = per_scale.iter().map(move |v| v[j]);
            match mode {
                Aggregation::Average => column.sum::<f64>() / per_scale.len() as f64,
                Aggregation::Gem(p) => power_mean(column, p),
            }
        })
        .collect();
    GlobalDescriptor::normalized(agg)
}

/// Multi-scale descriptor of one tensor set.
pub fn describe(set: &TensorSet, mode: Pooling) -> Result<GlobalDescriptor> {
    mode.validate()?;
    let per_scale: Vec<Vec<f64>> = set.scales.iter().map(|s| pool(&s.tensor, mode)).collect();
    aggregate_scales(&per_scale, mode.aggregation())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhiteningKind {
    Identity,
    Pca,
    Supervised,
}

/// `z -> P (z - m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub kind: WhiteningKind,
    pub mean: Vec<f64>,
    /// Row-major `k x k`.
    pub projection: Vec<f64>,
}

impl WhiteningTransform {
    pub fn identity(k: usize) -> Self {
        let mut projection = vec![0.0; k * k];
        for i in 0..k {
            projection[i * k + i] = 1.0;
        }
        WhiteningTransform { kind: WhiteningKind::Identity, mean: vec![0.0; k], projection }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `P (z - m)` without normalization.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let k = self.dim();
        let centered: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        (0..k).map(|i| self.projection[i * k..(i + 1) * k].iter().zip(&centered).map(|(p, c)| p * c).sum()).collect()
    }

    pub fn to_storage_precision(mut self) -> Self {
        for v in self.mean.iter_mut().chain(self.projection.iter_mut()) {
            *v = *v as f32 as f64;
        }
        self
    }
}

fn regularize(mut c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = c.nrows();
    let eps = 1e-6 * c.trace() / k as f64;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DsmError::RankDeficient);
    }
    for i in 0..k {
        c[(i, i)] += eps;
    }
    Ok(c)
}

/// Eigen-decomposition with eigenvalues descending and a sign convention
/// making the largest-magnitude entry of each eigenvector positive.
fn sorted_eigen(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(c);
    let k = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vectors = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (order.iter().map(|&i| eig.eigenvalues[i]).collect(), vectors)
}

fn inverse_sqrt(c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_eigen(c);
    if values.iter().any(|&l| !(l > 0.0)) {
        return Err(DsmError::RankDeficient);
    }
    let scale = DMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|l| l.powf(-0.5))));
    Ok(&vectors * scale * vectors.transpose())
}

fn mean_and_covariance(data: &[Vec<f64>], k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.len() as f64;
    let mut mean = DVector::zeros(k);
    for z in data {
        mean += DVector::from_column_slice(z);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(k, k);
    for z in data {
        let d = DVector::from_column_slice(z) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n;
    (mean, cov)
}

fn to_transform(kind: WhiteningKind, mean: DVector<f64>, p: DMatrix<f64>) -> Result<WhiteningTransform> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(DsmError::RankDeficient);
    }
    let k = mean.len();
    let projection = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| p[(i, j)]).collect();
    Ok(WhiteningTransform { kind, mean: mean.iter().copied().collect(), projection })
}

/// PCA whitening (`pairs = None`) or supervised whitening from matching pairs.
pub fn fit_whitening(descriptors: &[Vec<f64>], pairs: Option<&[(usize, usize)]>) -> Result<WhiteningTransform> {
    let k = descriptors.first().map_or(0, Vec::len);
    if k == 0 || descriptors.iter().any(|z| z.len() != k) {
        return Err(DsmError::invalid("descriptors must be non-empty and of equal length"));
    }
    let (mean, cov) = mean_and_covariance(descriptors, k);
    match pairs {
        None => {
            if descriptors.len() <= k {
                return Err(DsmError::invalid(format!(
                    "pca whitening needs more than {k} descriptors, got {}",
                    descriptors.len()
                )));
            }
            let (values, vectors) = sorted_eigen(regularize(cov)?);
            if values.iter().any(|&l| !(l > 0.0)) {
                return Err(DsmError::RankDeficient);
            }
            let scale = DMatrix::from_diagonal(&DVector::from_iterator(k, values.iter().map(|l| l.powf(-0.5))));
            to_transform(WhiteningKind::Pca, mean, scale * vectors.transpose())
        }
        Some(pairs) => {
            if pairs.len() < k {
                return Err(DsmError::invalid(format!(
                    "supervised whitening needs at least {k} pairs, got {}",
                    pairs.len()
                )));
            }
            let mut cs = DMatrix::zeros(k, k);
            for &(i, j) in pairs {
                let (zi, zj) = (descriptors.get(i), descriptors.get(j));
                let (zi, zj) = zi.zip(zj).ok_or_else(|| DsmError::invalid(format!("pair ({i}, {j}) out of range")))?;
                let d = DVector::from_iterator(k, zi.iter().zip(zj).map(|(a, b)| a - b));
                cs.ger(1.0, &d, &d, 1.0);
            }
            cs /= pairs.len() as f64;
            let cs_isqrt = inverse_sqrt(regularize(cs)?)?;
            let between = &cs_isqrt * regularize(cov)? * &cs_isqrt;
            let (_, rotation) = sorted_eigen((&between + between.transpose()) * 0.5);
            to_transform(WhiteningKind::Supervised, mean, rotation.transpose() * cs_isqrt)
        }
    }
}

/// `normalize(P (z - m))`.
pub fn apply_whitening(t: &WhiteningTransform, z: &[f64]) -> Result<GlobalDescriptor> {
    if z.len() != t.dim() {
        return Err(DsmError::invalid(format!("descriptor has {} dimensions, whitening expects {}", z.len(), t.dim())));
    }
    GlobalDescriptor::normalized(t.project(z))
}

/// Database indices with scores, by descending dot product then ascending index.
pub fn cosine_rank(query: &GlobalDescriptor, db: &[GlobalDescriptor]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = db.iter().map(|d| query.dot(d)).enumerate().collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    scored
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(values: &[f32]) -> FeatureTensor {
        FeatureTensor::new(1, 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let t = tensor(&[0.0, 0.0, 4.0]);
        assert_eq!(pool(&t, Pooling::Mac), vec![4.0]);
        assert!((pool(&t, Pooling::Gem(1.0))[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((pool(&t, Pooling::Gem(3.0))[0] - 2.7734).abs() < 1e-4);
        assert_eq!(pool(&FeatureTensor::zeros(2, 2, 2), Pooling::Gem(3.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate_scales(&[vec![3.0, 4.0]], Aggregation::Average).unwrap();
        assert_eq!(one.values, vec![0.6, 0.8]);
        let avg = aggregate_scales(&[vec![1.0, 0.0], vec![0.0, 1.0]], Aggregation::Average).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((avg.values[0] - h).abs() < 1e-15 && (avg.values[1] - h).abs() < 1e-15);
        let same = aggregate_scales(&vec![vec![1.0, 2.0]; 3], Aggregation::Gem(3.0)).unwrap();
        let n = 5f64.sqrt();
        assert!((same.values[0] - 1.0 / n).abs() < 1e-12 && (same.values[1] - 2.0 / n).abs() < 1e-12);
        assert!(aggregate_scales(&[], Aggregation::Average).is_err());
        assert!(matches!(
            aggregate_scales(&[vec![0.0, 0.0]], Aggregation::Average),
            Err(DsmError::DegenerateDescriptor)
        ));
    }

    #[test]
    fn whitening_application() {
        let id = WhiteningTransform::identity(2);
        assert_eq!(apply_whitening(&id, &[0.6, 0.8]).unwrap().values, vec![0.6, 0.8]);
        let t =
            WhiteningTransform { kind: WhiteningKind::Pca, mean: vec![0.5, 0.5], projection: vec![2.0, 0.0, 0.0, 1.0] };
        assert!(matches!(apply_whitening(&t, &[0.5, 0.5]), Err(DsmError::DegenerateDescriptor)));
        assert!(apply_whitening(&t, &[0.5]).is_err());
    }

    #[test]
    fn fit_preconditions() {
        let few = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(fit_whitening(&few, None).is_err());
        assert!(fit_whitening(&few, Some(&[(0, 1)])).is_err());
        let constant = vec![vec![1.0, 1.0]; 10];
        assert!(matches!(fit_whitening(&constant, None), Err(DsmError::RankDeficient)));
    }

    #[test]
    fn cosine_rank_example() {
        let g = |v: Vec<f64>| GlobalDescriptor::normalized(v).unwrap();
        let db = vec![g(vec![1.0, 0.0]), g(vec![0.6, 0.8]), g(vec![0.0, 1.0])];
        let r = cosine_rank(&g(vec![1.0, 0.0]), &db);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(r.iter().map(|x| x.1).collect::<Vec<_>>(), vec![1.0, 0.6, 0.0]);
        let tied = cosine_rank(&g(vec![1.0, 0.0]), &[g(vec![0.0, 1.0]), g(vec![0.0, 1.0])]);
        assert_eq!(tied[0].0, 0);
    }
}
