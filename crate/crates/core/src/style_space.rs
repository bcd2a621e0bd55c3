//! The style feature space: concatenated per-layer Gram matrices,
//! embedded by cosine-kernel kernel-PCA, queried with k-nearest-neighbor
//! sub-domain proportions.

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::nets::StyleEncoder;
use crate::tensor::{Graph, Tensor};

/// Channel-by-channel inner-product matrix of a feature map, normalized
/// by `C * H * W`.
#[derive(Clone, Debug)]
pub struct Gram {
    pub dim: usize,
    /// Row-major `dim x dim` values.
    pub values: Vec<f32>,
}

impl Gram {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.dim + j]
    }
}

/// `G = F F^T / (C*H*W)` where `F` is the `C x (H*W)` unfolding of a
/// `[1, C, H, W]` feature map.
pub fn gram(feature: &Tensor) -> Result<Gram> {
    let s = feature.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::InvalidShape(format!(
            "gram expects [1,C,H,W], got {s:?}"
        )));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let data = feature.data();
    let norm = (c * hw) as f64;
    let mut values = vec![0.0f32; c * c];
    for i in 0..c {
        for j in i..c {
            let fi = &data[i * hw..(i + 1) * hw];
            let fj = &data[j * hw..(j + 1) * hw];
            let dot: f64 = fi
                .iter()
                .zip(fj.iter())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            let v = (dot / norm) as f32;
            values[i * c + j] = v;
            values[j * c + i] = v;
        }
    }
    Ok(Gram { dim: c, values })
}

/// Concatenated flattened Gram matrices of the five encoder taps.
#[derive(Clone, Debug)]
pub struct StyleDescriptor {
    pub vector: Vec<f32>,
    /// `(start, len)` of each tap's flattened Gram block.
    pub layer_offsets: Vec<(usize, usize)>,
}

impl StyleDescriptor {
    /// Descriptor from a raw vector, treated as a single block. Handy for
    /// synthetic test fixtures.
    pub fn from_vector(vector: Vec<f32>) -> Self {
        let len = vector.len();
        StyleDescriptor {
            vector,
            layer_offsets: vec![(0, len)],
        }
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

/// Describe an image `[3,H,W]` by the Grams of all five taps, in tap order.
pub fn describe(encoder: &StyleEncoder, image: &Tensor) -> Result<StyleDescriptor> {
    let batch = match image.rank() {
        3 => Tensor::stack_batch(std::slice::from_ref(image))?,
        4 => image.clone(),
        _ => {
            return Err(Error::InvalidShape(format!(
                "describe expects [3,H,W] or [1,3,H,W], got {:?}",
                image.shape()
            )))
        }
    };
    let mut g = Graph::no_grad();
    let taps = encoder.encode(&mut g, &batch)?;
    let mut vector = Vec::new();
    let mut layer_offsets = Vec::with_capacity(5);
    for tap in &taps.taps {
        let gm = gram(tap)?;
        layer_offsets.push((vector.len(), gm.values.len()));
        vector.extend_from_slice(&gm.values);
    }
    Ok(StyleDescriptor {
        vector,
        layer_offsets,
    })
}

/// Sub-domain proportions among the k nearest training points; always on
/// the simplex with denominators `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainWeights {
    values: Vec<f64>,
}

impl DomainWeights {
    pub fn from_counts(counts: &[usize], k: usize) -> Self {
        DomainWeights {
            values: counts.iter().map(|&c| c as f64 / k as f64).collect(),
        }
    }

    /// Arbitrary nonnegative weights, for ablations and tests. Fusion only
    /// needs relative magnitudes.
    pub fn from_raw(values: Vec<f64>) -> Self {
        DomainWeights { values }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut values = vec![0.0; n];
        values[index] = 1.0;
        DomainWeights { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fitted cosine-kernel kernel-PCA model over sub-domain-tagged training
/// descriptors. Immutable after fit; queries are read-only.
#[derive(Debug)]
pub struct StyleSpace {
    train_descriptors: Vec<Vec<f32>>,
    train_norms: Vec<f64>,
    domains: Vec<usize>,
    n_domains: usize,
    row_means: Vec<f64>,
    grand_mean: f64,
    /// Projection coefficients, `d` rows of length `n` (eigenvector /
    /// sqrt(eigenvalue)).
    alphas: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    train_embeddings: Vec<Vec<f64>>,
    d: usize,
    explained_variance_ratio: f64,
}

fn cosine(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    dot / (na * nb)
}

fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

/// Fit the style space: cosine kernel, double centering, eigendecomposition,
/// and the smallest dimension reaching `variance_target` (capped at `d_max`).
pub fn fit_kpca(
    descriptors: &[StyleDescriptor],
    domains: &[usize],
    d_max: usize,
    variance_target: f64,
) -> Result<StyleSpace> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "kernel PCA needs at least 2 descriptors, got {n}"
        )));
    }
    if domains.len() != n {
        return Err(Error::InvalidDataset(format!(
            "{} domain tags for {n} descriptors",
            domains.len()
        )));
    }
    if d_max == 0 {
        return Err(Error::InvalidDataset("d_max must be positive".into()));
    }
    let dim = descriptors[0].len();
    let mut vecs = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for (i, d) in descriptors.iter().enumerate() {
        if d.len() != dim {
            return Err(Error::InvalidDescriptor(format!(
                "descriptor {i} has length {}, expected {dim}",
                d.len()
            )));
        }
        let nrm = norm_f64(&d.vector);
        if nrm == 0.0 {
            return Err(Error::InvalidDescriptor(format!(
                "descriptor {i} has zero norm; cosine kernel undefined"
            )));
        }
        vecs.push(d.vector.clone());
        norms.push(nrm);
    }
    let n_domains = domains.iter().max().map_or(0, |m| m + 1);

    let mut kernel = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = cosine(&vecs[i], norms[i], &vecs[j], norms[j]);
            kernel[i * n + j] = v;
            kernel[j * n + i] = v;
        }
    }
    let row_means: Vec<f64> = (0..n)
        .map(|i| kernel[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand_mean = row_means.iter().sum::<f64>() / n as f64;
    let mut centered = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            centered[i * n + j] = kernel[i * n + j] - row_means[i] - row_means[j] + grand_mean;
        }
    }

    let (mut values, vectors) = symmetric_eigen(&centered, n);
    let lambda_max = values.first().copied().unwrap_or(0.0).max(0.0);
    for v in values.iter_mut() {
        if *v < lambda_max * 1e-10 {
            *v = 0.0;
        }
    }
    let total: f64 = values.iter().sum();
    let rank = values.iter().filter(|v| **v > 0.0).count();

    let (d, explained_variance_ratio) = if total <= 0.0 {
        // all descriptors identical; a single flat component
        (1, 1.0)
    } else {
        let mut cum = 0.0;
        let mut m = rank.max(1);
        for (i, v) in values.iter().enumerate() {
            cum += v;
            if cum / total >= variance_target {
                m = i + 1;
                break;
            }
        }
        let d = m.min(d_max);
        let achieved: f64 = values[..d].iter().sum::<f64>() / total;
        (d, achieved)
    };

    let mut alphas = Vec::with_capacity(d);
    let mut train_embeddings = vec![vec![0.0f64; d]; n];
    for j in 0..d {
        let lam = values[j];
        if lam > 0.0 {
            let scale = 1.0 / lam.sqrt();
            alphas.push(vectors[j].iter().map(|v| v * scale).collect());
            for i in 0..n {
                train_embeddings[i][j] = lam.sqrt() * vectors[j][i];
            }
        } else {
            alphas.push(vec![0.0; n]);
        }
    }

    Ok(StyleSpace {
        train_descriptors: vecs,
        train_norms: norms,
        domains: domains.to_vec(),
        n_domains,
        row_means,
        grand_mean,
        alphas,
        eigenvalues: values,
        train_embeddings,
        d,
        explained_variance_ratio,
    })
}

impl StyleSpace {
    /// Rebuild a fitted space from stored parts (the persistence path).
    /// Norm caches are recomputed; everything else is taken as given.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        train_descriptors: Vec<Vec<f32>>,
        domains: Vec<usize>,
        n_domains: usize,
        row_means: Vec<f64>,
        grand_mean: f64,
        alphas: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        train_embeddings: Vec<Vec<f64>>,
        explained_variance_ratio: f64,
    ) -> Result<StyleSpace> {
        let n = train_descriptors.len();
        if n < 2 || domains.len() != n || row_means.len() != n || train_embeddings.len() != n {
            return Err(Error::InvalidDataset(
                "inconsistent style-space part sizes".into(),
            ));
        }
        let d = alphas.len();
        if train_embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::InvalidDataset(
                "embedding dimension mismatch in style-space parts".into(),
            ));
        }
        let train_norms: Vec<f64> = train_descriptors.iter().map(|v| norm_f64(v)).collect();
        if train_norms.iter().any(|&v| v == 0.0) {
            return Err(Error::InvalidDescriptor(
                "zero-norm training descriptor".into(),
            ));
        }
        Ok(StyleSpace {
            train_descriptors,
            train_norms,
            domains,
            n_domains,
            row_means,
            grand_mean,
            alphas,
            eigenvalues,
            train_embeddings,
            d,
            explained_variance_ratio,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_descriptors.len()
    }

    pub fn train_descriptors(&self) -> &[Vec<f32>] {
        &self.train_descriptors
    }

    pub fn row_means(&self) -> &[f64] {
        &self.row_means
    }

    pub fn grand_mean(&self) -> f64 {
        self.grand_mean
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        self.explained_variance_ratio
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn train_embedding(&self, i: usize) -> &[f64] {
        &self.train_embeddings[i]
    }

    /// Out-of-sample projection using the stored centering statistics.
    pub fn embed(&self, descriptor: &StyleDescriptor) -> Result<Vec<f64>> {
        let n = self.n_train();
        if descriptor.len() != self.train_descriptors[0].len() {
            return Err(Error::InvalidDescriptor(format!(
                "descriptor length {} vs fitted {}",
                descriptor.len(),
                self.train_descriptors[0].len()
            )));
        }
        let qn = norm_f64(&descriptor.vector);
        if qn == 0.0 {
            return Err(Error::InvalidDescriptor(
                "zero-norm descriptor; cosine kernel undefined".into(),
            ));
        }
        let kq: Vec<f64> = (0..n)
            .map(|m| {
                cosine(
                    &descriptor.vector,
                    qn,
                    &self.train_descriptors[m],
                    self.train_norms[m],
                )
            })
            .collect();
        let kq_mean = kq.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = (0..n)
            .map(|m| kq[m] - kq_mean - self.row_means[m] + self.grand_mean)
            .collect();
        Ok(self
            .alphas
            .iter()
            .map(|alpha| alpha.iter().zip(centered.iter()).map(|(a, k)| a * k).sum())
            .collect())
    }

    /// Sub-domain proportions among the k nearest training embeddings by
    /// Euclidean distance; ties break toward the lower training-row index.
    pub fn knn_weights(&self, query_embedding: &[f64], k: usize) -> Result<DomainWeights> {
        let n = self.n_train();
        if k == 0 || k > n {
            return Err(Error::InvalidK { k, n_train: n });
        }
        if query_embedding.len() != self.d {
            return Err(Error::InvalidDescriptor(format!(
                "query embedding length {} vs space dimension {}",
                query_embedding.len(),
                self.d
            )));
        }
        let mut order: Vec<(f64, usize)> = self
            .train_embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d2: f64 = e
                    .iter()
                    .zip(query_embedding.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2, i)
            })
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mut counts = vec![0usize; self.n_domains.max(1)];
        for &(_, i) in order.iter().take(k) {
            counts[self.domains[i]] += 1;
        }
        Ok(DomainWeights::from_counts(&counts, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn gram_of_zero_feature_is_zero() {
        let f = Tensor::zeros(vec![1, 3, 4, 4]);
        let g = gram(&f).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_of_constant_single_channel() {
        let f = Tensor::full(vec![1, 1, 2, 3], 2.0);
        let g = gram(&f).unwrap();
        assert_eq!(g.dim, 1);
        assert!((g.get(0, 0) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn gram_hand_case() {
        // F rows: [1,0,2,0] and [0,1,0,1] over a 2x2 spatial grid
        let f = Tensor::from_vec(vec![1, 2, 2, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 1.0])
            .unwrap();
        let g = gram(&f).unwrap();
        assert!((g.get(0, 0) - 5.0 / 8.0).abs() < 1e-6);
        assert!((g.get(1, 1) - 2.0 / 8.0).abs() < 1e-6);
        assert!(g.get(0, 1).abs() < 1e-6);
        assert!(g.get(1, 0).abs() < 1e-6);
    }

    #[test]
    fn gram_is_symmetric_and_psd_on_random_features() {
        let mut rng = substream(31, "gram");
        for _ in 0..5 {
            let (c, h, w) = (4, 3, 5);
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = Tensor::from_vec(vec![1, c, h, w], data).unwrap();
            let g = gram(&f).unwrap();
            for i in 0..c {
                for j in 0..c {
                    assert!((g.get(i, j) - g.get(j, i)).abs() < 1e-6);
                }
            }
            let m: Vec<f64> = g.values.iter().map(|v| f64::from(*v)).collect();
            let (vals, _) = symmetric_eigen(&m, c);
            assert!(vals.iter().all(|v| *v >= -1e-6), "{vals:?}");
        }
    }

    fn random_descriptors(n: usize, dim: usize, seed: u64) -> Vec<StyleDescriptor> {
        let mut rng = substream(seed, "desc");
        (0..n)
            .map(|_| {
                StyleDescriptor::from_vector(
                    (0..dim).map(|_| rng.gen_range(0.1..1.0)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn two_points_need_one_dimension() {
        let d = vec![
            StyleDescriptor::from_vector(vec![1.0, 0.0, 0.2]),
            StyleDescriptor::from_vector(vec![0.0, 1.0, 0.4]),
        ];
        let space = fit_kpca(&d, &[0, 1], 8, 0.99).unwrap();
        assert_eq!(space.dimension(), 1);
        assert!((space.explained_variance_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_rows_share_an_embedding() {
        let mut d = random_descriptors(5, 12, 32);
        d.push(d[2].clone());
        let domains = vec![0, 0, 1, 1, 0, 1];
        let space = fit_kpca(&d, &domains, 6, 1.0).unwrap();
        let (a, b) = (space.train_embedding(2), space.train_embedding(5));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_reconstruction_from_embeddings() {
        let d = random_descriptors(6, 10, 33);
        let domains = vec![0, 1, 0, 1, 0, 1];
        let space = fit_kpca(&d, &domains, 6, 1.0).unwrap();
        // reconstruct centered kernel entries from embeddings
        let n = 6;
        let mut kernel = vec![0.0f64; n * n];
        let norms: Vec<f64> = d.iter().map(|x| norm_f64(&x.vector)).collect();
        for i in 0..n {
            for j in 0..n {
                kernel[i * n + j] = cosine(&d[i].vector, norms[i], &d[j].vector, norms[j]);
            }
        }
        let rm: Vec<f64> = (0..n)
            .map(|i| kernel[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let gm = rm.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                let centered = kernel[i * n + j] - rm[i] - rm[j] + gm;
                let recon: f64 = space
                    .train_embedding(i)
                    .iter()
                    .zip(space.train_embedding(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((centered - recon).abs() < 1e-5, "{centered} vs {recon}");
            }
        }
    }

    #[test]
    fn zero_norm_descriptor_is_rejected() {
        let d = vec![
            StyleDescriptor::from_vector(vec![0.0, 0.0]),
            StyleDescriptor::from_vector(vec![1.0, 0.0]),
        ];
        assert_eq!(
            fit_kpca(&d, &[0, 1], 4, 0.99).unwrap_err().category(),
            "invalid-descriptor"
        );
    }

    #[test]
    fn d_max_cap_records_achieved_ratio() {
        let d = random_descriptors(8, 16, 34);
        let domains = vec![0; 8];
        let space = fit_kpca(&d, &domains, 2, 0.999).unwrap();
        assert_eq!(space.dimension(), 2);
        assert!(space.explained_variance_ratio() < 0.999);
        assert!(space.explained_variance_ratio() > 0.0);
    }

    #[test]
    fn in_sample_embedding_matches_training_embedding() {
        let d = random_descriptors(7, 14, 35);
        let domains = vec![0, 1, 2, 0, 1, 2, 0];
        let space = fit_kpca(&d, &domains, 7, 1.0).unwrap();
        for (i, desc) in d.iter().enumerate() {
            let e = space.embed(desc).unwrap();
            for (a, b) in e.iter().zip(space.train_embedding(i).iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn embedding_is_scale_invariant() {
        let d = random_descriptors(5, 10, 36);
        let domains = vec![0, 1, 0, 1, 0];
        let space = fit_kpca(&d, &domains, 5, 1.0).unwrap();
        let q = StyleDescriptor::from_vector((0..10).map(|i| 0.3 + i as f32 * 0.05).collect());
        // power-of-two factor: the f32 scaling itself is exact
        let scaled = StyleDescriptor::from_vector(q.vector.iter().map(|v| v * 64.0).collect());
        let (e1, e2) = (space.embed(&q).unwrap(), space.embed(&scaled).unwrap());
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // arbitrary factor rounds the stored f32 values, so compare loosely
        let scaled = StyleDescriptor::from_vector(q.vector.iter().map(|v| v * 3.7).collect());
        let e3 = space.embed(&scaled).unwrap();
        for (a, b) in e1.iter().zip(e3.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn held_out_kernel_values_reconstruct() {
        let d = random_descriptors(6, 12, 37);
        let domains = vec![0, 0, 0, 1, 1, 1];
        let space = fit_kpca(&d, &domains, 6, 1.0).unwrap();
        let q = StyleDescriptor::from_vector((0..12).map(|i| (i as f32 * 0.37).sin().abs() + 0.1).collect());
        let e = space.embed(&q).unwrap();
        // direct centered kernel against training rows
        let n = 6;
        let norms: Vec<f64> = d.iter().map(|x| norm_f64(&x.vector)).collect();
        let qn = norm_f64(&q.vector);
        let kq: Vec<f64> = (0..n)
            .map(|m| cosine(&q.vector, qn, &d[m].vector, norms[m]))
            .collect();
        let kq_mean = kq.iter().sum::<f64>() / n as f64;
        for m in 0..n {
            let centered = kq[m] - kq_mean - space.row_means[m] + space.grand_mean;
            let recon: f64 = e
                .iter()
                .zip(space.train_embedding(m).iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!((centered - recon).abs() < 1e-4, "{centered} vs {recon}");
        }
    }

    #[test]
    fn knn_one_hot_and_global_proportions() {
        // 2D descriptors in two tight direction clusters
        let mut d = Vec::new();
        let mut domains = Vec::new();
        for i in 0..4 {
            d.push(StyleDescriptor::from_vector(vec![1.0, 0.01 * i as f32]));
            domains.push(0);
        }
        for i in 0..2 {
            d.push(StyleDescriptor::from_vector(vec![0.01 * i as f32, 1.0]));
            domains.push(1);
        }
        let space = fit_kpca(&d, &domains, 6, 1.0).unwrap();
        let q = space
            .embed(&StyleDescriptor::from_vector(vec![1.0, 0.015]))
            .unwrap();
        let w = space.knn_weights(&q, 3).unwrap();
        assert_eq!(w.values(), &[1.0, 0.0]);
        // k = n gives the global domain proportions exactly
        let w_all = space.knn_weights(&q, 6).unwrap();
        assert_eq!(w_all.values(), &[4.0 / 6.0, 2.0 / 6.0]);
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let d = random_descriptors(5, 8, 38);
        let domains = vec![0, 1, 2, 1, 0];
        let space = fit_kpca(&d, &domains, 5, 1.0).unwrap();
        let q = space
            .embed(&StyleDescriptor::from_vector(
                (0..8).map(|i| 0.2 + 0.1 * i as f32).collect(),
            ))
            .unwrap();
        let k = 3;
        let w = space.knn_weights(&q, k).unwrap();
        // brute force
        let mut pairs: Vec<(f64, usize)> = (0..5)
            .map(|i| {
                let e = space.train_embedding(i);
                let dist: f64 = e.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (dist, i)
            })
            .collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut counts = [0usize; 3];
        for &(_, i) in pairs.iter().take(k) {
            counts[domains[i]] += 1;
        }
        let expect: Vec<f64> = counts.iter().map(|&c| c as f64 / k as f64).collect();
        assert_eq!(w.values(), expect.as_slice());
    }

    #[test]
    fn knn_rejects_out_of_range_k() {
        let d = random_descriptors(3, 6, 39);
        let space = fit_kpca(&d, &[0, 1, 0], 3, 1.0).unwrap();
        let q = space.embed(&d[0]).unwrap();
        assert_eq!(
            space.knn_weights(&q, 0).unwrap_err().category(),
            "invalid-k"
        );
        assert_eq!(
            space.knn_weights(&q, 4).unwrap_err().category(),
            "invalid-k"
        );
    }

    #[test]
    fn weights_lie_on_simplex_with_k_denominators() {
        let d = random_descriptors(9, 10, 40);
        let domains = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
        let space = fit_kpca(&d, &domains, 9, 1.0).unwrap();
        let q = space.embed(&d[4]).unwrap();
        for k in 1..=9 {
            let w = space.knn_weights(&q, k).unwrap();
            let sum: f64 = w.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for v in w.values() {
                let scaled = v * k as f64;
                assert!((scaled - scaled.round()).abs() < 1e-9);
                assert!(*v >= 0.0);
            }
        }
    }

    #[test]
    fn appended_constant_coordinates_keep_neighbor_sets() {
        // equal-norm descriptors so the constant block shifts every kernel
        // entry by the same affine map, which centering removes
        let mut rng = substream(41, "const-coord");
        let n = 8;
        let dim = 6;
        let mut descs = Vec::new();
        for _ in 0..n {
            let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nrm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            for x in v.iter_mut() {
                *x /= nrm;
            }
            descs.push(v);
        }
        let domains = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let plain: Vec<StyleDescriptor> = descs
            .iter()
            .map(|v| StyleDescriptor::from_vector(v.clone()))
            .collect();
        let appended: Vec<StyleDescriptor> = descs
            .iter()
            .map(|v| {
                let mut w = v.clone();
                w.push(0.7);
                w.push(0.7);
                StyleDescriptor::from_vector(w)
            })
            .collect();
        let s1 = fit_kpca(&plain, &domains, n, 1.0).unwrap();
        let s2 = fit_kpca(&appended, &domains, n, 1.0).unwrap();
        let k = 3;
        for i in 0..n {
            let neigh = |s: &StyleSpace, d: &[StyleDescriptor]| {
                let q = s.embed(&d[i]).unwrap();
                let mut pairs: Vec<(f64, usize)> = (0..n)
                    .map(|m| {
                        let e = s.train_embedding(m);
                        let dist: f64 =
                            e.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                        (dist, m)
                    })
                    .collect();
                pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut ids: Vec<usize> = pairs.iter().take(k).map(|&(_, m)| m).collect();
                ids.sort_unstable();
                ids
            };
            assert_eq!(neigh(&s1, &plain), neigh(&s2, &appended));
        }
    }
}
