//! Multi-domain inference: weight each sub-domain model's per-pixel class
//! scores by the query's style-similarity proportions and take the
//! argmax of the combination.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nets::StyleEncoder;
use crate::seg_train::{forward_logits, SegModel};
use crate::style_space::{describe, DomainWeights, StyleSpace};
use crate::tensor::{Graph, Tensor};

/// What the weighted sum runs over: per-pixel softmax probabilities
/// (default; scales of different models become comparable) or raw logits
/// (ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Probability,
    Logit,
}

/// Combine per-model score maps with domain weights; per pixel the output
/// class is `argmax_c sum_i w_i * p_i(c)`, ties toward the lowest class.
pub fn fuse(logit_maps: &[Tensor], w: &DomainWeights, mode: FuseMode) -> Result<Vec<LabelMap>> {
    if logit_maps.is_empty() {
        return Err(Error::InvalidShape("fuse of zero models".into()));
    }
    if logit_maps.len() != w.len() {
        return Err(Error::InvalidShape(format!(
            "{} score maps for {} weights",
            logit_maps.len(),
            w.len()
        )));
    }
    let shape = logit_maps[0].shape();
    if shape.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "fuse expects [B,C,H,W] maps, got {shape:?}"
        )));
    }
    for m in logit_maps {
        if m.shape() != shape {
            return Err(Error::InvalidShape(format!(
                "score map shapes differ: {:?} vs {shape:?}",
                m.shape()
            )));
        }
    }
    let [b, c, h, w_] = [shape[0], shape[1], shape[2], shape[3]];
    let hw = h * w_;
    let mut combined = vec![0.0f64; b * c * hw];
    for (map, &weight) in logit_maps.iter().zip(w.values().iter()) {
        let scores = match mode {
            FuseMode::Probability => {
                let mut g = Graph::no_grad();
                g.softmax_channels(map)?.to_vec()
            }
            FuseMode::Logit => map.to_vec(),
        };
        for (acc, v) in combined.iter_mut().zip(scores.iter()) {
            *acc += weight * f64::from(*v);
        }
    }
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut labels = vec![0u8; hw];
        for p in 0..hw {
            let mut best = combined[bi * c * hw + p];
            let mut best_c = 0usize;
            for ci in 1..c {
                let v = combined[(bi * c + ci) * hw + p];
                if v > best {
                    best = v;
                    best_c = ci;
                }
            }
            labels[p] = best_c as u8;
        }
        out.push(LabelMap::new(h, w_, labels)?);
    }
    Ok(out)
}

/// The per-sub-domain models plus the style space that weights them.
#[derive(Debug)]
pub struct Ensemble {
    pub models: Vec<SegModel>,
    pub space: StyleSpace,
    pub encoder: StyleEncoder,
    pub k: usize,
    pub fuse_mode: FuseMode,
}

impl Ensemble {
    pub fn new(
        models: Vec<SegModel>,
        space: StyleSpace,
        encoder: StyleEncoder,
        k: usize,
        fuse_mode: FuseMode,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidDataset("ensemble without models".into()));
        }
        if models.len() != space.n_domains() {
            return Err(Error::InvalidDataset(format!(
                "{} models for {} style-space domains",
                models.len(),
                space.n_domains()
            )));
        }
        let classes = models[0].class_count;
        for (i, m) in models.iter().enumerate() {
            if m.class_count != classes {
                return Err(Error::InvalidDataset(format!(
                    "model {i} has {} classes, expected {classes}",
                    m.class_count
                )));
            }
            if m.domain_id != i {
                return Err(Error::InvalidDataset(format!(
                    "model at position {i} carries domain id {}",
                    m.domain_id
                )));
            }
        }
        if k == 0 || k > space.n_train() {
            return Err(Error::InvalidK {
                k,
                n_train: space.n_train(),
            });
        }
        Ok(Ensemble {
            models,
            space,
            encoder,
            k,
            fuse_mode,
        })
    }

    /// Describe, embed, weight, run every model, fuse. Returns the label
    /// map and the weight vector actually used.
    pub fn infer(&self, image: &Tensor) -> Result<(LabelMap, DomainWeights)> {
        let descriptor = describe(&self.encoder, image)?;
        let embedding = self.space.embed(&descriptor)?;
        let weights = self.space.knn_weights(&embedding, self.k)?;
        let logits: Vec<Tensor> = self
            .models
            .iter()
            .map(|m| forward_logits(m, image))
            .collect::<Result<_>>()?;
        let maps = fuse(&logits, &weights, self.fuse_mode)?;
        Ok((maps.into_iter().next().expect("one batch row"), weights))
    }
}
