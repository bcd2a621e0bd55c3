//! Fine-grained adversarial domain confusion: a per-class, per-pixel
//! discriminator trained against truncated soft labels, alternating with
//! encoder updates that mix supervised source loss and an adversarial
//! term. The target batch's statistics transfer onto the source batch at
//! the network's hook points.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::LabeledImage;
use crate::labels::{LabelMap, IGNORE};
use crate::nets::{FineDiscriminator, Pairing, PadainPolicy};
use crate::rng::substream;
use crate::seg_train::SegModel;
use crate::tensor::{zero_grads, Graph, Sgd, Tensor};

/// Cap applied to prediction probabilities before they become
/// discriminator targets. No renormalization afterwards.
pub const SOFT_LABEL_CAP: f32 = 0.9;

/// Per-pixel softmax of the logits with every probability capped at 0.9.
/// The result is detached: no gradient flows through label construction.
pub fn make_soft_labels(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let probs = g.softmax_channels(&logits.detach())?;
    let capped: Vec<f32> = probs.data().iter().map(|v| v.min(SOFT_LABEL_CAP)).collect();
    Tensor::from_vec(probs.shape(), capped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainSide {
    Source,
    Target,
}

/// Per-pixel 2C-channel discriminator target: source samples carry
/// `(soft, 0)`, target samples `(0, soft)`.
pub fn discriminator_targets(soft: &Tensor, side: DomainSide) -> Result<Tensor> {
    let s = soft.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "soft labels must be [B,C,H,W], got {s:?}"
        )));
    }
    let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
    let hw = h * w;
    let mut data = vec![0.0f32; b * 2 * c * hw];
    let src = soft.data();
    let offset = match side {
        DomainSide::Source => 0,
        DomainSide::Target => c,
    };
    for bi in 0..b {
        for ci in 0..c {
            let from = (bi * c + ci) * hw;
            let to = (bi * 2 * c + offset + ci) * hw;
            data[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
    Tensor::from_vec(vec![b, 2 * c, h, w], data)
}

/// Discrimination loss: cross-entropy of both domains' discriminator
/// outputs against their side-tagged soft labels, averaged over all
/// pixels of both batches.
pub fn loss_d(
    g: &mut Graph,
    disc_out_src: &Tensor,
    disc_out_tgt: &Tensor,
    soft_src: &Tensor,
    soft_tgt: &Tensor,
) -> Result<Tensor> {
    let t_src = discriminator_targets(soft_src, DomainSide::Source)?;
    let t_tgt = discriminator_targets(soft_tgt, DomainSide::Target)?;
    let ce_src = g.soft_target_cross_entropy(disc_out_src, &t_src)?;
    let ce_tgt = g.soft_target_cross_entropy(disc_out_tgt, &t_tgt)?;
    let n_src = pixels(disc_out_src) as f32;
    let n_tgt = pixels(disc_out_tgt) as f32;
    let a = g.scale(&ce_src, n_src / (n_src + n_tgt))?;
    let b = g.scale(&ce_tgt, n_tgt / (n_src + n_tgt))?;
    g.add(&a, &b)
}

/// Adversarial loss: target-batch discriminator output evaluated against
/// source-side targets. Minimizing it makes target features look like
/// source features to the discriminator.
pub fn loss_adv(g: &mut Graph, disc_out_tgt: &Tensor, soft_tgt: &Tensor) -> Result<Tensor> {
    let t = discriminator_targets(soft_tgt, DomainSide::Source)?;
    g.soft_target_cross_entropy(disc_out_tgt, &t)
}

fn pixels(t: &Tensor) -> usize {
    let s = t.shape();
    s[0] * s[2] * s[3]
}

#[derive(Clone, Copy, Debug)]
pub struct ConfusionParams {
    pub steps: usize,
    pub lr_seg: f32,
    pub lr_disc: f32,
    pub momentum: f32,
    pub lambda_adv: f32,
    pub padain_prob: f64,
    pub batch: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ConfusionTrace {
    pub loss_d: Vec<f32>,
    pub loss_seg: Vec<f32>,
    pub loss_adv: Vec<f32>,
    /// `(step, accuracy)` of the discriminator's domain decision on the
    /// held-out images.
    pub disc_accuracy: Vec<(usize, f64)>,
}

#[derive(Debug)]
pub struct ConfuseResult {
    pub model: SegModel,
    pub discriminator: FineDiscriminator,
    pub trace: ConfusionTrace,
}

/// Domain decision accuracy of the discriminator on held-out images:
/// a pixel votes source if the first C channels carry more probability
/// mass than the last C.
fn heldout_accuracy(
    model: &SegModel,
    disc: &FineDiscriminator,
    src: &[LabeledImage],
    tgt: &[Tensor],
) -> Result<f64> {
    let mut correct = 0u64;
    let mut total = 0u64;
    let mut score = |image: &Tensor, is_source: bool| -> Result<()> {
        let batch = Tensor::stack_batch(std::slice::from_ref(image))?;
        let mut g = Graph::no_grad();
        let fwd = model.net.forward_detailed(&mut g, &batch, None)?;
        let d = disc.forward(&mut g, &fwd.encoder_feature)?;
        let probs = g.softmax_channels(&d)?;
        let s = probs.shape();
        let (c2, hw) = (s[1], s[2] * s[3]);
        let data = probs.data();
        for p in 0..hw {
            let mut first = 0.0f32;
            let mut second = 0.0f32;
            for ci in 0..c2 {
                let v = data[ci * hw + p];
                if ci < c2 / 2 {
                    first += v;
                } else {
                    second += v;
                }
            }
            let votes_source = first > second;
            if votes_source == is_source {
                correct += 1;
            }
            total += 1;
        }
        Ok(())
    };
    for item in src {
        score(&item.image, true)?;
    }
    for image in tgt {
        score(image, false)?;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Alternating refinement: (i) the discriminator minimizes [`loss_d`];
/// (ii) the segmentation network minimizes supervised cross-entropy on
/// source labels plus `lambda_adv` times [`loss_adv`], with target-batch
/// statistics transferred onto the source batch with probability
/// `padain_prob` per hook. The last fifth of each set is reserved for the
/// held-out accuracy trace.
pub fn confuse(
    model: SegModel,
    source: &[LabeledImage],
    target: &[Tensor],
    disc: FineDiscriminator,
    params: &ConfusionParams,
    seed: u64,
) -> Result<ConfuseResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidDataset(
            "confusion needs nonempty source and target sets".into(),
        ));
    }
    let holdout = |n: usize| if n >= 5 { n / 5 } else { usize::from(n >= 2) };
    let src_train = &source[..source.len() - holdout(source.len())];
    let src_eval = &source[source.len() - holdout(source.len())..];
    let tgt_train = &target[..target.len() - holdout(target.len())];
    let tgt_eval = &target[target.len() - holdout(target.len())..];

    let seg_params = model.net.params();
    let disc_params = disc.params();
    let mut opt_seg = Sgd::new(&seg_params, params.lr_seg, params.momentum);
    let mut opt_disc = Sgd::new(&disc_params, params.lr_disc, params.momentum);
    let mut src_rng = substream(seed, "seg.batch");
    let mut tgt_rng = substream(seed, "confuse.targets");
    let mut padain_rng = substream(seed, "confuse.padain");
    let policy = PadainPolicy {
        prob: params.padain_prob,
        pairing: Pairing::FirstHalfReceives,
    };
    let mut trace = ConfusionTrace::default();

    for step in 0..params.steps {
        let src_idx: Vec<usize> = (0..params.batch)
            .map(|_| src_rng.gen_range(0..src_train.len()))
            .collect();
        let tgt_idx: Vec<usize> = (0..params.batch)
            .map(|_| tgt_rng.gen_range(0..tgt_train.len()))
            .collect();
        let src_images: Vec<Tensor> = src_idx.iter().map(|&i| src_train[i].image.clone()).collect();
        let src_labels: Vec<LabelMap> = src_idx.iter().map(|&i| src_train[i].label.clone()).collect();
        let tgt_images: Vec<Tensor> = tgt_idx.iter().map(|&i| tgt_train[i].clone()).collect();
        let src_batch = Tensor::stack_batch(&src_images)?;
        let tgt_batch = Tensor::stack_batch(&tgt_images)?;

        // (i) discriminator step on detached features
        {
            let mut fg = Graph::no_grad();
            let src_fwd = model.net.forward_detailed(&mut fg, &src_batch, None)?;
            let tgt_fwd = model.net.forward_detailed(&mut fg, &tgt_batch, None)?;
            let soft_src = make_soft_labels(&src_fwd.logits)?;
            let soft_tgt = make_soft_labels(&tgt_fwd.logits)?;
            let mut g = Graph::new();
            let d_src = disc.forward(&mut g, &src_fwd.encoder_feature.detach())?;
            let d_tgt = disc.forward(&mut g, &tgt_fwd.encoder_feature.detach())?;
            let ld = loss_d(&mut g, &d_src, &d_tgt, &soft_src, &soft_tgt)?;
            zero_grads(&disc_params);
            g.backward(&ld)?;
            opt_disc.step(&disc_params)?;
            trace.loss_d.push(ld.item());
        }

        // (ii) segmentation network step
        {
            let mut g = Graph::new();
            let (logits_src, feat_tgt, logits_tgt) = if params.padain_prob > 0.0 {
                // one concatenated forward so the target half donates its
                // statistics to the source half at the hook points
                let both = Tensor::stack_batch(
                    &src_images
                        .iter()
                        .chain(tgt_images.iter())
                        .cloned()
                        .collect::<Vec<_>>(),
                )?;
                let fwd =
                    model
                        .net
                        .forward_detailed(&mut g, &both, Some((&policy, &mut padain_rng)))?;
                let b = params.batch;
                let logits_src = g.slice_batch(&fwd.logits, 0, b)?;
                let logits_tgt = g.slice_batch(&fwd.logits, b, 2 * b)?;
                let feat_tgt = g.slice_batch(&fwd.encoder_feature, b, 2 * b)?;
                (logits_src, feat_tgt, logits_tgt)
            } else {
                let src_fwd = model.net.forward_detailed(&mut g, &src_batch, None)?;
                if params.lambda_adv > 0.0 {
                    let tgt_fwd = model.net.forward_detailed(&mut g, &tgt_batch, None)?;
                    (src_fwd.logits, tgt_fwd.encoder_feature, tgt_fwd.logits)
                } else {
                    let feat = src_fwd.encoder_feature.clone();
                    let logits_tgt = src_fwd.logits.clone();
                    (src_fwd.logits, feat, logits_tgt)
                }
            };
            let ce = g.softmax_cross_entropy(&logits_src, &src_labels, Some(IGNORE))?;
            let total = if params.lambda_adv > 0.0 {
                let soft_tgt = make_soft_labels(&logits_tgt)?;
                let d_tgt = disc.forward(&mut g, &feat_tgt)?;
                let ladv = loss_adv(&mut g, &d_tgt, &soft_tgt)?;
                trace.loss_adv.push(ladv.item());
                let weighted = g.scale(&ladv, params.lambda_adv)?;
                g.add(&ce, &weighted)?
            } else {
                trace.loss_adv.push(0.0);
                ce.clone()
            };
            zero_grads(&seg_params);
            g.backward(&total)?;
            opt_seg.step(&seg_params)?;
            // the adversarial term also backpropagated into the
            // discriminator; those gradients must not leak into its next step
            zero_grads(&disc_params);
            trace.loss_seg.push(ce.item());
        }

        if (step + 1) % params.eval_every == 0 && !src_eval.is_empty() && !tgt_eval.is_empty() {
            let acc = heldout_accuracy(&model, &disc, src_eval, tgt_eval)?;
            trace.disc_accuracy.push((step, acc));
        }
    }

    Ok(ConfuseResult {
        model,
        discriminator: disc,
        trace,
    })
}
