//! Feature-statistic style transfer: a frozen encoder, a trainable mirror
//! decoder, statistic alignment at the bottleneck tap, and the pseudo-
//! dataset generator that re-renders a labeled source set in a
//! sub-domain's style.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::LabeledImage;
use crate::nets::{StyleDecoder, StyleEncoder, STAT_EPS};
use crate::rng::substream;
use crate::tensor::{clip_grad_norm, Graph, Sgd, Tensor};

/// Frozen encoder + trainable decoder + style-loss weight.
pub struct StyleTransferModel {
    pub encoder: StyleEncoder,
    pub decoder: StyleDecoder,
    pub lambda_style: f32,
}

impl StyleTransferModel {
    pub fn new(encoder: StyleEncoder, decoder: StyleDecoder, lambda_style: f32) -> Self {
        encoder.set_trainable(false);
        StyleTransferModel {
            encoder,
            decoder,
            lambda_style,
        }
    }
}

/// One stylization job: re-render `content` with `style`'s feature
/// statistics, blended by `alpha` in `[0, 1]`.
pub struct StylizationRequest {
    pub content: Tensor,
    pub style: Tensor,
    pub alpha: f32,
}

fn as_batch(image: &Tensor, what: &str) -> Result<Tensor> {
    match image.rank() {
        3 => Tensor::stack_batch(std::slice::from_ref(image)),
        4 => Ok(image.clone()),
        _ => Err(Error::InvalidShape(format!(
            "{what} must be [3,H,W], got {:?}",
            image.shape()
        ))),
    }
}

/// Training losses for one content/style pair:
/// `(total, content, style)` where `total = content + lambda * style`.
///
/// The content term is the Euclidean distance between the re-encoded
/// decoder output and the statistic-aligned bottleneck target; the style
/// term sums mean/deviation distances over the first four taps.
pub fn st_losses(
    model: &StyleTransferModel,
    g: &mut Graph,
    content: &Tensor,
    style: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let content = as_batch(content, "content")?;
    let style = as_batch(style, "style")?;
    if content.shape() != style.shape() {
        return Err(Error::InvalidShape(format!(
            "content {:?} vs style {:?}",
            content.shape(),
            style.shape()
        )));
    }
    let enc_c = model.encoder.encode(g, &content)?;
    let enc_s = model.encoder.encode(g, &style)?;
    let (smu, ssig) = g.channel_stats(enc_s.l4(), STAT_EPS)?;
    let target = g.adain(enc_c.l4(), &smu, &ssig, STAT_EPS)?;
    let output = model.decoder.decode(g, &target)?;
    let enc_o = model.encoder.encode(g, &output)?;

    let loss_content = g.l2_distance(enc_o.l4(), &target)?;
    let mut loss_style: Option<Tensor> = None;
    for i in 0..4 {
        let (mu_o, sig_o) = g.channel_stats(&enc_o.taps[i], STAT_EPS)?;
        let (mu_s, sig_s) = g.channel_stats(&enc_s.taps[i], STAT_EPS)?;
        let dm = g.l2_distance(&mu_o, &mu_s)?;
        let ds = g.l2_distance(&sig_o, &sig_s)?;
        let layer = g.add(&dm, &ds)?;
        loss_style = Some(match loss_style {
            Some(acc) => g.add(&acc, &layer)?,
            None => layer,
        });
    }
    let loss_style = loss_style.expect("four style taps");
    let weighted = g.scale(&loss_style, model.lambda_style)?;
    let total = g.add(&loss_content, &weighted)?;
    Ok((total, loss_content, loss_style))
}

/// Per-step record of the three loss values.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: f32,
    pub content: f32,
    pub style: f32,
}

/// Gradient-norm ceiling for decoder updates. The loss spikes hard in the
/// first steps from a random decoder; unclipped updates can blow the
/// parameters up (or silence every unit) before descent starts.
const GRAD_CLIP: f32 = 5.0;

/// Reconstruction pretext: with the encoder held fixed, train the decoder
/// to invert it in pixel space (`||g(f(x).L4) - x||_2`). Inverting the
/// fixed feature basis is what the full-scale method gets from a decoder
/// trained against a pretrained backbone; the statistic-alignment
/// training then only has to learn stylization, not reconstruction.
pub fn pretrain_decoder(
    encoder: &StyleEncoder,
    decoder: &StyleDecoder,
    images: &[Tensor],
    steps: usize,
    lr: f32,
    momentum: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    if images.is_empty() {
        return Err(Error::InvalidDataset("decoder pretext needs images".into()));
    }
    encoder.set_trainable(false);
    let params = decoder.params();
    let mut opt = Sgd::new(&params, lr, momentum);
    let mut rng = substream(seed, "style.pretrain");
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = rng.gen_range(0..images.len());
        let batch = Tensor::stack_batch(std::slice::from_ref(&images[idx]))?;
        let mut g = Graph::new();
        let taps = encoder.encode(&mut g, &batch)?;
        let out = decoder.decode(&mut g, taps.l4())?;
        let loss = g.l2_distance(&out, &batch)?;
        g.backward(&loss)?;
        clip_grad_norm(&params, GRAD_CLIP);
        opt.step(&params)?;
        trace.push(loss.item());
    }
    Ok(trace)
}

/// SGD on the decoder over uniformly sampled content/style pairs, with
/// global gradient-norm clipping.
pub fn train_style_transfer(
    model: &StyleTransferModel,
    contents: &[Tensor],
    styles: &[Tensor],
    steps: usize,
    lr: f32,
    momentum: f32,
    seed: u64,
) -> Result<Vec<StepLosses>> {
    if contents.is_empty() || styles.is_empty() {
        return Err(Error::InvalidDataset(
            "style transfer needs nonempty content and style sets".into(),
        ));
    }
    let params = model.decoder.params();
    let mut opt = Sgd::new(&params, lr, momentum);
    let mut rng = substream(seed, "style.batch");
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let ci = rng.gen_range(0..contents.len());
        let si = rng.gen_range(0..styles.len());
        let mut g = Graph::new();
        let (total, content, style) = st_losses(model, &mut g, &contents[ci], &styles[si])?;
        g.backward(&total)?;
        clip_grad_norm(&params, GRAD_CLIP);
        opt.step(&params)?;
        trace.push(StepLosses {
            total: total.item(),
            content: content.item(),
            style: style.item(),
        });
    }
    Ok(trace)
}

/// Apply the trained model: align the bottleneck statistics, blend with
/// the plain content feature by `alpha`, decode, and clamp to `[0, 1]`.
pub fn stylize(model: &StyleTransferModel, req: &StylizationRequest) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&req.alpha) {
        return Err(Error::ContractViolation(format!(
            "stylization alpha {} outside [0, 1]",
            req.alpha
        )));
    }
    let content = as_batch(&req.content, "content")?;
    let style = as_batch(&req.style, "style")?;
    let mut g = Graph::no_grad();
    let enc_c = model.encoder.encode(&mut g, &content)?;
    let enc_s = model.encoder.encode(&mut g, &style)?;
    let (smu, ssig) = g.channel_stats(enc_s.l4(), STAT_EPS)?;
    let aligned = g.adain(enc_c.l4(), &smu, &ssig, STAT_EPS)?;
    let a = g.scale(&aligned, req.alpha)?;
    let b = g.scale(enc_c.l4(), 1.0 - req.alpha)?;
    let blended = g.add(&a, &b)?;
    let out = model.decoder.decode(&mut g, &blended)?;
    let out = out.clamp01();
    // back to [3,H,W]
    let s = out.shape();
    Tensor::from_vec(vec![s[1], s[2], s[3]], out.to_vec())
}

/// Stylize every source image with one uniformly drawn style image at the
/// given alpha; labels carry over unchanged.
pub fn make_pseudo_dataset(
    model: &StyleTransferModel,
    source: &[LabeledImage],
    styles: &[Tensor],
    alpha: f32,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if styles.is_empty() {
        return Err(Error::InvalidDataset("empty style set".into()));
    }
    let mut rng = substream(seed, "pseudo.assign");
    source
        .iter()
        .map(|item| {
            let si = rng.gen_range(0..styles.len());
            let image = stylize(
                model,
                &StylizationRequest {
                    content: item.image.clone(),
                    style: styles[si].clone(),
                    alpha,
                },
            )?;
            Ok(LabeledImage {
                image,
                label: item.label.clone(),
            })
        })
        .collect()
}
