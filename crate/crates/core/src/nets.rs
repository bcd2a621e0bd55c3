//! The four toy-scale networks the pipeline needs: a five-tap style
//! encoder, its mirror decoder, the segmentation network with statistic-
//! swap hook points, and the fine-grained per-class domain discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Epsilon used by every statistic computation in the networks.
pub const STAT_EPS: f32 = 1e-5;

/// One convolution's parameters.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// He-style fan-in scaled uniform initialization, biases at zero.
    pub fn init(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f32> = (0..cout * cin * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ConvLayer {
            weight: Tensor::param(vec![cout, cin, k, k], w).expect("conv init"),
            bias: Tensor::param(vec![cout], vec![0.0; cout]).expect("bias init"),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::InvalidShape("conv weight must be rank 4".into()));
        }
        if bias.shape() != vec![weight.shape()[0]] {
            return Err(Error::InvalidShape("conv bias/weight mismatch".into()));
        }
        Ok(ConvLayer { weight, bias })
    }

    pub fn apply(&self, g: &mut Graph, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        g.conv2d(x, &self.weight, &self.bias, stride, pad)
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

fn set_trainable(params: &[Tensor], trainable: bool) {
    for p in params {
        p.set_requires_grad(trainable);
    }
}

/// `max(x, 0) + slope * min(x, 0)`, composed from the primitive suite.
/// The decoder uses this so a loss spike cannot permanently kill units.
pub fn leaky_relu(g: &mut Graph, x: &Tensor, slope: f32) -> Result<Tensor> {
    let pos = g.relu(x)?;
    let neg_in = g.scale(x, -1.0)?;
    let neg = g.relu(&neg_in)?;
    let leak = g.scale(&neg, -slope)?;
    g.add(&pos, &leak)
}

// ---------------------------------------------------------------------------
// Style encoder
// ---------------------------------------------------------------------------

/// Five named feature taps L1..L5. L4 is the bottleneck the style
/// transfer runs through.
#[derive(Clone, Debug)]
pub struct EncoderTaps {
    pub taps: [Tensor; 5],
}

impl EncoderTaps {
    pub fn l4(&self) -> &Tensor {
        &self.taps[3]
    }
}

/// Conv stack with tap points after each activation and spatial halving
/// between taps.
#[derive(Debug)]
pub struct StyleEncoder {
    pub widths: [usize; 5],
    convs: Vec<ConvLayer>,
}

impl StyleEncoder {
    pub fn init(widths: [usize; 5], rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(5);
        let mut cin = 3;
        for &cout in &widths {
            convs.push(ConvLayer::init(cin, cout, 3, rng));
            cin = cout;
        }
        StyleEncoder { widths, convs }
    }

    /// Forward pass returning all five taps.
    pub fn encode(&self, g: &mut Graph, image: &Tensor) -> Result<EncoderTaps> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidShape(format!(
                "encoder expects [B,3,H,W], got {s:?}"
            )));
        }
        if s[2] < 16 || s[3] < 16 {
            return Err(Error::InvalidShape(format!(
                "encoder input {}x{} below the 16x16 minimum",
                s[2], s[3]
            )));
        }
        let mut x = image.clone();
        let mut taps = Vec::with_capacity(5);
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                x = g.maxpool2x2(&x)?;
            }
            x = conv.apply(g, &x, 1, 1)?;
            x = g.relu(&x)?;
            taps.push(x.clone());
        }
        let taps: [Tensor; 5] = match taps.try_into() {
            Ok(t) => t,
            Err(_) => {
                return Err(Error::ContractViolation(
                    "encoder must produce exactly five taps".into(),
                ))
            }
        };
        Ok(EncoderTaps { taps })
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.push_params(&format!("enc.c{i}"), &mut out);
        }
        out
    }

    pub fn set_trainable(&self, trainable: bool) {
        set_trainable(&self.params(), trainable);
    }

    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..5 {
            let w = find(tensors, &format!("enc.c{i}.w"))?;
            let b = find(tensors, &format!("enc.c{i}.b"))?;
            convs.push(ConvLayer::from_tensors(w, b)?);
        }
        let widths: Vec<usize> = convs.iter().map(|c| c.weight.shape()[0]).collect();
        Ok(StyleEncoder {
            widths: widths
                .try_into()
                .map_err(|_| Error::Format("encoder width list".into()))?,
            convs,
        })
    }
}

// ---------------------------------------------------------------------------
// Style decoder
// ---------------------------------------------------------------------------

/// Mirror of the encoder from the L4 tap back to image space.
#[derive(Debug)]
pub struct StyleDecoder {
    convs: Vec<ConvLayer>,
}

impl StyleDecoder {
    pub fn init(encoder_widths: [usize; 5], rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3, w4, _] = encoder_widths;
        let convs = vec![
            ConvLayer::init(w4, w3, 3, rng),
            ConvLayer::init(w3, w2, 3, rng),
            ConvLayer::init(w2, w1, 3, rng),
            ConvLayer::init(w1, 3, 3, rng),
        ];
        StyleDecoder { convs }
    }

    /// Decode an L4-shaped feature map back to image resolution
    /// (three upsampling stages, 8x total).
    pub fn decode(&self, g: &mut Graph, feature: &Tensor) -> Result<Tensor> {
        let mut x = feature.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.apply(g, &x, 1, 1)?;
            if i + 1 < self.convs.len() {
                x = leaky_relu(g, &x, 0.1)?;
                x = g.upsample_nearest2x(&x)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.push_params(&format!("dec.c{i}"), &mut out);
        }
        out
    }

    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..4 {
            let w = find(tensors, &format!("dec.c{i}.w"))?;
            let b = find(tensors, &format!("dec.c{i}.b"))?;
            convs.push(ConvLayer::from_tensors(w, b)?);
        }
        Ok(StyleDecoder { convs })
    }
}

// ---------------------------------------------------------------------------
// Segmentation network
// ---------------------------------------------------------------------------

/// How statistic-swap partners are assigned inside a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Every sample is its own partner (the swap is an exact no-op).
    SelfPartner,
    /// The first half of the batch receives the statistics of the second
    /// half; donors pass through unchanged. Requires an even batch.
    FirstHalfReceives,
}

/// Stochastic statistic-swap policy applied at the hook point after each
/// encoder convolution, before its activation.
#[derive(Clone, Copy, Debug)]
pub struct PadainPolicy {
    pub prob: f64,
    pub pairing: Pairing,
}

impl Pairing {
    fn permutation(self, batch: usize) -> Result<Vec<usize>> {
        match self {
            Pairing::SelfPartner => Ok((0..batch).collect()),
            Pairing::FirstHalfReceives => {
                if batch % 2 != 0 {
                    return Err(Error::InvalidBatch(format!(
                        "statistic swap across batch halves needs an even batch, got {batch}"
                    )));
                }
                Ok((0..batch)
                    .map(|i| if i < batch / 2 { i + batch / 2 } else { i })
                    .collect())
            }
        }
    }
}

/// Everything a single forward pass produces: logits at input resolution,
/// the last encoder feature map (the discriminator's input), and the
/// pre-activation hook outputs.
pub struct SegForward {
    pub logits: Tensor,
    pub encoder_feature: Tensor,
    pub hook_outputs: Vec<Tensor>,
}

/// Conv encoder, 1x1 classifier head, nearest upsampling back to input
/// resolution. Statistic-swap hooks sit after every encoder convolution.
#[derive(Debug)]
pub struct SegNet {
    pub widths: Vec<usize>,
    pub classes: usize,
    convs: Vec<ConvLayer>,
    head: ConvLayer,
}

impl SegNet {
    pub fn init(widths: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(widths.len(), 3, "segnet uses a three-stage encoder");
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in widths {
            convs.push(ConvLayer::init(cin, cout, 3, rng));
            cin = cout;
        }
        let head = ConvLayer::init(cin, classes, 1, rng);
        SegNet {
            widths: widths.to_vec(),
            classes,
            convs,
            head,
        }
    }

    /// Forward pass; see [`SegForward`]. `policy` swaps batch statistics at
    /// each hook with its per-layer probability.
    pub fn forward_detailed(
        &self,
        g: &mut Graph,
        images: &Tensor,
        policy: Option<(&PadainPolicy, &mut ChaCha8Rng)>,
    ) -> Result<SegForward> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidShape(format!(
                "segnet expects [B,3,H,W], got {s:?}"
            )));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] < 4 || s[3] < 4 {
            return Err(Error::InvalidShape(format!(
                "segnet input {}x{} must be a multiple of 4",
                s[2], s[3]
            )));
        }
        let mut swap: Option<(Vec<usize>, f64, &mut ChaCha8Rng)> = match policy {
            Some((p, rng)) => Some((p.pairing.permutation(s[0])?, p.prob, rng)),
            None => None,
        };
        let mut x = images.clone();
        let mut hook_outputs = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                x = g.maxpool2x2(&x)?;
            }
            x = conv.apply(g, &x, 1, 1)?;
            if let Some((perm, prob, rng)) = swap.as_mut() {
                if rng.gen_bool(*prob) {
                    x = g.padain_transfer(&x, perm, STAT_EPS)?;
                }
            }
            hook_outputs.push(x.clone());
            x = g.relu(&x)?;
        }
        let encoder_feature = x.clone();
        let mut logits = self.head.apply(g, &x, 1, 0)?;
        logits = g.upsample_nearest2x(&logits)?;
        logits = g.upsample_nearest2x(&logits)?;
        Ok(SegForward {
            logits,
            encoder_feature,
            hook_outputs,
        })
    }

    /// Forward pass returning only the per-pixel class scores.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        policy: Option<(&PadainPolicy, &mut ChaCha8Rng)>,
    ) -> Result<Tensor> {
        Ok(self.forward_detailed(g, images, policy)?.logits)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.push_params(&format!("seg.c{i}"), &mut out);
        }
        self.head.push_params("seg.head", &mut out);
        out
    }

    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..3 {
            let w = find(tensors, &format!("seg.c{i}.w"))?;
            let b = find(tensors, &format!("seg.c{i}.b"))?;
            convs.push(ConvLayer::from_tensors(w, b)?);
        }
        let head = ConvLayer::from_tensors(
            find(tensors, "seg.head.w")?,
            find(tensors, "seg.head.b")?,
        )?;
        let widths: Vec<usize> = convs.iter().map(|c| c.weight.shape()[0]).collect();
        let classes = head.weight.shape()[0];
        Ok(SegNet {
            widths,
            classes,
            convs,
            head,
        })
    }
}

// ---------------------------------------------------------------------------
// Fine-grained discriminator
// ---------------------------------------------------------------------------

/// Small conv head mapping the segnet's last encoder feature map to a
/// per-pixel vector of `2 * classes` channels at input resolution.
#[derive(Debug)]
pub struct FineDiscriminator {
    pub classes: usize,
    conv: ConvLayer,
    head: ConvLayer,
}

impl FineDiscriminator {
    pub fn init(feature_channels: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        FineDiscriminator {
            classes,
            conv: ConvLayer::init(feature_channels, hidden, 3, rng),
            head: ConvLayer::init(hidden, 2 * classes, 1, rng),
        }
    }

    /// Map an encoder feature at H/4 resolution to `[B, 2C, H, W]` scores.
    pub fn forward(&self, g: &mut Graph, feature: &Tensor) -> Result<Tensor> {
        let mut x = self.conv.apply(g, feature, 1, 1)?;
        x = g.relu(&x)?;
        x = self.head.apply(g, &x, 1, 0)?;
        x = g.upsample_nearest2x(&x)?;
        g.upsample_nearest2x(&x)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.conv.push_params("disc.c0", &mut out);
        self.head.push_params("disc.head", &mut out);
        out
    }

    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let conv = ConvLayer::from_tensors(find(tensors, "disc.c0.w")?, find(tensors, "disc.c0.b")?)?;
        let head =
            ConvLayer::from_tensors(find(tensors, "disc.head.w")?, find(tensors, "disc.head.b")?)?;
        let classes = head.weight.shape()[0] / 2;
        Ok(FineDiscriminator {
            classes,
            conv,
            head,
        })
    }
}

fn find(tensors: &[(String, Tensor)], name: &str) -> Result<Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    const WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];

    #[test]
    fn encoder_tap_sizes_halve() {
        let mut rng = substream(1, "enc");
        let enc = StyleEncoder::init(WIDTHS, &mut rng);
        let img = Tensor::zeros(vec![1, 3, 32, 32]);
        let mut g = Graph::no_grad();
        let taps = enc.encode(&mut g, &img).unwrap();
        let sizes: Vec<usize> = taps.taps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        for (tap, width) in taps.taps.iter().zip(WIDTHS.iter()) {
            assert_eq!(tap.shape()[1], *width);
        }
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_taps() {
        let mut rng = substream(2, "enc");
        let enc = StyleEncoder::init(WIDTHS, &mut rng);
        let img = Tensor::zeros(vec![1, 3, 32, 32]);
        let mut g = Graph::no_grad();
        let taps = enc.encode(&mut g, &img).unwrap();
        for tap in &taps.taps {
            assert!(tap.to_vec().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn encoder_rejects_small_images() {
        let mut rng = substream(3, "enc");
        let enc = StyleEncoder::init(WIDTHS, &mut rng);
        let img = Tensor::zeros(vec![1, 3, 8, 8]);
        let mut g = Graph::no_grad();
        assert_eq!(
            enc.encode(&mut g, &img).unwrap_err().category(),
            "invalid-shape"
        );
    }

    #[test]
    fn encoder_is_deterministic() {
        use rand::Rng;
        let mut rng = substream(4, "enc");
        let enc = StyleEncoder::init(WIDTHS, &mut rng);
        let mut img_rng = substream(4, "img");
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| img_rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(vec![1, 3, 32, 32], data).unwrap();
        let mut g1 = Graph::no_grad();
        let mut g2 = Graph::no_grad();
        let t1 = enc.encode(&mut g1, &img).unwrap();
        let t2 = enc.encode(&mut g2, &img).unwrap();
        for (a, b) in t1.taps.iter().zip(t2.taps.iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn decoder_restores_input_resolution() {
        let mut rng = substream(5, "dec");
        let enc = StyleEncoder::init(WIDTHS, &mut rng);
        let dec = StyleDecoder::init(WIDTHS, &mut rng);
        let img = Tensor::zeros(vec![2, 3, 32, 32]);
        let mut g = Graph::no_grad();
        let taps = enc.encode(&mut g, &img).unwrap();
        let out = dec.decode(&mut g, taps.l4()).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 32, 32]);
    }

    #[test]
    fn segnet_output_channels_match_classes() {
        let mut rng = substream(6, "seg");
        let net = SegNet::init(&[16, 32, 64], 12, &mut rng);
        let img = Tensor::zeros(vec![1, 3, 32, 32]);
        let mut g = Graph::no_grad();
        let out = net.forward(&mut g, &img, None).unwrap();
        assert_eq!(out.shape(), vec![1, 12, 32, 32]);
    }

    #[test]
    fn discriminator_output_is_two_k_channels() {
        let mut rng = substream(7, "disc");
        let net = SegNet::init(&[16, 32, 64], 5, &mut rng);
        let disc = FineDiscriminator::init(64, 32, 5, &mut rng);
        let img = Tensor::zeros(vec![2, 3, 32, 32]);
        let mut g = Graph::no_grad();
        let fwd = net.forward_detailed(&mut g, &img, None).unwrap();
        assert_eq!(fwd.encoder_feature.shape(), vec![2, 64, 8, 8]);
        let d = disc.forward(&mut g, &fwd.encoder_feature).unwrap();
        assert_eq!(d.shape(), vec![2, 10, 32, 32]);
    }

    #[test]
    fn disabled_policy_equals_plain_forward() {
        use rand::Rng;
        let mut rng = substream(8, "seg");
        let net = SegNet::init(&[16, 32, 64], 4, &mut rng);
        let mut img_rng = substream(8, "img");
        let data: Vec<f32> = (0..2 * 3 * 16 * 16)
            .map(|_| img_rng.gen_range(0.0..1.0))
            .collect();
        let img = Tensor::from_vec(vec![2, 3, 16, 16], data).unwrap();
        let mut g1 = Graph::no_grad();
        let a = net.forward(&mut g1, &img, None).unwrap();
        let policy = PadainPolicy {
            prob: 0.0,
            pairing: Pairing::FirstHalfReceives,
        };
        let mut prng = substream(8, "padain");
        let mut g2 = Graph::no_grad();
        let b = net.forward(&mut g2, &img, Some((&policy, &mut prng))).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn self_partner_policy_is_identity() {
        use rand::Rng;
        let mut rng = substream(9, "seg");
        let net = SegNet::init(&[16, 32, 64], 4, &mut rng);
        let mut img_rng = substream(9, "img");
        let data: Vec<f32> = (0..2 * 3 * 16 * 16)
            .map(|_| img_rng.gen_range(0.0..1.0))
            .collect();
        let img = Tensor::from_vec(vec![2, 3, 16, 16], data).unwrap();
        let mut g1 = Graph::no_grad();
        let plain = net.forward(&mut g1, &img, None).unwrap();
        let policy = PadainPolicy {
            prob: 1.0,
            pairing: Pairing::SelfPartner,
        };
        let mut prng = substream(9, "padain");
        let mut g2 = Graph::no_grad();
        let swapped = net.forward(&mut g2, &img, Some((&policy, &mut prng))).unwrap();
        assert_eq!(plain.to_vec(), swapped.to_vec());
    }

    #[test]
    fn firing_policy_transfers_partner_statistics() {
        use rand::Rng;
        let mut rng = substream(10, "seg");
        let net = SegNet::init(&[16, 32, 64], 4, &mut rng);
        let mut img_rng = substream(10, "img");
        let data: Vec<f32> = (0..2 * 3 * 16 * 16)
            .map(|_| img_rng.gen_range(0.0..1.0))
            .collect();
        let img = Tensor::from_vec(vec![2, 3, 16, 16], data).unwrap();
        let policy = PadainPolicy {
            prob: 1.0,
            pairing: Pairing::FirstHalfReceives,
        };
        let mut prng = substream(10, "padain");
        let mut g = Graph::no_grad();
        let swapped = net
            .forward_detailed(&mut g, &img, Some((&policy, &mut prng)))
            .unwrap();
        // plain forward to recover the donor's original statistics per hook
        let mut g2 = Graph::no_grad();
        let plain = net.forward_detailed(&mut g2, &img, None).unwrap();
        // first hook: receiver sample 0 must carry donor sample 1's stats
        let (swapped_hook, plain_hook) = (&swapped.hook_outputs[0], &plain.hook_outputs[0]);
        let mut gs = Graph::no_grad();
        let (mu_s, sig_s) = gs.channel_stats(swapped_hook, STAT_EPS).unwrap();
        let (mu_p, sig_p) = gs.channel_stats(plain_hook, STAT_EPS).unwrap();
        let c = swapped_hook.shape()[1];
        for ci in 0..c {
            assert!((mu_s.to_vec()[ci] - mu_p.to_vec()[c + ci]).abs() < 1e-4);
            assert!((sig_s.to_vec()[ci] - sig_p.to_vec()[c + ci]).abs() < 1e-4);
        }
    }

    #[test]
    fn odd_batch_with_half_swap_is_rejected() {
        let mut rng = substream(11, "seg");
        let net = SegNet::init(&[16, 32, 64], 4, &mut rng);
        let img = Tensor::zeros(vec![3, 3, 16, 16]);
        let policy = PadainPolicy {
            prob: 1.0,
            pairing: Pairing::FirstHalfReceives,
        };
        let mut prng = substream(11, "padain");
        let mut g = Graph::no_grad();
        assert_eq!(
            net.forward(&mut g, &img, Some((&policy, &mut prng)))
                .unwrap_err()
                .category(),
            "invalid-batch"
        );
    }

    #[test]
    fn init_is_seed_reproducible() {
        let a = StyleEncoder::init(WIDTHS, &mut substream(12, "enc"));
        let b = StyleEncoder::init(WIDTHS, &mut substream(12, "enc"));
        let c = StyleEncoder::init(WIDTHS, &mut substream(13, "enc"));
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
        let differs = a
            .named_params()
            .iter()
            .zip(c.named_params().iter())
            .any(|((_, pa), (_, pc))| pa.to_vec() != pc.to_vec());
        assert!(differs);
    }

    #[test]
    fn init_spread_matches_fan_in_scaling() {
        // kernel with fan-in 3*3*32 = 288 and >= 10k draws
        let mut rng = substream(14, "init");
        let layer = ConvLayer::init(32, 35, 3, &mut rng);
        let w = layer.weight.to_vec();
        assert!(w.len() >= 10_000);
        let mean: f64 = w.iter().map(|v| f64::from(*v)).sum::<f64>() / w.len() as f64;
        let var: f64 =
            w.iter().map(|v| (f64::from(*v) - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expect = (2.0f64 / 288.0).sqrt();
        let ratio = var.sqrt() / expect;
        assert!(ratio > 0.8 && ratio < 1.2, "ratio {ratio}");
    }
}
