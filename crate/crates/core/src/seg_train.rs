//! Supervised training of one segmentation network per sub-domain on its
//! pseudo-stylized set, and single-model prediction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::LabeledImage;
use crate::labels::{LabelMap, IGNORE};
use crate::nets::{Pairing, PadainPolicy, SegNet};
use crate::rng::substream;
use crate::tensor::{Graph, Sgd, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct TrainingMeta {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

/// One sub-domain's trained segmentation network.
#[derive(Debug)]
pub struct SegModel {
    pub net: SegNet,
    pub domain_id: usize,
    pub class_count: usize,
    pub meta: TrainingMeta,
}

/// SGD on pixel-wise cross-entropy over uniformly sampled batches, with
/// the within-batch statistic swap applied at the hook points with
/// per-layer probability `padain_prob`.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    net: SegNet,
    dataset: &[LabeledImage],
    steps: usize,
    lr: f32,
    momentum: f32,
    batch: usize,
    padain_prob: f64,
    domain_id: usize,
    seed: u64,
) -> Result<(SegModel, Vec<f32>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidBatch("batch must be positive".into()));
    }
    if padain_prob > 0.0 && batch % 2 != 0 {
        return Err(Error::InvalidBatch(
            "statistic swap needs an even batch".into(),
        ));
    }
    let params = net.params();
    let mut opt = Sgd::new(&params, lr, momentum);
    let mut batch_rng = substream(seed, "seg.batch");
    let mut padain_rng = substream(seed, "seg.padain");
    let policy = PadainPolicy {
        prob: padain_prob,
        pairing: Pairing::FirstHalfReceives,
    };
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch)
            .map(|_| batch_rng.gen_range(0..dataset.len()))
            .collect();
        let images: Vec<Tensor> = idx.iter().map(|&i| dataset[i].image.clone()).collect();
        let labels: Vec<LabelMap> = idx.iter().map(|&i| dataset[i].label.clone()).collect();
        let stacked = Tensor::stack_batch(&images)?;
        let mut g = Graph::new();
        let logits = if padain_prob > 0.0 {
            net.forward(&mut g, &stacked, Some((&policy, &mut padain_rng)))?
        } else {
            net.forward(&mut g, &stacked, None)?
        };
        let loss = g.softmax_cross_entropy(&logits, &labels, Some(IGNORE))?;
        g.backward(&loss)?;
        opt.step(&params)?;
        trace.push(loss.item());
    }
    let class_count = net.classes;
    Ok((
        SegModel {
            net,
            domain_id,
            class_count,
            meta: TrainingMeta { steps, lr, seed },
        },
        trace,
    ))
}

/// Per-pixel argmax over channels; ties break toward the lowest class
/// index. Input `[B,C,H,W]`, one label map per batch row.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "argmax expects [B,C,H,W], got {s:?}"
        )));
    }
    let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
    let data = logits.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut labels = vec![0u8; hw];
        for p in 0..hw {
            let mut best = data[bi * c * hw + p];
            let mut best_c = 0usize;
            for ci in 1..c {
                let v = data[(bi * c + ci) * hw + p];
                if v > best {
                    best = v;
                    best_c = ci;
                }
            }
            labels[p] = best_c as u8;
        }
        out.push(LabelMap::new(h, w, labels)?);
    }
    Ok(out)
}

/// Run the model on one `[3,H,W]` image and take the per-pixel argmax.
pub fn predict(model: &SegModel, image: &Tensor) -> Result<LabelMap> {
    let logits = forward_logits(model, image)?;
    Ok(argmax_labels(&logits)?.remove(0))
}

/// Raw class scores for one `[3,H,W]` image, shape `[1,C,H,W]`.
pub fn forward_logits(model: &SegModel, image: &Tensor) -> Result<Tensor> {
    let batch = match image.rank() {
        3 => Tensor::stack_batch(std::slice::from_ref(image))?,
        4 => image.clone(),
        _ => {
            return Err(Error::InvalidShape(format!(
                "predict expects [3,H,W], got {:?}",
                image.shape()
            )))
        }
    };
    let mut g = Graph::no_grad();
    model.net.forward(&mut g, &batch, None)
}
