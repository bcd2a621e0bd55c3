//! Checkpointing for the trained artifacts: style-transfer model,
//! per-sub-domain segmentation models, discriminators, and the fitted
//! style space. Everything rides on the weights container, so the file
//! format properties (checksum, version, bit-exact round trip) apply
//! uniformly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::weights::{read_tensors, write_tensors};
use crate::nets::{FineDiscriminator, SegNet, StyleDecoder, StyleEncoder};
use crate::seg_train::{SegModel, TrainingMeta};
use crate::style_space::StyleSpace;
use crate::style_transfer::StyleTransferModel;
use crate::tensor::Tensor;

fn scalar(v: f32) -> Tensor {
    Tensor::scalar(v)
}

fn get<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
}

fn seed_to_tensors(seed: u64) -> Tensor {
    let chunks: Vec<f32> = (0..4)
        .map(|i| ((seed >> (16 * i)) & 0xFFFF) as f32)
        .collect();
    Tensor::from_vec(vec![4], chunks).expect("seed tensor")
}

fn seed_from_tensor(t: &Tensor) -> Result<u64> {
    let v = t.to_vec();
    if v.len() != 4 {
        return Err(Error::Format("seed tensor must have 4 entries".into()));
    }
    let mut seed = 0u64;
    for (i, &c) in v.iter().enumerate() {
        seed |= ((c as u64) & 0xFFFF) << (16 * i);
    }
    Ok(seed)
}

pub fn save_style_transfer(path: &Path, model: &StyleTransferModel) -> Result<()> {
    let mut entries = model.encoder.named_params();
    entries.extend(model.decoder.named_params());
    entries.push(("st.lambda_style".into(), scalar(model.lambda_style)));
    write_tensors(path, &entries)
}

pub fn load_style_transfer(path: &Path) -> Result<StyleTransferModel> {
    let entries = read_tensors(path)?;
    let encoder = StyleEncoder::from_named(&entries)?;
    let decoder = StyleDecoder::from_named(&entries)?;
    for (_, t) in decoder.named_params() {
        t.set_requires_grad(true);
    }
    let lambda = get(&entries, "st.lambda_style")?.item();
    Ok(StyleTransferModel::new(encoder, decoder, lambda))
}

pub fn save_seg_model(path: &Path, model: &SegModel) -> Result<()> {
    let mut entries = model.net.named_params();
    entries.push(("meta.domain_id".into(), scalar(model.domain_id as f32)));
    entries.push(("meta.class_count".into(), scalar(model.class_count as f32)));
    entries.push(("meta.steps".into(), scalar(model.meta.steps as f32)));
    entries.push(("meta.lr".into(), scalar(model.meta.lr)));
    entries.push(("meta.seed".into(), seed_to_tensors(model.meta.seed)));
    write_tensors(path, &entries)
}

pub fn load_seg_model(path: &Path) -> Result<SegModel> {
    let entries = read_tensors(path)?;
    let net = SegNet::from_named(&entries)?;
    for (_, t) in net.named_params() {
        t.set_requires_grad(true);
    }
    let class_count = get(&entries, "meta.class_count")?.item() as usize;
    if class_count != net.classes {
        return Err(Error::Format(format!(
            "checkpoint says {class_count} classes but the head has {}",
            net.classes
        )));
    }
    Ok(SegModel {
        domain_id: get(&entries, "meta.domain_id")?.item() as usize,
        class_count,
        meta: TrainingMeta {
            steps: get(&entries, "meta.steps")?.item() as usize,
            lr: get(&entries, "meta.lr")?.item(),
            seed: seed_from_tensor(get(&entries, "meta.seed")?)?,
        },
        net,
    })
}

pub fn save_discriminator(path: &Path, disc: &FineDiscriminator) -> Result<()> {
    write_tensors(path, &disc.named_params())
}

pub fn load_discriminator(path: &Path) -> Result<FineDiscriminator> {
    let entries = read_tensors(path)?;
    let disc = FineDiscriminator::from_named(&entries)?;
    for (_, t) in disc.named_params() {
        t.set_requires_grad(true);
    }
    Ok(disc)
}

pub fn save_style_space(path: &Path, space: &StyleSpace) -> Result<()> {
    let n = space.n_train();
    let dim = space.train_descriptors()[0].len();
    let d = space.dimension();
    let flat_desc: Vec<f32> = space.train_descriptors().concat();
    let domains: Vec<f32> = space.domains().iter().map(|&v| v as f32).collect();
    let row_means: Vec<f32> = space.row_means().iter().map(|&v| v as f32).collect();
    let alphas: Vec<f32> = space
        .alphas()
        .iter()
        .flat_map(|row| row.iter().map(|&v| v as f32))
        .collect();
    let eig: Vec<f32> = space.eigenvalues().iter().map(|&v| v as f32).collect();
    let emb: Vec<f32> = (0..n)
        .flat_map(|i| space.train_embedding(i).iter().map(|&v| v as f32))
        .collect();
    let entries = vec![
        (
            "space.train_descriptors".to_string(),
            Tensor::from_vec(vec![n, dim], flat_desc)?,
        ),
        ("space.domains".to_string(), Tensor::from_vec(vec![n], domains)?),
        (
            "space.row_means".to_string(),
            Tensor::from_vec(vec![n], row_means)?,
        ),
        (
            "space.grand_mean".to_string(),
            scalar(space.grand_mean() as f32),
        ),
        ("space.alphas".to_string(), Tensor::from_vec(vec![d, n], alphas)?),
        (
            "space.eigenvalues".to_string(),
            Tensor::from_vec(vec![space.eigenvalues().len()], eig)?,
        ),
        (
            "space.train_embeddings".to_string(),
            Tensor::from_vec(vec![n, d], emb)?,
        ),
        (
            "space.n_domains".to_string(),
            scalar(space.n_domains() as f32),
        ),
        (
            "space.evr".to_string(),
            scalar(space.explained_variance_ratio() as f32),
        ),
    ];
    write_tensors(path, &entries)
}

pub fn load_style_space(path: &Path) -> Result<StyleSpace> {
    let entries = read_tensors(path)?;
    let desc_t = get(&entries, "space.train_descriptors")?;
    let [n, dim] = match desc_t.shape().as_slice() {
        [n, dim] => [*n, *dim],
        other => {
            return Err(Error::Format(format!(
                "descriptor matrix must be rank 2, got {other:?}"
            )))
        }
    };
    let flat = desc_t.to_vec();
    let train_descriptors: Vec<Vec<f32>> =
        (0..n).map(|i| flat[i * dim..(i + 1) * dim].to_vec()).collect();
    let domains: Vec<usize> = get(&entries, "space.domains")?
        .to_vec()
        .iter()
        .map(|&v| v as usize)
        .collect();
    let row_means: Vec<f64> = get(&entries, "space.row_means")?
        .to_vec()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let grand_mean = f64::from(get(&entries, "space.grand_mean")?.item());
    let alphas_t = get(&entries, "space.alphas")?;
    let d = alphas_t.shape()[0];
    let aflat = alphas_t.to_vec();
    let alphas: Vec<Vec<f64>> = (0..d)
        .map(|j| aflat[j * n..(j + 1) * n].iter().map(|&v| f64::from(v)).collect())
        .collect();
    let eigenvalues: Vec<f64> = get(&entries, "space.eigenvalues")?
        .to_vec()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let emb_t = get(&entries, "space.train_embeddings")?;
    let eflat = emb_t.to_vec();
    let train_embeddings: Vec<Vec<f64>> = (0..n)
        .map(|i| eflat[i * d..(i + 1) * d].iter().map(|&v| f64::from(v)).collect())
        .collect();
    let n_domains = get(&entries, "space.n_domains")?.item() as usize;
    let evr = f64::from(get(&entries, "space.evr")?.item());
    StyleSpace::from_parts(
        train_descriptors,
        domains,
        n_domains,
        row_means,
        grand_mean,
        alphas,
        eigenvalues,
        train_embeddings,
        evr,
    )
}
