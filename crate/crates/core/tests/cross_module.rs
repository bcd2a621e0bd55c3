//! Cross-module behavior: the style space built from generated data must
//! separate the sub-domains, and fusion must collapse to single-model
//! prediction under one-hot weights.

use pmda_core::inference::{fuse, Ensemble, FuseMode};
use pmda_core::io::manifest::Manifest;
use pmda_core::io::synth::gen_synthetic;
use pmda_core::nets::{SegNet, StyleEncoder};
use pmda_core::rng::substream;
use pmda_core::seg_train::{predict, SegModel, TrainingMeta};
use pmda_core::style_space::{describe, fit_kpca, DomainWeights, StyleDescriptor};
use pmda_core::tensor::Tensor;

fn toy_seg_model(seed: u64, domain_id: usize, classes: usize) -> SegModel {
    SegModel {
        net: SegNet::init(&[8, 16, 32], classes, &mut substream(seed, "net")),
        domain_id,
        class_count: classes,
        meta: TrainingMeta {
            steps: 0,
            lr: 0.0,
            seed,
        },
    }
}

fn default_data() -> (Manifest, pmda_core::io::synth::SyntheticSets) {
    let m = Manifest::default_desk();
    let styles: Vec<_> = m.subdomains.iter().map(|s| s.style.clone()).collect();
    let sets = gen_synthetic(&m.gen, &styles, &m.unseen_style, m.image_size, m.seed).unwrap();
    (m, sets)
}

#[test]
fn domain_descriptors_cluster_by_style() {
    let (m, sets) = default_data();
    let encoder = StyleEncoder::init(m.nets.encoder_widths, &mut substream(m.seed, "style.init"));
    let desc_of = |img: &Tensor| describe(&encoder, img).unwrap();
    let d0: Vec<StyleDescriptor> = sets.domains[0].train.iter().map(|i| desc_of(&i.image)).collect();
    let d1: Vec<StyleDescriptor> = sets.domains[1].train.iter().map(|i| desc_of(&i.image)).collect();
    let dist = |a: &StyleDescriptor, b: &StyleDescriptor| -> f64 {
        a.vector
            .iter()
            .zip(b.vector.iter())
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mean_within = |xs: &[StyleDescriptor]| -> f64 {
        let mut total = 0.0;
        let mut n = 0u32;
        for i in 0..xs.len() {
            for j in (i + 1)..xs.len() {
                total += dist(&xs[i], &xs[j]);
                n += 1;
            }
        }
        total / f64::from(n)
    };
    let mut between = 0.0;
    for a in &d0 {
        for b in &d1 {
            between += dist(a, b);
        }
    }
    between /= (d0.len() * d1.len()) as f64;
    let within = (mean_within(&d0) + mean_within(&d1)) / 2.0;
    assert!(
        between > within,
        "between-domain mean {between} not above within-domain mean {within}"
    );
}

#[test]
fn knn_weights_favor_the_query_style() {
    let (m, sets) = default_data();
    let encoder = StyleEncoder::init(m.nets.encoder_widths, &mut substream(m.seed, "style.init"));
    let mut descriptors = Vec::new();
    let mut domains = Vec::new();
    for (d, set) in sets.domains.iter().enumerate() {
        for item in &set.train {
            descriptors.push(describe(&encoder, &item.image).unwrap());
            domains.push(d);
        }
    }
    let space = fit_kpca(&descriptors, &domains, m.space.d_max, m.space.variance_target).unwrap();
    let mut well_weighted = 0usize;
    let mut total = 0usize;
    for (d, set) in sets.domains.iter().enumerate() {
        for item in &set.test {
            let e = space.embed(&describe(&encoder, &item.image).unwrap()).unwrap();
            let w = space.knn_weights(&e, m.space.k).unwrap();
            total += 1;
            if w.values()[d] >= 0.8 {
                well_weighted += 1;
            }
        }
    }
    let rate = well_weighted as f64 / total as f64;
    assert!(
        rate >= 0.9,
        "only {rate:.2} of styled queries weighted >= 0.8 toward their own domain"
    );
}

#[test]
fn one_hot_fusion_equals_single_model_prediction() {
    let (_, sets) = default_data();
    let models = [toy_seg_model(1, 0, 5), toy_seg_model(2, 1, 5)];
    for item in sets.source_test.iter().take(4) {
        let logits: Vec<Tensor> = models
            .iter()
            .map(|mdl| pmda_core::seg_train::forward_logits(mdl, &item.image).unwrap())
            .collect();
        for (j, mdl) in models.iter().enumerate() {
            let fused = fuse(&logits, &DomainWeights::one_hot(2, j), FuseMode::Probability).unwrap();
            let single = predict(mdl, &item.image).unwrap();
            assert_eq!(fused[0], single);
        }
    }
}

#[test]
fn ensemble_infer_returns_one_hot_for_training_images() {
    let (m, sets) = default_data();
    let encoder = StyleEncoder::init(m.nets.encoder_widths, &mut substream(m.seed, "style.init"));
    let mut descriptors = Vec::new();
    let mut domains = Vec::new();
    for (d, set) in sets.domains.iter().enumerate() {
        for item in &set.train {
            descriptors.push(describe(&encoder, &item.image).unwrap());
            domains.push(d);
        }
    }
    let space = fit_kpca(&descriptors, &domains, m.space.d_max, m.space.variance_target).unwrap();
    let models = vec![toy_seg_model(3, 0, 5), toy_seg_model(4, 1, 5)];
    let ens = Ensemble::new(models, space, encoder, m.space.k, FuseMode::Probability).unwrap();

    // a training image deep inside domain 0's cluster
    let query = &sets.domains[0].train[0].image;
    let (map, w) = ens.infer(query).unwrap();
    assert_eq!(w.values()[0], 1.0);
    let single = predict(&ens.models[0], query).unwrap();
    assert_eq!(map, single);

    // k = n_train gives global proportions regardless of the query
    let ens_all = Ensemble::new(
        ens.models,
        ens.space,
        ens.encoder,
        32,
        FuseMode::Probability,
    )
    .unwrap();
    let (_, w_all) = ens_all.infer(query).unwrap();
    assert_eq!(w_all.values(), &[0.5, 0.5]);
}

#[test]
fn degenerate_all_zero_image_propagates_invalid_descriptor() {
    let (m, sets) = default_data();
    let encoder = StyleEncoder::init(m.nets.encoder_widths, &mut substream(m.seed, "style.init"));
    let mut descriptors = Vec::new();
    let mut domains = Vec::new();
    for (d, set) in sets.domains.iter().enumerate() {
        for item in &set.train {
            descriptors.push(describe(&encoder, &item.image).unwrap());
            domains.push(d);
        }
    }
    let space = fit_kpca(&descriptors, &domains, m.space.d_max, m.space.variance_target).unwrap();
    let models = vec![toy_seg_model(5, 0, 5), toy_seg_model(6, 1, 5)];
    let ens = Ensemble::new(models, space, encoder, m.space.k, FuseMode::Probability).unwrap();
    let zero = Tensor::zeros(vec![3, 32, 32]);
    assert_eq!(
        ens.infer(&zero).unwrap_err().category(),
        "invalid-descriptor"
    );
}
