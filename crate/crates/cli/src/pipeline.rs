//! Pipeline stages behind the CLI subcommands. Every stage reads its
//! inputs from disk, writes its artifacts under the run directory, and
//! appends a run record, so chained subcommands and `run-all` behave
//! identically.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use pmda_core::confusion::{confuse, ConfusionParams};
use pmda_core::error::{Error, Result};
use pmda_core::eval::{extract_collection, miou, MiouReport};
use pmda_core::inference::{Ensemble, FuseMode};
use pmda_core::io::manifest::{ImageLabelPair, Manifest, SubdomainData};
use pmda_core::io::models::{
    load_seg_model, load_style_space, load_style_transfer, save_discriminator, save_seg_model,
    save_style_space, save_style_transfer,
};
use pmda_core::io::synth::gen_synthetic;
use pmda_core::io::{
    read_pgm, read_ppm, resize_labels_nearest, resize_nearest, write_pgm, write_ppm, LabeledImage,
};
use pmda_core::labels::LabelMap;
use pmda_core::nets::{FineDiscriminator, SegNet, StyleDecoder, StyleEncoder};
use pmda_core::rng::substream;
use pmda_core::seg_train::{train_supervised, SegModel};
use pmda_core::style_space::{describe, fit_kpca};
use pmda_core::style_transfer::{make_pseudo_dataset, train_style_transfer, StyleTransferModel};
use pmda_core::tensor::Tensor;

use crate::records::append_record;

/// Canonical layout of one run directory.
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        RunPaths {
            out: out.to_path_buf(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn pseudo_dir(&self, domain: &str) -> PathBuf {
        self.out.join("pseudo").join(domain)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn style_model(&self) -> PathBuf {
        self.models_dir().join("style_transfer.pmda")
    }

    pub fn seg_model(&self, domain: &str) -> PathBuf {
        self.models_dir().join(format!("seg_{domain}.pmda"))
    }

    pub fn confused_model(&self, domain: &str) -> PathBuf {
        self.models_dir().join(format!("confused_{domain}.pmda"))
    }

    pub fn discriminator(&self, domain: &str) -> PathBuf {
        self.models_dir().join(format!("disc_{domain}.pmda"))
    }

    pub fn space(&self) -> PathBuf {
        self.models_dir().join("space.pmda")
    }

    pub fn predictions_dir(&self, split: &str) -> PathBuf {
        self.out.join("predictions").join(split)
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }

    pub fn collections_dir(&self) -> PathBuf {
        self.out.join("collections")
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report.json")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn load_pairs(pairs: &[ImageLabelPair]) -> Result<Vec<LabeledImage>> {
    pairs
        .iter()
        .map(|p| {
            Ok(LabeledImage {
                image: read_ppm(&p.image)?,
                label: read_pgm(&p.label)?,
            })
        })
        .collect()
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<Tensor>> {
    paths.iter().map(|p| read_ppm(p)).collect()
}

fn datasets_ready(manifest: &Manifest) -> Result<()> {
    if manifest.datasets.source_train.is_empty() || manifest.datasets.subdomains.is_empty() {
        return Err(Error::InvalidDataset(
            "manifest lists no generated datasets; run gen-data first".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Render the synthetic corpus and write a dataset-filled copy of the
/// manifest to `<out>/manifest.json`.
pub fn gen_data(manifest: &Manifest, out: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let paths = RunPaths::new(out);
    let styles: Vec<_> = manifest.subdomains.iter().map(|s| s.style.clone()).collect();
    let sets = gen_synthetic(
        &manifest.gen,
        &styles,
        &manifest.unseen_style,
        manifest.image_size,
        manifest.seed,
    )?;

    let write_split = |dir: &Path, items: &[LabeledImage], with_labels: bool| -> Result<Vec<ImageLabelPair>> {
        std::fs::create_dir_all(dir)?;
        let mut out_pairs = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let image = dir.join(format!("{i:03}.ppm"));
            let label = dir.join(format!("{i:03}.pgm"));
            write_ppm(&image, &item.image)?;
            if with_labels {
                write_pgm(&label, &item.label)?;
            }
            out_pairs.push(ImageLabelPair { image, label });
        }
        Ok(out_pairs)
    };

    let data = paths.data_dir();
    let mut filled = manifest.clone();
    filled.datasets.source_train = write_split(&data.join("source/train"), &sets.source_train, true)?;
    filled.datasets.source_test = write_split(&data.join("source/test"), &sets.source_test, true)?;
    filled.datasets.subdomains = Vec::new();
    for (spec, set) in manifest.subdomains.iter().zip(sets.domains.iter()) {
        let train =
            write_split(&data.join(&spec.name).join("train"), &set.train, false)?;
        let test = write_split(&data.join(&spec.name).join("test"), &set.test, true)?;
        filled.datasets.subdomains.push(SubdomainData {
            train_images: train.into_iter().map(|p| p.image).collect(),
            test,
        });
    }
    filled.datasets.unseen_test = write_split(&data.join("unseen/test"), &sets.unseen_test, true)?;

    filled.validate()?;
    filled.save(&paths.manifest())?;
    let artifact_count = filled.datasets.source_train.len()
        + filled.datasets.source_test.len()
        + filled.datasets.unseen_test.len();
    append_record(
        out,
        "gen-data",
        &filled,
        started,
        vec![paths.manifest(), paths.data_dir()],
        serde_json::json!({ "labeled_pairs": artifact_count }),
    )?;
    Ok(filled)
}

// ---------------------------------------------------------------------------
// train-style
// ---------------------------------------------------------------------------

pub fn train_style(manifest: &Manifest, out: &Path) -> Result<()> {
    let started = Instant::now();
    datasets_ready(manifest)?;
    let paths = RunPaths::new(out);
    let contents: Vec<Tensor> = load_pairs(&manifest.datasets.source_train)?
        .into_iter()
        .map(|li| li.image)
        .collect();
    let mut styles = Vec::new();
    for sub in &manifest.datasets.subdomains {
        styles.extend(load_images(&sub.train_images)?);
    }
    let mut rng = substream(manifest.seed, "style.init");
    let model = StyleTransferModel::new(
        StyleEncoder::init(manifest.nets.encoder_widths, &mut rng),
        StyleDecoder::init(manifest.nets.encoder_widths, &mut rng),
        manifest.style_transfer.lambda_style,
    );
    let trace = train_style_transfer(
        &model,
        &contents,
        &styles,
        manifest.style_transfer.steps,
        manifest.style_transfer.lr,
        manifest.style_transfer.momentum,
        manifest.seed,
    )?;
    std::fs::create_dir_all(paths.models_dir())?;
    save_style_transfer(&paths.style_model(), &model)?;
    let summary = trace_summary(&trace.iter().map(|l| l.total).collect::<Vec<_>>());
    log::info!("style transfer trained: {summary}");
    append_record(
        out,
        "train-style",
        manifest,
        started,
        vec![paths.style_model()],
        serde_json::json!({ "loss": summary }),
    )?;
    Ok(())
}

fn trace_summary(trace: &[f32]) -> serde_json::Value {
    if trace.is_empty() {
        return serde_json::json!(null);
    }
    let head = trace.iter().take(50).map(|&v| f64::from(v)).sum::<f64>()
        / trace.len().min(50) as f64;
    let tail_n = trace.len().min(50);
    let tail = trace[trace.len() - tail_n..]
        .iter()
        .map(|&v| f64::from(v))
        .sum::<f64>()
        / tail_n as f64;
    serde_json::json!({ "first_mean": head, "last_mean": tail, "steps": trace.len() })
}

// ---------------------------------------------------------------------------
// make-pseudo
// ---------------------------------------------------------------------------

pub fn make_pseudo(manifest: &Manifest, out: &Path, alpha_override: Option<f32>) -> Result<()> {
    let started = Instant::now();
    datasets_ready(manifest)?;
    let paths = RunPaths::new(out);
    require(&paths.style_model())?;
    let model = load_style_transfer(&paths.style_model())?;
    let source = load_pairs(&manifest.datasets.source_train)?;
    let alpha = alpha_override.unwrap_or(manifest.style_transfer.alpha);
    let mut artifacts = Vec::new();
    for (spec, sub) in manifest
        .subdomains
        .iter()
        .zip(manifest.datasets.subdomains.iter())
    {
        let styles = load_images(&sub.train_images)?;
        let pseudo = make_pseudo_dataset(
            &model,
            &source,
            &styles,
            alpha,
            manifest.seed ^ fxhash(&spec.name),
        )?;
        let dir = paths.pseudo_dir(&spec.name);
        std::fs::create_dir_all(&dir)?;
        for (i, item) in pseudo.iter().enumerate() {
            write_ppm(&dir.join(format!("{i:03}.ppm")), &item.image)?;
            write_pgm(&dir.join(format!("{i:03}.pgm")), &item.label)?;
        }
        artifacts.push(dir);
    }
    append_record(
        out,
        "make-pseudo",
        manifest,
        started,
        artifacts,
        serde_json::json!({ "alpha": alpha }),
    )?;
    Ok(())
}

fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn load_pseudo_set(paths: &RunPaths, domain: &str) -> Result<Vec<LabeledImage>> {
    let dir = paths.pseudo_dir(domain);
    require(&dir)?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|img| {
            let lbl = img.with_extension("pgm");
            require(&lbl)?;
            Ok(LabeledImage {
                image: read_ppm(img)?,
                label: read_pgm(&lbl)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// train-seg
// ---------------------------------------------------------------------------

pub fn train_seg(manifest: &Manifest, out: &Path, parallel: usize) -> Result<()> {
    let started = Instant::now();
    datasets_ready(manifest)?;
    let paths = RunPaths::new(out);
    std::fs::create_dir_all(paths.models_dir())?;
    let names: Vec<String> = manifest.subdomains.iter().map(|s| s.name.clone()).collect();

    let task = |domain_id: usize| -> Result<serde_json::Value> {
        let name = &names[domain_id];
        let paths = RunPaths::new(out);
        let dataset = load_pseudo_set(&paths, name)?;
        let net = SegNet::init(
            &manifest.nets.segnet_widths,
            manifest.classes.len(),
            &mut substream(manifest.seed, &format!("seg.init.{domain_id}")),
        );
        let (model, trace) = train_supervised(
            net,
            &dataset,
            manifest.seg_train.steps,
            manifest.seg_train.lr,
            manifest.seg_train.momentum,
            manifest.seg_train.batch,
            manifest.seg_train.padain_prob,
            domain_id,
            manifest.seed ^ fxhash(name),
        )?;
        save_seg_model(&paths.seg_model(name), &model)?;
        log::info!("trained segmentation model for `{name}`");
        Ok(trace_summary(&trace))
    };

    let summaries = run_domain_tasks(names.len(), parallel, task)?;
    append_record(
        out,
        "train-seg",
        manifest,
        started,
        names.iter().map(|n| paths.seg_model(n)).collect(),
        serde_json::json!({ "loss": summaries }),
    )?;
    Ok(())
}

/// Run one closure per sub-domain, optionally across threads. Each task
/// builds its own tensors and graphs; nothing thread-unsafe crosses the
/// boundary.
fn run_domain_tasks<F>(n: usize, parallel: usize, task: F) -> Result<Vec<serde_json::Value>>
where
    F: Fn(usize) -> Result<serde_json::Value> + Sync,
{
    let parallel = parallel.max(1);
    let mut results: Vec<Option<Result<serde_json::Value>>> = (0..n).map(|_| None).collect();
    for chunk_start in (0..n).step_by(parallel) {
        let chunk_end = (chunk_start + parallel).min(n);
        if parallel == 1 {
            for (d, slot) in results
                .iter_mut()
                .enumerate()
                .take(chunk_end)
                .skip(chunk_start)
            {
                *slot = Some(task(d));
            }
        } else {
            let slots = &mut results[chunk_start..chunk_end];
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for d in chunk_start..chunk_end {
                    let task = &task;
                    handles.push(scope.spawn(move || task(d)));
                }
                for (slot, handle) in slots.iter_mut().zip(handles) {
                    *slot = Some(handle.join().unwrap_or_else(|_| {
                        Err(Error::ContractViolation("domain task panicked".into()))
                    }));
                }
            });
        }
    }
    results
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

// ---------------------------------------------------------------------------
// confuse
// ---------------------------------------------------------------------------

pub fn confuse_stage(manifest: &Manifest, out: &Path, parallel: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let started = Instant::now();
    datasets_ready(manifest)?;
    let paths = RunPaths::new(out);
    let names: Vec<String> = manifest.subdomains.iter().map(|s| s.name.clone()).collect();
    for name in &names {
        require(&paths.seg_model(name))?;
    }
    let params = ConfusionParams {
        steps: manifest.confuse.steps,
        lr_seg: manifest.confuse.lr_seg,
        lr_disc: manifest.confuse.lr_disc,
        momentum: manifest.confuse.momentum,
        lambda_adv: manifest.confuse.lambda_adv,
        padain_prob: manifest.confuse.padain_prob,
        batch: manifest.confuse.batch,
        eval_every: manifest.confuse.eval_every,
    };

    let task = |domain_id: usize| -> Result<serde_json::Value> {
        let name = &names[domain_id];
        let paths = RunPaths::new(out);
        let model = load_seg_model(&paths.seg_model(name))?;
        let source = load_pairs(&manifest.datasets.source_train)?;
        let target = load_images(&manifest.datasets.subdomains[domain_id].train_images)?;
        let disc = FineDiscriminator::init(
            *manifest.nets.segnet_widths.last().expect("three stages"),
            manifest.nets.disc_hidden,
            manifest.classes.len(),
            &mut substream(manifest.seed, &format!("disc.init.{domain_id}")),
        );
        let result = confuse(
            model,
            &source,
            &target,
            disc,
            &params,
            manifest.seed ^ fxhash(name),
        )?;
        save_seg_model(&paths.confused_model(name), &result.model)?;
        save_discriminator(&paths.discriminator(name), &result.discriminator)?;
        log::info!("domain confusion finished for `{name}`");
        Ok(serde_json::json!({
            "loss_d": trace_summary(&result.trace.loss_d),
            "loss_seg": trace_summary(&result.trace.loss_seg),
            "disc_accuracy": result.trace.disc_accuracy,
        }))
    };

    let summaries = run_domain_tasks(names.len(), parallel, task)?;
    let traces: Vec<Vec<(usize, f64)>> = summaries
        .iter()
        .map(|s| {
            serde_json::from_value(s["disc_accuracy"].clone()).unwrap_or_default()
        })
        .collect();
    append_record(
        out,
        "confuse",
        manifest,
        started,
        names
            .iter()
            .flat_map(|n| [paths.confused_model(n), paths.discriminator(n)])
            .collect(),
        serde_json::json!({ "domains": summaries }),
    )?;
    Ok(traces)
}

// ---------------------------------------------------------------------------
// build-space
// ---------------------------------------------------------------------------

pub fn build_space(manifest: &Manifest, out: &Path) -> Result<()> {
    let started = Instant::now();
    datasets_ready(manifest)?;
    let paths = RunPaths::new(out);
    require(&paths.style_model())?;
    let encoder = load_style_transfer(&paths.style_model())?.encoder;
    let mut descriptors = Vec::new();
    let mut domains = Vec::new();
    for (d, sub) in manifest.datasets.subdomains.iter().enumerate() {
        for image in load_images(&sub.train_images)? {
            descriptors.push(describe(&encoder, &image)?);
            domains.push(d);
        }
    }
    let space = fit_kpca(
        &descriptors,
        &domains,
        manifest.space.d_max,
        manifest.space.variance_target,
    )?;
    std::fs::create_dir_all(paths.models_dir())?;
    save_style_space(&paths.space(), &space)?;
    log::info!(
        "style space fitted: {} rows, dimension {}, variance ratio {:.4}",
        space.n_train(),
        space.dimension(),
        space.explained_variance_ratio()
    );
    append_record(
        out,
        "build-space",
        manifest,
        started,
        vec![paths.space()],
        serde_json::json!({
            "dimension": space.dimension(),
            "explained_variance_ratio": space.explained_variance_ratio(),
            "rows": space.n_train(),
        }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

pub fn load_ensemble(manifest: &Manifest, paths: &RunPaths, k: usize, mode: FuseMode) -> Result<Ensemble> {
    require(&paths.space())?;
    require(&paths.style_model())?;
    let space = load_style_space(&paths.space())?;
    let encoder = load_style_transfer(&paths.style_model())?.encoder;
    let mut models = Vec::new();
    for spec in &manifest.subdomains {
        let confused = paths.confused_model(&spec.name);
        let seg = paths.seg_model(&spec.name);
        let path = if confused.exists() {
            confused
        } else if seg.exists() {
            seg
        } else {
            return Err(Error::MissingInput(confused));
        };
        models.push(load_seg_model(&path)?);
    }
    models.sort_by_key(|m| m.domain_id);
    Ensemble::new(models, space, encoder, k, mode)
}

/// Adapt an arbitrary input to the network contract: images already
/// >= 16x16 with both extents divisible by 4 pass through; anything else
/// is nearest-resized to the manifest size and the labels are mapped back.
fn infer_resized(ens: &Ensemble, image: &Tensor, size: usize) -> Result<(LabelMap, pmda_core::style_space::DomainWeights)> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let usable = h >= 16 && w >= 16 && h % 4 == 0 && w % 4 == 0;
    if usable {
        ens.infer(image)
    } else {
        let resized = resize_nearest(image, size, size)?;
        let (labels, weights) = ens.infer(&resized)?;
        Ok((resize_labels_nearest(&labels, h, w)?, weights))
    }
}

pub struct InferOutcome {
    pub label_path: PathBuf,
    pub weights: Vec<f64>,
}

pub fn infer_image(
    manifest: &Manifest,
    out: &Path,
    image_path: &Path,
    k: Option<usize>,
    mode: FuseMode,
) -> Result<InferOutcome> {
    let started = Instant::now();
    let paths = RunPaths::new(out);
    require(image_path)?;
    let ens = load_ensemble(manifest, &paths, k.unwrap_or(manifest.space.k), mode)?;
    let image = read_ppm(image_path)?;
    let (labels, weights) = infer_resized(&ens, &image, manifest.image_size)?;
    std::fs::create_dir_all(out)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let label_path = out.join(format!("{stem}.labels.pgm"));
    write_pgm(&label_path, &labels)?;
    append_record(
        out,
        "infer",
        manifest,
        started,
        vec![label_path.clone()],
        serde_json::json!({ "weights": weights.values() }),
    )?;
    Ok(InferOutcome {
        label_path,
        weights: weights.values().to_vec(),
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn sorted_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    require(dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Pair predictions with ground truth by file name and compute mIoU.
pub fn evaluate_dirs(manifest: &Manifest, pred_dir: &Path, gt_dir: &Path) -> Result<MiouReport> {
    let preds = sorted_pgms(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no .pgm predictions under {}",
            pred_dir.display()
        )));
    }
    let mut pred_maps = Vec::new();
    let mut gt_maps = Vec::new();
    for p in &preds {
        let name = p.file_name().expect("file name");
        let gt = gt_dir.join(name);
        require(&gt)?;
        pred_maps.push(read_pgm(p)?);
        gt_maps.push(read_pgm(&gt)?);
    }
    miou(&pred_maps, &gt_maps, manifest.classes.len())
}

pub fn format_metrics(manifest: &Manifest, report: &MiouReport) -> String {
    let mut text = String::new();
    for (name, iou) in manifest.classes.iter().zip(report.per_class.iter()) {
        match iou {
            Some(v) => text.push_str(&format!("{name:<14} {v:.4}\n")),
            None => text.push_str(&format!("{name:<14} -\n")),
        }
    }
    text.push_str(&format!("mIoU {:.4}\n", report.mean));
    text
}

pub fn write_metrics(
    manifest: &Manifest,
    paths: &RunPaths,
    split: &str,
    report: &MiouReport,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(paths.metrics_dir())?;
    let txt = paths.metrics_dir().join(format!("{split}.txt"));
    let json = paths.metrics_dir().join(format!("{split}.json"));
    std::fs::write(&txt, format_metrics(manifest, report))?;
    let value = serde_json::json!({
        "split": split,
        "per_class": report.per_class,
        "miou": report.mean,
        "evaluated_pixels": report.evaluated_pixels,
    });
    std::fs::write(&json, serde_json::to_string_pretty(&value).unwrap())?;
    Ok((txt, json))
}

// ---------------------------------------------------------------------------
// extract-segments
// ---------------------------------------------------------------------------

pub fn extract_segments(
    manifest: &Manifest,
    out: &Path,
    images_dir: &Path,
    labels_dir: &Path,
    class_id: u8,
    min_area: usize,
) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    if usize::from(class_id) >= manifest.classes.len() {
        return Err(Error::InvalidLabel {
            label: class_id,
            classes: manifest.classes.len(),
        });
    }
    let label_files = sorted_pgms(labels_dir)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut stems = Vec::new();
    for lbl in &label_files {
        let stem = lbl.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
        // prediction outputs are named `<stem>.labels.pgm`; the source
        // image is `<stem>.ppm`
        let stem = stem.strip_suffix(".labels").unwrap_or(stem);
        let img = images_dir.join(format!("{stem}.ppm"));
        require(&img)?;
        images.push(read_ppm(&img)?);
        labels.push(read_pgm(lbl)?);
        stems.push(stem.to_string());
    }
    let patches = extract_collection(&images, &labels, class_id, min_area)?;
    let class_name = &manifest.classes[usize::from(class_id)];
    let dir = out.join("collections").join(class_name);
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut per_image_counter = vec![0usize; stems.len()];
    for patch in &patches {
        let i = patch.segment.image_id;
        let path = dir.join(format!("{}_seg{}.ppm", stems[i], per_image_counter[i]));
        per_image_counter[i] += 1;
        write_ppm(&path, &patch.pixels)?;
        written.push(path);
    }
    append_record(
        out,
        "extract-segments",
        manifest,
        started,
        written.clone(),
        serde_json::json!({ "class": class_name, "segments": written.len(), "min_area": min_area }),
    )?;
    Ok(written)
}

// ---------------------------------------------------------------------------
// run-all
// ---------------------------------------------------------------------------

/// Everything the end-to-end run measures, serialized to `report.json`.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct RunAllReport {
    /// Own-domain test mIoU of each pseudo-trained model (before confusion).
    pub seg_own_domain_miou: Vec<f64>,
    /// Own-domain test mIoU of each model after the confusion stage.
    pub confused_own_domain_miou: Vec<f64>,
    /// Each confused model evaluated on the union of all sub-domain tests.
    pub single_combined_miou: Vec<f64>,
    /// Each confused model evaluated on the unseen-style split.
    pub single_unseen_miou: Vec<f64>,
    /// Weighted fusion on the combined and unseen splits.
    pub fused_combined_miou: f64,
    pub fused_unseen_miou: f64,
    pub fused_per_domain_miou: Vec<f64>,
    /// `(step, held-out discriminator accuracy)` per domain.
    pub confusion_traces: Vec<Vec<(usize, f64)>>,
}

fn predict_with(model: &SegModel, image: &Tensor) -> Result<LabelMap> {
    pmda_core::seg_train::predict(model, image)
}

/// Chain all stages with the shared seed, then predict, evaluate, and
/// extract collections.
pub fn run_all(manifest: &Manifest, out: &Path, parallel: usize) -> Result<RunAllReport> {
    let paths = RunPaths::new(out);
    let manifest = gen_data(manifest, out)?;
    train_style(&manifest, out)?;
    make_pseudo(&manifest, out, None)?;
    train_seg(&manifest, out, parallel)?;
    let confusion_traces = confuse_stage(&manifest, out, parallel)?;
    build_space(&manifest, out)?;

    let names: Vec<String> = manifest.subdomains.iter().map(|s| s.name.clone()).collect();
    let classes = manifest.classes.len();

    // load everything once
    let seg_models: Vec<SegModel> = names
        .iter()
        .map(|n| load_seg_model(&paths.seg_model(n)))
        .collect::<Result<_>>()?;
    let confused_models: Vec<SegModel> = names
        .iter()
        .map(|n| load_seg_model(&paths.confused_model(n)))
        .collect::<Result<_>>()?;
    let ens = load_ensemble(&manifest, &paths, manifest.space.k, FuseMode::Probability)?;

    let domain_tests: Vec<Vec<LabeledImage>> = manifest
        .datasets
        .subdomains
        .iter()
        .map(|sub| load_pairs(&sub.test))
        .collect::<Result<_>>()?;
    let unseen_test = load_pairs(&manifest.datasets.unseen_test)?;

    // fused predictions per split, written to disk
    let mut fused_domain_preds: Vec<Vec<LabelMap>> = Vec::new();
    for (name, test) in names.iter().zip(domain_tests.iter()) {
        let dir = paths.predictions_dir(name);
        std::fs::create_dir_all(&dir)?;
        let mut preds = Vec::new();
        for (i, item) in test.iter().enumerate() {
            let (labels, _) = ens.infer(&item.image)?;
            write_pgm(&dir.join(format!("{i:03}.pgm")), &labels)?;
            preds.push(labels);
        }
        fused_domain_preds.push(preds);
    }
    let unseen_dir = paths.predictions_dir("unseen");
    std::fs::create_dir_all(&unseen_dir)?;
    let mut fused_unseen_preds = Vec::new();
    for (i, item) in unseen_test.iter().enumerate() {
        let (labels, _) = ens.infer(&item.image)?;
        write_pgm(&unseen_dir.join(format!("{i:03}.pgm")), &labels)?;
        fused_unseen_preds.push(labels);
    }

    // metric bundles
    let eval_set = |preds: &[LabelMap], gts: &[&LabelMap]| -> Result<f64> {
        let gt_owned: Vec<LabelMap> = gts.iter().map(|g| (*g).clone()).collect();
        Ok(miou(preds, &gt_owned, classes)?.mean)
    };
    let single_on = |model: &SegModel, items: &[&LabeledImage]| -> Result<f64> {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for item in items {
            preds.push(predict_with(model, &item.image)?);
            gts.push(&item.label);
        }
        eval_set(&preds, &gts)
    };

    let mut seg_own = Vec::new();
    let mut confused_own = Vec::new();
    let mut single_combined = Vec::new();
    let mut single_unseen = Vec::new();
    let combined_items: Vec<&LabeledImage> = domain_tests.iter().flatten().collect();
    let unseen_items: Vec<&LabeledImage> = unseen_test.iter().collect();
    for d in 0..names.len() {
        let own_items: Vec<&LabeledImage> = domain_tests[d].iter().collect();
        seg_own.push(single_on(&seg_models[d], &own_items)?);
        confused_own.push(single_on(&confused_models[d], &own_items)?);
        single_combined.push(single_on(&confused_models[d], &combined_items)?);
        single_unseen.push(single_on(&confused_models[d], &unseen_items)?);
    }

    let mut fused_per_domain = Vec::new();
    let mut all_fused: Vec<LabelMap> = Vec::new();
    let mut all_gt: Vec<&LabelMap> = Vec::new();
    for (d, (preds, test)) in fused_domain_preds.iter().zip(domain_tests.iter()).enumerate() {
        let gts: Vec<&LabelMap> = test.iter().map(|t| &t.label).collect();
        let report = eval_set(preds, &gts)?;
        fused_per_domain.push(report);
        all_fused.extend(preds.iter().cloned());
        all_gt.extend(gts);
        let full = miou(
            preds,
            &test.iter().map(|t| t.label.clone()).collect::<Vec<_>>(),
            classes,
        )?;
        write_metrics(&manifest, &paths, &names[d], &full)?;
    }
    let fused_combined = eval_set(&all_fused, &all_gt)?;
    let combined_report = miou(
        &all_fused,
        &all_gt.iter().map(|g| (*g).clone()).collect::<Vec<_>>(),
        classes,
    )?;
    write_metrics(&manifest, &paths, "combined", &combined_report)?;
    let unseen_gts: Vec<LabelMap> = unseen_test.iter().map(|t| t.label.clone()).collect();
    let unseen_report = miou(&fused_unseen_preds, &unseen_gts, classes)?;
    write_metrics(&manifest, &paths, "unseen", &unseen_report)?;

    // comparative collections for every object class over the combined
    // fused predictions
    for class_id in 1..classes.min(usize::from(u8::MAX)) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (test, preds) in domain_tests.iter().zip(fused_domain_preds.iter()) {
            for (item, pred) in test.iter().zip(preds.iter()) {
                images.push(item.image.clone());
                labels.push(pred.clone());
            }
        }
        let patches = extract_collection(&images, &labels, class_id as u8, 4)?;
        if patches.is_empty() {
            continue;
        }
        let dir = paths
            .collections_dir()
            .join(&manifest.classes[class_id]);
        std::fs::create_dir_all(&dir)?;
        for (i, patch) in patches.iter().enumerate() {
            write_ppm(
                &dir.join(format!("img{:03}_seg{i:03}.ppm", patch.segment.image_id)),
                &patch.pixels,
            )?;
        }
    }

    let report = RunAllReport {
        seg_own_domain_miou: seg_own,
        confused_own_domain_miou: confused_own,
        single_combined_miou: single_combined,
        single_unseen_miou: single_unseen,
        fused_combined_miou: fused_combined,
        fused_unseen_miou: unseen_report.mean,
        fused_per_domain_miou: fused_per_domain,
        confusion_traces,
    };
    std::fs::write(
        paths.report(),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::ContractViolation(format!("report serialization: {e}")))?,
    )?;
    log::info!(
        "run-all finished: fused combined mIoU {:.4}, unseen {:.4}",
        report.fused_combined_miou,
        report.fused_unseen_miou
    );
    Ok(report)
}
