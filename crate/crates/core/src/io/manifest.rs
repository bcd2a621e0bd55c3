//! Run manifest: class set, sub-domain style definitions, per-stage
//! hyperparameters, dataset file lists, and the shared seed. JSON on disk;
//! relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic style function parameters for one sub-domain.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StyleParams {
    /// Rotation of RGB values around the gray axis, in degrees.
    pub hue_deg: f32,
    /// Amplitude of additive per-pixel uniform noise, in `[0, 1]`.
    pub noise_amp: f32,
    /// Box blur radius in pixels (0 disables).
    pub blur_radius: u32,
    /// Per-channel gamma applied to `[0, 1]` values, in `[0.05, 20]`.
    pub contrast_exp: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubdomainSpec {
    pub name: String,
    pub style: StyleParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    /// Labeled source scenes (photographic stand-ins).
    pub n_source_train: usize,
    pub n_source_test: usize,
    /// Unlabeled styled scenes per sub-domain (the target corpus).
    pub n_domain_train: usize,
    /// Labeled styled test scenes per sub-domain.
    pub n_domain_test: usize,
    /// Labeled test scenes in the held-out unseen style.
    pub n_unseen_test: usize,
    /// How many object classes the scene renderer uses (<= classes - 1).
    pub object_classes: usize,
    /// Per-instance color jitter amplitude. Larger values weaken the
    /// absolute-color shortcut so shape and contrast carry class identity.
    #[serde(default = "default_color_jitter")]
    pub color_jitter: f32,
}

fn default_color_jitter() -> f32 {
    0.15
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleTransferConfig {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub lambda_style: f32,
    /// Content/style interpolation weight used when stylizing.
    pub alpha: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub padain_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfuseConfig {
    pub steps: usize,
    pub lr_seg: f32,
    pub lr_disc: f32,
    pub momentum: f32,
    pub lambda_adv: f32,
    pub padain_prob: f64,
    pub batch: usize,
    /// Record held-out discriminator accuracy every this many steps.
    pub eval_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub d_max: usize,
    pub variance_target: f64,
    pub k: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder_widths: [usize; 5],
    pub segnet_widths: Vec<usize>,
    pub disc_hidden: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct ImageLabelPair {
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct SubdomainData {
    /// Unlabeled target-style corpus (style images, confusion targets,
    /// style-space rows).
    pub train_images: Vec<PathBuf>,
    pub test: Vec<ImageLabelPair>,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct Datasets {
    pub source_train: Vec<ImageLabelPair>,
    pub source_test: Vec<ImageLabelPair>,
    pub subdomains: Vec<SubdomainData>,
    pub unseen_test: Vec<ImageLabelPair>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub seed: u64,
    pub image_size: usize,
    pub subdomains: Vec<SubdomainSpec>,
    pub unseen_style: StyleParams,
    pub gen: GenConfig,
    pub style_transfer: StyleTransferConfig,
    pub seg_train: SegTrainConfig,
    pub confuse: ConfuseConfig,
    pub space: SpaceConfig,
    pub nets: NetConfig,
    #[serde(default)]
    pub datasets: Datasets,
}

fn err(key: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        key: key.to_string(),
        message: message.into(),
    }
}

impl Manifest {
    /// Default desk-scale run: 12 classes, two synthetic sub-domains, and
    /// hyperparameters sized for minutes of CPU time.
    pub fn default_desk() -> Manifest {
        Manifest {
            classes: [
                "background",
                "bird",
                "boat",
                "bottle",
                "cat",
                "chair",
                "cow",
                "dog",
                "horse",
                "person",
                "potted-plant",
                "sheep",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            seed: 7,
            image_size: 32,
            subdomains: vec![
                SubdomainSpec {
                    name: "umber".into(),
                    style: StyleParams {
                        hue_deg: 25.0,
                        noise_amp: 0.02,
                        blur_radius: 1,
                        contrast_exp: 1.5,
                    },
                },
                SubdomainSpec {
                    name: "frost".into(),
                    style: StyleParams {
                        hue_deg: -35.0,
                        noise_amp: 0.08,
                        blur_radius: 0,
                        contrast_exp: 0.65,
                    },
                },
            ],
            unseen_style: StyleParams {
                hue_deg: -8.0,
                noise_amp: 0.05,
                blur_radius: 1,
                contrast_exp: 1.15,
            },
            gen: GenConfig {
                n_source_train: 24,
                n_source_test: 8,
                n_domain_train: 16,
                n_domain_test: 8,
                n_unseen_test: 8,
                object_classes: 4,
                color_jitter: 0.15,
            },
            style_transfer: StyleTransferConfig {
                steps: 300,
                lr: 0.01,
                momentum: 0.9,
                lambda_style: 10.0,
                alpha: 0.5,
            },
            seg_train: SegTrainConfig {
                steps: 500,
                lr: 0.05,
                momentum: 0.9,
                batch: 4,
                padain_prob: 0.01,
            },
            confuse: ConfuseConfig {
                steps: 200,
                lr_seg: 0.01,
                lr_disc: 0.05,
                momentum: 0.9,
                lambda_adv: 0.01,
                padain_prob: 0.01,
                batch: 4,
                eval_every: 10,
            },
            space: SpaceConfig {
                d_max: 32,
                variance_target: 0.99,
                k: 5,
            },
            nets: NetConfig {
                encoder_widths: [8, 16, 32, 64, 64],
                segnet_widths: vec![16, 32, 64],
                disc_hidden: 32,
            },
            datasets: Datasets::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| err("$", format!("invalid JSON: {e}")))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve_paths(base);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| err("$", format!("serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        let fix_pair = |pair: &mut ImageLabelPair| {
            let rel_img = pair.image.is_relative();
            if rel_img {
                pair.image = base.join(&pair.image);
            }
            if pair.label.is_relative() {
                pair.label = base.join(&pair.label);
            }
        };
        for p in self.datasets.source_train.iter_mut() {
            fix_pair(p);
        }
        for p in self.datasets.source_test.iter_mut() {
            fix_pair(p);
        }
        for d in self.datasets.subdomains.iter_mut() {
            for p in d.train_images.iter_mut() {
                fix(p);
            }
            for p in d.test.iter_mut() {
                fix_pair(p);
            }
        }
        for p in self.datasets.unseen_test.iter_mut() {
            fix_pair(p);
        }
    }

    fn validate_style(key: &str, s: &StyleParams) -> Result<()> {
        if !s.hue_deg.is_finite() {
            return Err(err(&format!("{key}.hue_deg"), "must be finite"));
        }
        if !(0.0..=1.0).contains(&s.noise_amp) {
            return Err(err(&format!("{key}.noise_amp"), "must be in [0, 1]"));
        }
        if s.blur_radius > 8 {
            return Err(err(&format!("{key}.blur_radius"), "must be <= 8"));
        }
        if !(0.05..=20.0).contains(&s.contrast_exp) {
            return Err(err(&format!("{key}.contrast_exp"), "must be in [0.05, 20]"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(err("classes", "class list must be nonempty"));
        }
        if self.classes[0] != "background" {
            return Err(err("classes[0]", "class 0 must be \"background\""));
        }
        if self.classes.len() > 254 {
            return Err(err("classes", "at most 254 classes (255 is the ignore id)"));
        }
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return Err(err(
                "image_size",
                "must be >= 16 and a multiple of 8 (three halvings in the nets)",
            ));
        }
        if self.subdomains.is_empty() {
            return Err(err("subdomains", "need at least one sub-domain"));
        }
        for (i, d) in self.subdomains.iter().enumerate() {
            if d.name.is_empty() {
                return Err(err(&format!("subdomains[{i}].name"), "must be nonempty"));
            }
            if self.subdomains[..i].iter().any(|o| o.name == d.name) {
                return Err(err(
                    &format!("subdomains[{i}].name"),
                    format!("duplicate sub-domain name `{}`", d.name),
                ));
            }
            Self::validate_style(&format!("subdomains[{i}].style"), &d.style)?;
        }
        Self::validate_style("unseen_style", &self.unseen_style)?;
        if self.gen.object_classes == 0 || self.gen.object_classes >= self.classes.len() {
            return Err(err(
                "gen.object_classes",
                format!("must be in [1, {}]", self.classes.len() - 1),
            ));
        }
        if self.gen.n_source_train == 0 {
            return Err(err("gen.n_source_train", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.gen.color_jitter) {
            return Err(err("gen.color_jitter", "must be in [0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.style_transfer.alpha) {
            return Err(err("style_transfer.alpha", "must be in [0, 1]"));
        }
        if self.style_transfer.lambda_style < 0.0 {
            return Err(err("style_transfer.lambda_style", "must be nonnegative"));
        }
        if self.style_transfer.lr <= 0.0 || self.seg_train.lr <= 0.0 {
            return Err(err("style_transfer.lr", "learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.seg_train.padain_prob) {
            return Err(err("seg_train.padain_prob", "must be in [0, 1]"));
        }
        if self.seg_train.batch == 0 {
            return Err(err("seg_train.batch", "must be positive"));
        }
        if self.seg_train.padain_prob > 0.0 && self.seg_train.batch % 2 != 0 {
            return Err(err(
                "seg_train.batch",
                "must be even when the statistic swap is enabled",
            ));
        }
        if !(0.0..=1.0).contains(&self.confuse.padain_prob) {
            return Err(err("confuse.padain_prob", "must be in [0, 1]"));
        }
        if self.confuse.batch == 0 {
            return Err(err("confuse.batch", "must be positive"));
        }
        if self.confuse.lr_seg <= 0.0 || self.confuse.lr_disc <= 0.0 {
            return Err(err("confuse.lr_seg", "learning rates must be positive"));
        }
        if self.confuse.lambda_adv < 0.0 {
            return Err(err("confuse.lambda_adv", "must be nonnegative"));
        }
        if self.confuse.eval_every == 0 {
            return Err(err("confuse.eval_every", "must be positive"));
        }
        if self.space.d_max == 0 {
            return Err(err("space.d_max", "must be positive"));
        }
        if !(0.0 < self.space.variance_target && self.space.variance_target <= 1.0) {
            return Err(err("space.variance_target", "must be in (0, 1]"));
        }
        if self.space.k == 0 {
            return Err(err("space.k", "must be positive"));
        }
        if self.nets.segnet_widths.len() != 3 {
            return Err(err("nets.segnet_widths", "exactly three encoder stages"));
        }
        if self.nets.encoder_widths.iter().any(|&w| w == 0)
            || self.nets.segnet_widths.iter().any(|&w| w == 0)
            || self.nets.disc_hidden == 0
        {
            return Err(err("nets", "channel widths must be positive"));
        }
        self.validate_files()
    }

    fn validate_files(&self) -> Result<()> {
        let check = |key: String, p: &Path| -> Result<()> {
            if !p.exists() {
                return Err(err(&key, format!("referenced file does not exist: {}", p.display())));
            }
            Ok(())
        };
        for (i, pair) in self.datasets.source_train.iter().enumerate() {
            check(format!("datasets.source_train[{i}].image"), &pair.image)?;
            check(format!("datasets.source_train[{i}].label"), &pair.label)?;
        }
        for (i, pair) in self.datasets.source_test.iter().enumerate() {
            check(format!("datasets.source_test[{i}].image"), &pair.image)?;
            check(format!("datasets.source_test[{i}].label"), &pair.label)?;
        }
        for (d, sub) in self.datasets.subdomains.iter().enumerate() {
            for (i, p) in sub.train_images.iter().enumerate() {
                check(format!("datasets.subdomains[{d}].train_images[{i}]"), p)?;
            }
            for (i, pair) in sub.test.iter().enumerate() {
                check(format!("datasets.subdomains[{d}].test[{i}].image"), &pair.image)?;
                check(format!("datasets.subdomains[{d}].test[{i}].label"), &pair.label)?;
            }
        }
        for (i, pair) in self.datasets.unseen_test.iter().enumerate() {
            check(format!("datasets.unseen_test[{i}].image"), &pair.image)?;
            check(format!("datasets.unseen_test[{i}].label"), &pair.label)?;
        }
        if !self.datasets.subdomains.is_empty()
            && self.datasets.subdomains.len() != self.subdomains.len()
        {
            return Err(err(
                "datasets.subdomains",
                format!(
                    "{} dataset entries for {} configured sub-domains",
                    self.datasets.subdomains.len(),
                    self.subdomains.len()
                ),
            ));
        }
        Ok(())
    }
}
