//! Synthetic multi-sub-domain dataset generator: base scenes of colored
//! shapes (one shape type per class), re-rendered per sub-domain by a
//! parametric style function. Stands in for real photo/painting corpora
//! at desk scale.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::manifest::{GenConfig, StyleParams};
use crate::io::LabeledImage;
use crate::labels::{LabelMap, IGNORE};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Shape/color palette, indexed by `class_id - 1`.
const PALETTE: [( &str, [f32; 3]); 11] = [
    ("disk", [0.85, 0.12, 0.12]),
    ("square", [0.10, 0.75, 0.20]),
    ("triangle", [0.12, 0.25, 0.88]),
    ("hbar", [0.92, 0.85, 0.10]),
    ("ring", [0.85, 0.15, 0.80]),
    ("diamond", [0.10, 0.80, 0.85]),
    ("cross", [0.95, 0.55, 0.10]),
    ("vbar", [0.55, 0.15, 0.85]),
    ("chevron", [0.05, 0.55, 0.50]),
    ("frame", [0.55, 0.35, 0.12]),
    ("blob", [0.95, 0.60, 0.70]),
];

fn inside(shape: &str, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        "disk" => dy * dy + dx * dx <= r * r,
        "square" => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        "triangle" => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        "hbar" => dy.abs() <= r * 0.4 && dx.abs() <= r,
        "ring" => {
            let d = (dy * dy + dx * dx).sqrt();
            d <= r && d >= r * 0.55
        }
        "diamond" => dy.abs() + dx.abs() <= r,
        "cross" => (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r),
        "vbar" => dx.abs() <= r * 0.4 && dy.abs() <= r,
        "chevron" => (dy - dx.abs() * 0.8).abs() <= r * 0.4 && dx.abs() <= r,
        "frame" => {
            let s = r * 0.9;
            dy.abs() <= s && dx.abs() <= s && (dy.abs() >= s * 0.5 || dx.abs() >= s * 0.5)
        }
        "blob" => {
            let e = (dy / (r * 0.7)).powi(2) + (dx / r).powi(2);
            e <= 1.0
        }
        _ => false,
    }
}

/// Render one base scene: jittered-grid placement of one shape per object
/// class over a gray background, with a one-pixel ignore ring around each
/// shape. `color_jitter` is the per-instance color perturbation amplitude.
pub fn render_scene_jittered(
    size: usize,
    object_classes: usize,
    color_jitter: f32,
    rng: &mut ChaCha8Rng,
) -> LabeledImage {
    assert!(object_classes >= 1 && object_classes <= PALETTE.len());
    let mut pixels = vec![0.0f32; 3 * size * size];
    let base = rng.gen_range(0.54..0.70);
    for c in 0..3 {
        let tint = base + rng.gen_range(-0.02..0.02);
        for p in 0..size * size {
            pixels[c * size * size + p] = tint;
        }
    }
    let mut labels = LabelMap::filled(size, size, 0);

    let grid = (object_classes as f32).sqrt().ceil() as usize;
    let cell = size as f32 / grid as f32;
    let mut cells: Vec<(usize, usize)> = (0..grid)
        .flat_map(|gy| (0..grid).map(move |gx| (gy, gx)))
        .collect();
    cells.shuffle(rng);

    for class in 1..=object_classes {
        let (gy, gx) = cells[class - 1];
        let cy = (gy as f32 + 0.5) * cell + rng.gen_range(-0.12..0.12) * cell;
        let cx = (gx as f32 + 0.5) * cell + rng.gen_range(-0.12..0.12) * cell;
        let radius = cell * rng.gen_range(0.32..0.40);
        let (shape, color) = PALETTE[class - 1];
        let j = color_jitter.max(1e-6);
        let jitter: [f32; 3] = [
            rng.gen_range(-j..j),
            rng.gen_range(-j..j),
            rng.gen_range(-j..j),
        ];
        for y in 0..size {
            for x in 0..size {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                if inside(shape, dy, dx, radius) {
                    for c in 0..3 {
                        pixels[c * size * size + y * size + x] =
                            (color[c] + jitter[c]).clamp(0.0, 1.0);
                    }
                    labels.set(y, x, class as u8);
                }
            }
        }
    }
    // one-pixel ignore ring: background pixels 4-adjacent to an object
    let snapshot = labels.clone();
    for y in 0..size {
        for x in 0..size {
            if snapshot.get(y, x) != 0 {
                continue;
            }
            let mut touches = false;
            if y > 0 && (1..=254).contains(&snapshot.get(y - 1, x)) {
                touches = true;
            }
            if y + 1 < size && (1..=254).contains(&snapshot.get(y + 1, x)) {
                touches = true;
            }
            if x > 0 && (1..=254).contains(&snapshot.get(y, x - 1)) {
                touches = true;
            }
            if x + 1 < size && (1..=254).contains(&snapshot.get(y, x + 1)) {
                touches = true;
            }
            if touches {
                labels.set(y, x, IGNORE);
            }
        }
    }
    LabeledImage {
        image: Tensor::from_vec(vec![3, size, size], pixels).expect("scene pixels"),
        label: labels,
    }
}

/// [`render_scene_jittered`] with the default jitter amplitude.
pub fn render_scene(size: usize, object_classes: usize, rng: &mut ChaCha8Rng) -> LabeledImage {
    render_scene_jittered(size, object_classes, 0.15, rng)
}

fn hue_matrix(deg: f32) -> [[f32; 3]; 3] {
    let th = deg.to_radians();
    let (c, s) = (th.cos(), th.sin());
    let a = c + (1.0 - c) / 3.0;
    let b1 = (1.0 - c) / 3.0 - s / 3.0f32.sqrt();
    let b2 = (1.0 - c) / 3.0 + s / 3.0f32.sqrt();
    [[a, b1, b2], [b2, a, b1], [b1, b2, a]]
}

fn box_blur(pixels: &mut [f32], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let mut tmp = vec![0.0f32; size * size];
    for plane in 0..3 {
        let base = plane * size * size;
        // horizontal
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut n = 0;
                for dx in -r..=r {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= size as isize {
                        continue;
                    }
                    acc += pixels[base + y * size + sx as usize];
                    n += 1;
                }
                tmp[y * size + x] = acc / n as f32;
            }
        }
        // vertical
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut n = 0;
                for dy in -r..=r {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= size as isize {
                        continue;
                    }
                    acc += tmp[sy as usize * size + x];
                    n += 1;
                }
                pixels[base + y * size + x] = acc / n as f32;
            }
        }
    }
}

/// Re-render an image in a synthetic style: hue rotation, box blur,
/// additive noise, then a contrast exponent. Labels are never touched.
pub fn apply_style(image: &Tensor, style: &StyleParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape(format!(
            "apply_style expects [3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    if h != w {
        return Err(Error::InvalidShape(
            "synthetic styling assumes square images".into(),
        ));
    }
    let size = h;
    let mut px = image.to_vec();
    let m = hue_matrix(style.hue_deg);
    for p in 0..size * size {
        let rgb = [px[p], px[size * size + p], px[2 * size * size + p]];
        for (c, row) in m.iter().enumerate() {
            px[c * size * size + p] =
                (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
        }
    }
    box_blur(&mut px, size, style.blur_radius as usize);
    if style.noise_amp > 0.0 {
        for v in px.iter_mut() {
            *v += rng.gen_range(-style.noise_amp..style.noise_amp);
        }
    }
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0).powf(style.contrast_exp);
    }
    Tensor::from_vec(vec![3, size, size], px)
}

/// One sub-domain's generated data.
pub struct DomainSet {
    /// Styled scenes used as the unlabeled target corpus. Labels exist here
    /// (the generator knows them) but the pipeline never reads them.
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub struct SyntheticSets {
    pub source_train: Vec<LabeledImage>,
    pub source_test: Vec<LabeledImage>,
    pub domains: Vec<DomainSet>,
    pub unseen_test: Vec<LabeledImage>,
}

/// Generate every split. Scene sets are disjoint across splits and
/// sub-domains; styling changes pixels only.
pub fn gen_synthetic(
    gen: &GenConfig,
    subdomain_styles: &[StyleParams],
    unseen_style: &StyleParams,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticSets> {
    if image_size < 16 || image_size % 8 != 0 {
        return Err(Error::InvalidDataset(
            "image_size must be >= 16 and a multiple of 8".into(),
        ));
    }
    let plain = |n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledImage> {
        (0..n)
            .map(|_| render_scene_jittered(image_size, gen.object_classes, gen.color_jitter, rng))
            .collect()
    };
    let styled = |n: usize, style: &StyleParams, rng: &mut ChaCha8Rng| -> Result<Vec<LabeledImage>> {
        (0..n)
            .map(|_| {
                let scene =
                    render_scene_jittered(image_size, gen.object_classes, gen.color_jitter, rng);
                Ok(LabeledImage {
                    image: apply_style(&scene.image, style, rng)?,
                    label: scene.label,
                })
            })
            .collect()
    };

    let mut rng = substream(seed, "gen.source");
    let source_train = plain(gen.n_source_train, &mut rng);
    let source_test = plain(gen.n_source_test, &mut rng);

    let mut domains = Vec::with_capacity(subdomain_styles.len());
    for (i, style) in subdomain_styles.iter().enumerate() {
        let mut drng = substream(seed, &format!("gen.domain{i}"));
        let train = styled(gen.n_domain_train, style, &mut drng)?;
        let test = styled(gen.n_domain_test, style, &mut drng)?;
        domains.push(DomainSet { train, test });
    }

    let mut urng = substream(seed, "gen.unseen");
    let unseen_test = styled(gen.n_unseen_test, unseen_style, &mut urng)?;

    Ok(SyntheticSets {
        source_train,
        source_test,
        domains,
        unseen_test,
    })
}
