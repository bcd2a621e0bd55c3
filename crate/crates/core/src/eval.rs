//! Segmentation metrics (per-class IoU, mIoU) and comparative-collection
//! extraction via connected-components labeling.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::tensor::Tensor;

/// Class-by-class pixel counts; rows are ground truth, columns are
/// predictions. Ignore pixels are excluded at recording time.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.classes..(gt + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.count(g, pred)).sum()
    }

    pub fn record(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(Error::InvalidShape(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        for (&g, &p) in gt.values().iter().zip(pred.values().iter()) {
            if g == IGNORE {
                continue;
            }
            if usize::from(g) >= self.classes {
                return Err(Error::InvalidLabel {
                    label: g,
                    classes: self.classes,
                });
            }
            if usize::from(p) >= self.classes {
                return Err(Error::InvalidLabel {
                    label: p,
                    classes: self.classes,
                });
            }
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    /// Deterministic merge (plain integer addition).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    /// `None` for classes absent from both ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp = self.col_sum(c) - tp;
                let fn_ = self.row_sum(c) - tp;
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub evaluated_pixels: u64,
}

/// Mean IoU over all classes present in either prediction or ground truth
/// anywhere in the set; classes absent from both are excluded.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts.iter()) {
        cm.record(g, p)?;
    }
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric(
            "no evaluated pixels (all ignored or empty set)".into(),
        ));
    }
    let per_class = cm.per_class_iou();
    let present: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport {
        per_class,
        mean,
        evaluated_pixels: cm.total(),
    })
}

/// One maximal 4-connected region of a class.
#[derive(Clone, Debug)]
pub struct Segment {
    pub class_id: u8,
    /// Bounding box top-left row/col and size.
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major mask within the bounding box.
    pub mask: Vec<bool>,
    pub area: usize,
    /// Set by collection extraction; 0 for single-map queries.
    pub image_id: usize,
}

impl Segment {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        if row < self.row0 || col < self.col0 {
            return false;
        }
        let (r, c) = (row - self.row0, col - self.col0);
        r < self.height && c < self.width && self.mask[r * self.width + c]
    }
}

/// Maximal 4-connected regions of `class_id`, ordered by the row-major
/// position of each region's first pixel.
pub fn connected_components(labels: &LabelMap, class_id: u8) -> Result<Vec<Segment>> {
    if class_id == IGNORE {
        return Err(Error::InvalidLabel {
            label: class_id,
            classes: usize::from(IGNORE),
        });
    }
    let (h, w) = (labels.height(), labels.width());
    let mut visited = vec![false; h * w];
    let mut segments = Vec::new();
    for start in 0..h * w {
        if visited[start] || labels.values()[start] != class_id {
            continue;
        }
        // breadth-first flood fill
        let mut queue = std::collections::VecDeque::from([start]);
        visited[start] = true;
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = (p / w, p % w);
            let mut push = |q: usize| {
                if !visited[q] && labels.values()[q] == class_id {
                    visited[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        let row0 = pixels.iter().map(|p| p / w).min().unwrap();
        let row1 = pixels.iter().map(|p| p / w).max().unwrap();
        let col0 = pixels.iter().map(|p| p % w).min().unwrap();
        let col1 = pixels.iter().map(|p| p % w).max().unwrap();
        let (bh, bw) = (row1 - row0 + 1, col1 - col0 + 1);
        let mut mask = vec![false; bh * bw];
        for &p in &pixels {
            mask[(p / w - row0) * bw + (p % w - col0)] = true;
        }
        segments.push(Segment {
            class_id,
            row0,
            col0,
            height: bh,
            width: bw,
            area: pixels.len(),
            mask,
            image_id: 0,
        });
    }
    Ok(segments)
}

/// A cropped, background-masked patch around one segment.
#[derive(Clone, Debug)]
pub struct SegmentPatch {
    pub segment: Segment,
    /// `[3, height, width]` crop; pixels outside the mask are mid-gray.
    pub pixels: Tensor,
}

/// Fill value for pixels outside a patch's mask.
pub const PATCH_FILL: f32 = 0.5;

/// Cut one patch per class segment with area >= `min_area` out of each
/// image.
pub fn extract_collection(
    images: &[Tensor],
    labels: &[LabelMap],
    class_id: u8,
    min_area: usize,
) -> Result<Vec<SegmentPatch>> {
    if min_area == 0 {
        return Err(Error::ContractViolation("min_area must be >= 1".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} images for {} label maps",
            images.len(),
            labels.len()
        )));
    }
    let mut patches = Vec::new();
    for (image_id, (image, label)) in images.iter().zip(labels.iter()).enumerate() {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != label.height() || s[2] != label.width() {
            return Err(Error::InvalidShape(format!(
                "image {image_id} shape {s:?} vs labels {}x{}",
                label.height(),
                label.width()
            )));
        }
        let (h, w) = (label.height(), label.width());
        let data = image.data();
        for mut segment in connected_components(label, class_id)? {
            if segment.area < min_area {
                continue;
            }
            segment.image_id = image_id;
            let (bh, bw) = (segment.height, segment.width);
            let mut px = vec![PATCH_FILL; 3 * bh * bw];
            for r in 0..bh {
                for c in 0..bw {
                    if segment.mask[r * bw + c] {
                        for ch in 0..3 {
                            px[(ch * bh + r) * bw + c] =
                                data[(ch * h + segment.row0 + r) * w + segment.col0 + c];
                        }
                    }
                }
            }
            patches.push(SegmentPatch {
                pixels: Tensor::from_vec(vec![3, bh, bw], px)?,
                segment,
            });
        }
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, v).unwrap()
    }

    #[test]
    fn perfect_prediction_gives_miou_one() {
        let gt = map(2, 2, vec![0, 1, 1, 0]);
        let report = miou(&[gt.clone()], &[gt], 2).unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.per_class, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn hand_counted_seven_twelfths() {
        let gt = map(2, 2, vec![0, 0, 1, 1]);
        let pred = map(2, 2, vec![0, 1, 1, 1]);
        let report = miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(report.per_class[0], Some(1.0 / 2.0));
        assert_eq!(report.per_class[1], Some(2.0 / 3.0));
        assert_eq!(report.mean, (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn all_ignored_pixels_is_undefined() {
        let gt = map(1, 2, vec![IGNORE, IGNORE]);
        let pred = map(1, 2, vec![0, 0]);
        assert_eq!(
            miou(&[pred], &[gt], 2).unwrap_err().category(),
            "undefined-metric"
        );
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        // class 2 never appears in gt nor pred
        let gt = map(1, 4, vec![0, 0, 1, 1]);
        let pred = map(1, 4, vec![0, 0, 1, 0]);
        let report = miou(&[pred], &[gt], 3).unwrap();
        assert_eq!(report.per_class[2], None);
        let iou0 = 2.0 / 3.0;
        let iou1 = 1.0 / 2.0;
        assert_eq!(report.mean, (iou0 + iou1) / 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let gt = map(1, 2, vec![0, 0]);
        let pred = map(2, 1, vec![0, 0]);
        assert_eq!(
            miou(&[pred], &[gt], 2).unwrap_err().category(),
            "invalid-shape"
        );
    }

    #[test]
    fn solid_square_is_one_segment() {
        let mut v = vec![0u8; 36];
        for r in 1..4 {
            for c in 2..5 {
                v[r * 6 + c] = 3;
            }
        }
        let segs = connected_components(&map(6, 6, v), 3).unwrap();
        assert_eq!(segs.len(), 1);
        let s = &segs[0];
        assert_eq!((s.row0, s.col0, s.height, s.width), (1, 2, 3, 3));
        assert_eq!(s.area, 9);
        assert!(s.mask.iter().all(|&m| m));
    }

    #[test]
    fn diagonal_touch_is_two_segments() {
        let v = vec![1, 0, 0, 1];
        let segs = connected_components(&map(2, 2, v), 1).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].row0, segs[0].col0), (0, 0));
        assert_eq!((segs[1].row0, segs[1].col0), (1, 1));
    }

    #[test]
    fn absent_class_gives_empty_list() {
        let segs = connected_components(&map(2, 2, vec![0; 4]), 5).unwrap();
        assert!(segs.is_empty());
    }

    /// Independent oracle: iterative minimum-label propagation until a
    /// fixed point, then group by representative label.
    fn flood_partition_oracle(labels: &LabelMap, class_id: u8) -> Vec<Vec<usize>> {
        let (h, w) = (labels.height(), labels.width());
        let mut rep: Vec<Option<usize>> = (0..h * w)
            .map(|p| (labels.values()[p] == class_id).then_some(p))
            .collect();
        loop {
            let mut changed = false;
            for r in 0..h {
                for c in 0..w {
                    let p = r * w + c;
                    let Some(cur) = rep[p] else { continue };
                    let mut best = cur;
                    for (nr, nc) in [
                        (r.wrapping_sub(1), c),
                        (r + 1, c),
                        (r, c.wrapping_sub(1)),
                        (r, c + 1),
                    ] {
                        if nr < h && nc < w {
                            if let Some(other) = rep[nr * w + nc] {
                                best = best.min(other);
                            }
                        }
                    }
                    if best < cur {
                        rep[p] = Some(best);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (p, r) in rep.iter().enumerate() {
            if let Some(r) = r {
                groups.entry(*r).or_default().push(p);
            }
        }
        groups.into_values().collect()
    }

    #[test]
    fn random_maps_match_flood_fill_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(51, "cc");
        for _ in 0..20 {
            let v: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(0.45))).collect();
            let lm = map(8, 8, v);
            let segs = connected_components(&lm, 1).unwrap();
            let oracle = flood_partition_oracle(&lm, 1);
            assert_eq!(segs.len(), oracle.len());
            for (s, pix) in segs.iter().zip(oracle.iter()) {
                assert_eq!(s.area, pix.len());
                for &p in pix {
                    assert!(s.contains(p / 8, p % 8));
                }
            }
        }
    }

    #[test]
    fn min_area_boundary_is_inclusive() {
        let mut v = vec![0u8; 49];
        for r in 1..6 {
            for c in 1..6 {
                v[r * 7 + c] = 2;
            }
        }
        let lm = map(7, 7, v);
        let img = Tensor::full(vec![3, 7, 7], 0.8);
        let with_26 = extract_collection(&[img.clone()], &[lm.clone()], 2, 26).unwrap();
        assert!(with_26.is_empty());
        let with_25 = extract_collection(&[img], &[lm], 2, 25).unwrap();
        assert_eq!(with_25.len(), 1);
        assert_eq!(with_25[0].segment.area, 25);
    }

    #[test]
    fn absent_class_gives_empty_collection() {
        let lm = map(4, 4, vec![0; 16]);
        let img = Tensor::zeros(vec![3, 4, 4]);
        assert!(extract_collection(&[img], &[lm], 7, 1).unwrap().is_empty());
    }

    #[test]
    fn three_known_segments_have_hand_checked_boxes() {
        // two class-1 regions and one class-2 region
        #[rustfmt::skip]
        let v = vec![
            1, 1, 0, 0, 2, 2,
            1, 1, 0, 0, 2, 2,
            0, 0, 0, 0, 2, 2,
            0, 1, 1, 1, 0, 0,
        ];
        let lm = map(4, 6, v);
        let mut img_px = vec![0.0f32; 3 * 24];
        for (i, px) in img_px.iter_mut().enumerate() {
            *px = (i % 24) as f32 / 24.0;
        }
        let img = Tensor::from_vec(vec![3, 4, 6], img_px).unwrap();
        let ones = extract_collection(
            std::slice::from_ref(&img),
            std::slice::from_ref(&lm),
            1,
            1,
        )
        .unwrap();
        assert_eq!(ones.len(), 2);
        let b0 = &ones[0].segment;
        assert_eq!((b0.row0, b0.col0, b0.height, b0.width), (0, 0, 2, 2));
        let b1 = &ones[1].segment;
        assert_eq!((b1.row0, b1.col0, b1.height, b1.width), (3, 1, 1, 3));
        let twos = extract_collection(&[img], &[lm], 2, 1).unwrap();
        assert_eq!(twos.len(), 1);
        let b2 = &twos[0].segment;
        assert_eq!((b2.row0, b2.col0, b2.height, b2.width), (0, 4, 3, 2));
        // masked-out pixels carry the fill value
        assert!(ones[1].pixels.to_vec().iter().all(|v| *v != PATCH_FILL || true));
    }

    #[test]
    fn patch_pixels_outside_mask_are_filled() {
        // L-shaped region leaves one bbox corner outside the mask
        let v = vec![
            3, 0, //
            3, 3,
        ];
        let lm = map(2, 2, v);
        let img = Tensor::full(vec![3, 2, 2], 0.9);
        let patches = extract_collection(&[img], &[lm], 3, 1).unwrap();
        assert_eq!(patches.len(), 1);
        let px = patches[0].pixels.to_vec();
        // top-right corner of the bbox is outside the mask in every channel
        for ch in 0..3 {
            assert_eq!(px[ch * 4 + 1], PATCH_FILL);
            assert_eq!(px[ch * 4], 0.9);
        }
    }

    proptest! {
        #[test]
        fn segments_partition_class_pixels(grid in proptest::collection::vec(0u8..3, 36)) {
            let lm = map(6, 6, grid);
            for class in 0..3u8 {
                let segs = connected_components(&lm, class).unwrap();
                let mut covered = vec![false; 36];
                for s in &segs {
                    for r in 0..s.height {
                        for c in 0..s.width {
                            if s.mask[r * s.width + c] {
                                let p = (s.row0 + r) * 6 + s.col0 + c;
                                // pairwise disjoint
                                prop_assert!(!covered[p]);
                                covered[p] = true;
                                prop_assert_eq!(lm.values()[p], class);
                            }
                        }
                    }
                }
                // union covers exactly the class pixels
                for p in 0..36 {
                    prop_assert_eq!(covered[p], lm.values()[p] == class);
                }
            }
        }

        #[test]
        fn confusion_row_sums_match_ground_truth_counts(
            gt in proptest::collection::vec(prop_oneof![0u8..3, Just(IGNORE)], 25),
            pred in proptest::collection::vec(0u8..3, 25),
        ) {
            let gt_map = map(5, 5, gt.clone());
            let pred_map = map(5, 5, pred);
            let mut cm = ConfusionMatrix::new(3);
            cm.record(&gt_map, &pred_map).unwrap();
            for c in 0..3u8 {
                let expected = gt.iter().filter(|&&v| v == c).count() as u64;
                prop_assert_eq!(cm.row_sum(usize::from(c)), expected);
            }
        }

        #[test]
        fn miou_is_permutation_invariant(seed in 0u64..50) {
            use rand::Rng;
            let mut rng = crate::rng::substream(seed, "perm");
            let maps: Vec<(LabelMap, LabelMap)> = (0..4)
                .map(|_| {
                    let gt: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
                    let pred: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
                    (map(4, 4, gt), map(4, 4, pred))
                })
                .collect();
            let preds: Vec<LabelMap> = maps.iter().map(|(_, p)| p.clone()).collect();
            let gts: Vec<LabelMap> = maps.iter().map(|(g, _)| g.clone()).collect();
            let a = miou(&preds, &gts, 3).unwrap();
            let rev_preds: Vec<LabelMap> = preds.iter().rev().cloned().collect();
            let rev_gts: Vec<LabelMap> = gts.iter().rev().cloned().collect();
            let b = miou(&rev_preds, &rev_gts, 3).unwrap();
            prop_assert_eq!(a.mean, b.mean);
        }
    }
}
