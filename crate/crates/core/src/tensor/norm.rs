//! Statistic-based primitives: per-channel moments, adaptive instance
//! normalization (plain and batch-permuted), channel softmax, and the
//! cross-entropy losses.

use super::{check_finite, Graph, Tensor};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

fn rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "{what} must be rank 4, got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Mean and sqrt(biased variance + eps) per (batch, channel), plain data
/// helper shared by the ops below.
fn moments(data: &[f32], b: usize, c: usize, hw: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let mut mu = vec![0.0f32; b * c];
    let mut sigma = vec![0.0f32; b * c];
    for i in 0..b * c {
        let s = &data[i * hw..(i + 1) * hw];
        let m = s.iter().sum::<f32>() / hw as f32;
        let var = s.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / hw as f32;
        mu[i] = m;
        sigma[i] = (var + eps).sqrt();
    }
    (mu, sigma)
}

impl Graph {
    /// Per-channel mean and standard deviation over the spatial axes.
    /// `sigma = sqrt(biased variance + eps)`.
    pub fn channel_stats(&mut self, x: &Tensor, eps: f32) -> Result<(Tensor, Tensor)> {
        let [b, c, h, w] = rank4(x, "channel_stats input")?;
        if eps <= 0.0 {
            return Err(Error::InvalidStatistics("eps must be positive".into()));
        }
        let hw = h * w;
        let (mu_data, sigma_data) = moments(&x.data(), b, c, hw, eps);
        check_finite(&mu_data, "channel_stats")?;
        check_finite(&sigma_data, "channel_stats")?;
        let wants = self.wants_grad(&[x]);
        let mu = Tensor::raw(vec![b, c], mu_data.clone(), wants);
        let sigma = Tensor::raw(vec![b, c], sigma_data.clone(), wants);
        if wants {
            let (xc, muc, sigc) = (x.clone(), mu.clone(), sigma.clone());
            self.push(
                vec![x.clone()],
                vec![mu.clone(), sigma.clone()],
                Box::new(move || {
                    let gmu = muc.grad();
                    let gsig = sigc.grad();
                    if gmu.is_none() && gsig.is_none() {
                        return;
                    }
                    let n = hw as f32;
                    let contrib: Vec<f32> = {
                        let xd = xc.data();
                        let mut out = vec![0.0f32; xd.len()];
                        for i in 0..b * c {
                            let gm = gmu.as_ref().map_or(0.0, |g| g[i]);
                            let gs = gsig.as_ref().map_or(0.0, |g| g[i]);
                            let (m, s) = (mu_data[i], sigma_data[i]);
                            for j in 0..hw {
                                let xv = xd[i * hw + j];
                                out[i * hw + j] = gm / n + gs * (xv - m) / (n * s);
                            }
                        }
                        out
                    };
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok((mu, sigma))
    }

    /// Re-normalize `content` so each (batch, channel) slice carries the
    /// requested mean and standard deviation:
    /// `out = style_sigma * (content - mu(content)) / sigma(content) + style_mu`.
    pub fn adain(
        &mut self,
        content: &Tensor,
        style_mu: &Tensor,
        style_sigma: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        let [b, c, h, w] = rank4(content, "adain content")?;
        if style_mu.shape() != vec![b, c] || style_sigma.shape() != vec![b, c] {
            return Err(Error::InvalidShape(format!(
                "adain stats must be [{b}, {c}], got {:?} and {:?}",
                style_mu.shape(),
                style_sigma.shape()
            )));
        }
        if style_sigma.data().iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidStatistics(
                "adain style_sigma must be strictly positive".into(),
            ));
        }
        let hw = h * w;
        let (mu, sigma) = moments(&content.data(), b, c, hw, eps);
        let mut out_data = vec![0.0f32; b * c * hw];
        {
            let xd = content.data();
            let smu = style_mu.data();
            let ssig = style_sigma.data();
            for i in 0..b * c {
                for j in 0..hw {
                    out_data[i * hw + j] =
                        ssig[i] * (xd[i * hw + j] - mu[i]) / sigma[i] + smu[i];
                }
            }
        }
        check_finite(&out_data, "adain")?;
        let out = Tensor::raw(
            vec![b, c, h, w],
            out_data,
            self.wants_grad(&[content, style_mu, style_sigma]),
        );
        if out.requires_grad() {
            let (xc, smuc, ssigc, oc) = (
                content.clone(),
                style_mu.clone(),
                style_sigma.clone(),
                out.clone(),
            );
            self.push(
                vec![content.clone(), style_mu.clone(), style_sigma.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let n = hw as f32;
                    let xd = xc.data();
                    let ssig = ssigc.data();
                    let mut gx = if xc.requires_grad() {
                        Some(vec![0.0f32; xd.len()])
                    } else {
                        None
                    };
                    let mut gsmu = if smuc.requires_grad() {
                        Some(vec![0.0f32; b * c])
                    } else {
                        None
                    };
                    let mut gssig = if ssigc.requires_grad() {
                        Some(vec![0.0f32; b * c])
                    } else {
                        None
                    };
                    for i in 0..b * c {
                        let (m, s) = (mu[i], sigma[i]);
                        let gsum: f32 = g[i * hw..(i + 1) * hw].iter().sum();
                        let gdot: f32 = g[i * hw..(i + 1) * hw]
                            .iter()
                            .zip(&xd[i * hw..(i + 1) * hw])
                            .map(|(gv, xv)| gv * (xv - m))
                            .sum();
                        if let Some(gm) = gsmu.as_mut() {
                            gm[i] = gsum;
                        }
                        if let Some(gs) = gssig.as_mut() {
                            gs[i] = gdot / s;
                        }
                        if let Some(gxv) = gx.as_mut() {
                            let scale = ssig[i] / s;
                            for j in 0..hw {
                                let xv = xd[i * hw + j];
                                gxv[i * hw + j] = scale
                                    * (g[i * hw + j]
                                        - gsum / n
                                        - (xv - m) * gdot / (n * s * s));
                            }
                        }
                    }
                    drop(xd);
                    drop(ssig);
                    if let Some(v) = gx {
                        xc.accumulate_grad(&v);
                    }
                    if let Some(v) = gsmu {
                        smuc.accumulate_grad(&v);
                    }
                    if let Some(v) = gssig {
                        ssigc.accumulate_grad(&v);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Statistic transfer inside a batch: sample `r` takes the channel mean
    /// and deviation of sample `perm[r]`. Samples with `perm[r] == r` pass
    /// through untouched (bit-exact identity).
    pub fn padain_transfer(&mut self, x: &Tensor, perm: &[usize], eps: f32) -> Result<Tensor> {
        let [b, c, h, w] = rank4(x, "padain_transfer input")?;
        if perm.len() != b {
            return Err(Error::InvalidBatch(format!(
                "permutation length {} for batch {b}",
                perm.len()
            )));
        }
        if perm.iter().any(|&p| p >= b) {
            return Err(Error::InvalidBatch("permutation index out of range".into()));
        }
        let hw = h * w;
        let (mu, sigma) = moments(&x.data(), b, c, hw, eps);
        let mut out_data = x.to_vec();
        {
            let xd = x.data();
            for bi in 0..b {
                let d = perm[bi];
                if d == bi {
                    continue;
                }
                for ci in 0..c {
                    let i = bi * c + ci;
                    let id = d * c + ci;
                    for j in 0..hw {
                        out_data[i * hw + j] =
                            sigma[id] * (xd[i * hw + j] - mu[i]) / sigma[i] + mu[id];
                    }
                }
            }
        }
        check_finite(&out_data, "padain_transfer")?;
        let out = Tensor::raw(vec![b, c, h, w], out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            let perm: Vec<usize> = perm.to_vec();
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let n = hw as f32;
                    let contrib: Vec<f32> = {
                        let xd = xc.data();
                        let mut gx = vec![0.0f32; xd.len()];
                        for bi in 0..b {
                            let d = perm[bi];
                            if d == bi {
                                // passthrough row
                                for ci in 0..c {
                                    let i = bi * c + ci;
                                    for j in 0..hw {
                                        gx[i * hw + j] += g[i * hw + j];
                                    }
                                }
                                continue;
                            }
                            for ci in 0..c {
                                let i = bi * c + ci; // receiver slice
                                let id = d * c + ci; // donor slice
                                let (m, s) = (mu[i], sigma[i]);
                                let (md, sd) = (mu[id], sigma[id]);
                                let gsum: f32 = g[i * hw..(i + 1) * hw].iter().sum();
                                let gdot: f32 = g[i * hw..(i + 1) * hw]
                                    .iter()
                                    .zip(&xd[i * hw..(i + 1) * hw])
                                    .map(|(gv, xv)| gv * (xv - m))
                                    .sum();
                                // receiver content path
                                let scale = sd / s;
                                for j in 0..hw {
                                    let xv = xd[i * hw + j];
                                    gx[i * hw + j] += scale
                                        * (g[i * hw + j]
                                            - gsum / n
                                            - (xv - m) * gdot / (n * s * s));
                                }
                                // donor statistics path
                                let gmd = gsum;
                                let gsd = gdot / s;
                                for j in 0..hw {
                                    let xv = xd[id * hw + j];
                                    gx[id * hw + j] +=
                                        gmd / n + gsd * (xv - md) / (n * sd);
                                }
                            }
                        }
                        gx
                    };
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// Softmax across the channel axis, independently per pixel.
    pub fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = rank4(x, "softmax input")?;
        let hw = h * w;
        let mut out_data = vec![0.0f32; b * c * hw];
        {
            let xd = x.data();
            for bi in 0..b {
                for p in 0..hw {
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(xd[(bi * c + ci) * hw + p]);
                    }
                    let mut denom = 0.0f32;
                    for ci in 0..c {
                        let e = (xd[(bi * c + ci) * hw + p] - mx).exp();
                        out_data[(bi * c + ci) * hw + p] = e;
                        denom += e;
                    }
                    for ci in 0..c {
                        out_data[(bi * c + ci) * hw + p] /= denom;
                    }
                }
            }
        }
        check_finite(&out_data, "softmax_channels")?;
        let out = Tensor::raw(vec![b, c, h, w], out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let contrib: Vec<f32> = {
                        let yd = oc.data();
                        let mut gx = vec![0.0f32; yd.len()];
                        for bi in 0..b {
                            for p in 0..hw {
                                let mut dot = 0.0f32;
                                for ci in 0..c {
                                    let idx = (bi * c + ci) * hw + p;
                                    dot += g[idx] * yd[idx];
                                }
                                for ci in 0..c {
                                    let idx = (bi * c + ci) * hw + p;
                                    gx[idx] = yd[idx] * (g[idx] - dot);
                                }
                            }
                        }
                        gx
                    };
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor,
        targets: &[LabelMap],
        ignore_index: Option<u8>,
    ) -> Result<Tensor> {
        let [b, c, h, w] = rank4(logits, "cross-entropy logits")?;
        if targets.len() != b {
            return Err(Error::InvalidShape(format!(
                "cross-entropy got {} label maps for batch {b}",
                targets.len()
            )));
        }
        for t in targets {
            if t.height() != h || t.width() != w {
                return Err(Error::InvalidShape(format!(
                    "label map {}x{} vs logits {h}x{w}",
                    t.height(),
                    t.width()
                )));
            }
        }
        let hw = h * w;
        let mut n_valid = 0usize;
        let mut total = 0.0f64;
        // stash per-pixel probabilities and target ids for the backward pass
        let mut probs = vec![0.0f32; b * c * hw];
        let mut tgt = vec![0i32; b * hw];
        {
            let xd = logits.data();
            for (bi, label_map) in targets.iter().enumerate() {
                for p in 0..hw {
                    let label = label_map.values()[p];
                    if Some(label) == ignore_index {
                        tgt[bi * hw + p] = -1;
                        continue;
                    }
                    if usize::from(label) >= c {
                        return Err(Error::InvalidLabel { label, classes: c });
                    }
                    tgt[bi * hw + p] = i32::from(label);
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(xd[(bi * c + ci) * hw + p]);
                    }
                    let mut denom = 0.0f32;
                    for ci in 0..c {
                        let e = (xd[(bi * c + ci) * hw + p] - mx).exp();
                        probs[(bi * c + ci) * hw + p] = e;
                        denom += e;
                    }
                    for ci in 0..c {
                        probs[(bi * c + ci) * hw + p] /= denom;
                    }
                    let lse = mx + denom.ln();
                    total += f64::from(lse - xd[(bi * c + usize::from(label)) * hw + p]);
                    n_valid += 1;
                }
            }
        }
        if n_valid == 0 {
            return Err(Error::UndefinedMetric(
                "cross-entropy over zero non-ignored pixels".into(),
            ));
        }
        let loss_val = (total / n_valid as f64) as f32;
        check_finite(&[loss_val], "softmax_cross_entropy")?;
        let out = Tensor::raw(vec![1], vec![loss_val], self.wants_grad(&[logits]));
        if out.requires_grad() {
            let (xc, oc) = (logits.clone(), out.clone());
            self.push(
                vec![logits.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let scale = g[0] / n_valid as f32;
                    let mut gx = vec![0.0f32; b * c * hw];
                    for bi in 0..b {
                        for p in 0..hw {
                            let t = tgt[bi * hw + p];
                            if t < 0 {
                                continue;
                            }
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + p;
                                let onehot = if ci == t as usize { 1.0 } else { 0.0 };
                                gx[idx] = scale * (probs[idx] - onehot);
                            }
                        }
                    }
                    xc.accumulate_grad(&gx);
                }),
            );
        }
        Ok(out)
    }

    /// Cross-entropy against constant soft target vectors, averaged over all
    /// pixels: `mean_p [ -sum_c y_c log softmax(z)_c ]`. Targets must be
    /// detached; they receive no gradient.
    pub fn soft_target_cross_entropy(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = rank4(logits, "soft cross-entropy logits")?;
        if targets.shape() != logits.shape() {
            return Err(Error::InvalidShape(format!(
                "soft cross-entropy targets {:?} vs logits {:?}",
                targets.shape(),
                logits.shape()
            )));
        }
        if targets.requires_grad() {
            return Err(Error::ContractViolation(
                "soft cross-entropy targets must be detached".into(),
            ));
        }
        let hw = h * w;
        let n_pix = (b * hw) as f64;
        let mut total = 0.0f64;
        {
            let xd = logits.data();
            let yd = targets.data();
            for bi in 0..b {
                for p in 0..hw {
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(xd[(bi * c + ci) * hw + p]);
                    }
                    let mut denom = 0.0f32;
                    for ci in 0..c {
                        denom += (xd[(bi * c + ci) * hw + p] - mx).exp();
                    }
                    let lse = mx + denom.ln();
                    for ci in 0..c {
                        let idx = (bi * c + ci) * hw + p;
                        total += f64::from(yd[idx]) * f64::from(lse - xd[idx]);
                    }
                }
            }
        }
        let loss_val = (total / n_pix) as f32;
        check_finite(&[loss_val], "soft_target_cross_entropy")?;
        let out = Tensor::raw(vec![1], vec![loss_val], self.wants_grad(&[logits]));
        if out.requires_grad() {
            let (xc, yc, oc) = (logits.clone(), targets.clone(), out.clone());
            self.push(
                vec![logits.clone(), targets.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let scale = g[0] / n_pix as f32;
                    let contrib: Vec<f32> = {
                        let xd = xc.data();
                        let yd = yc.data();
                        let mut gx = vec![0.0f32; xd.len()];
                        for bi in 0..b {
                            for p in 0..hw {
                                let mut mx = f32::NEG_INFINITY;
                                for ci in 0..c {
                                    mx = mx.max(xd[(bi * c + ci) * hw + p]);
                                }
                                let mut denom = 0.0f32;
                                let mut ysum = 0.0f32;
                                for ci in 0..c {
                                    let idx = (bi * c + ci) * hw + p;
                                    denom += (xd[idx] - mx).exp();
                                    ysum += yd[idx];
                                }
                                for ci in 0..c {
                                    let idx = (bi * c + ci) * hw + p;
                                    let prob = (xd[idx] - mx).exp() / denom;
                                    gx[idx] = scale * (prob * ysum - yd[idx]);
                                }
                            }
                        }
                        gx
                    };
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::IGNORE;

    const EPS: f32 = 1e-5;

    #[test]
    fn constant_map_stats() {
        let x = Tensor::full(vec![1, 1, 2, 2], 3.0);
        let mut g = Graph::no_grad();
        let (mu, sigma) = g.channel_stats(&x, EPS).unwrap();
        assert!((mu.item() - 3.0).abs() < 1e-7);
        assert!((sigma.item() - EPS.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn two_point_stats() {
        let x = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut g = Graph::no_grad();
        let (mu, sigma) = g.channel_stats(&x, EPS).unwrap();
        assert!((mu.item() - 2.0).abs() < 1e-7);
        assert!((sigma.item() - (1.0f32 + EPS).sqrt()).abs() < 1e-7);
    }

    #[test]
    fn random_stats_match_two_pass_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(11, "stats-oracle");
        let (b, c, h, w) = (2, 4, 5, 5);
        let data: Vec<f32> = (0..b * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(vec![b, c, h, w], data.clone()).unwrap();
        let mut g = Graph::no_grad();
        let (mu, sigma) = g.channel_stats(&x, EPS).unwrap();
        let (mud, sigd) = (mu.to_vec(), sigma.to_vec());
        for i in 0..b * c {
            let s = &data[i * h * w..(i + 1) * h * w];
            let m: f64 = s.iter().map(|v| f64::from(*v)).sum::<f64>() / (h * w) as f64;
            let var: f64 =
                s.iter().map(|v| (f64::from(*v) - m).powi(2)).sum::<f64>() / (h * w) as f64;
            assert!((f64::from(mud[i]) - m).abs() < 1e-6);
            assert!((f64::from(sigd[i]) - (var + f64::from(EPS)).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn adain_imposes_requested_stats() {
        // content with mean 0 and unit variance: alternating +-1
        let data: Vec<f32> = (0..2 * 3 * 4 * 4)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::from_vec(vec![2, 3, 4, 4], data).unwrap();
        let smu = Tensor::full(vec![2, 3], 5.0);
        let ssig = Tensor::full(vec![2, 3], 2.0);
        let mut g = Graph::no_grad();
        let y = g.adain(&x, &smu, &ssig, EPS).unwrap();
        let (mu, sigma) = g.channel_stats(&y, EPS).unwrap();
        for v in mu.to_vec() {
            assert!((v - 5.0).abs() < 1e-5);
        }
        for v in sigma.to_vec() {
            assert!((v - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_with_own_stats_is_near_identity() {
        use rand::Rng;
        let mut rng = crate::rng::substream(6, "adain-self");
        let data: Vec<f32> = (0..1 * 2 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(vec![1, 2, 4, 4], data.clone()).unwrap();
        let mut g = Graph::no_grad();
        let (mu, sigma) = g.channel_stats(&x, EPS).unwrap();
        let y = g.adain(&x, &mu, &sigma, EPS).unwrap();
        for (a, b) in y.to_vec().iter().zip(data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_matches_scalar_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(7, "adain-oracle");
        let (b, c, h, w) = (1, 3, 4, 4);
        let data: Vec<f32> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smu_v: Vec<f32> = (0..b * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ssig_v: Vec<f32> = (0..b * c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let x = Tensor::from_vec(vec![b, c, h, w], data.clone()).unwrap();
        let smu = Tensor::from_vec(vec![b, c], smu_v.clone()).unwrap();
        let ssig = Tensor::from_vec(vec![b, c], ssig_v.clone()).unwrap();
        let mut g = Graph::no_grad();
        let y = g.adain(&x, &smu, &ssig, EPS).unwrap();
        let yd = y.to_vec();
        for i in 0..b * c {
            let s = &data[i * h * w..(i + 1) * h * w];
            let m: f32 = s.iter().sum::<f32>() / (h * w) as f32;
            let var: f32 = s.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / (h * w) as f32;
            let sd = (var + EPS).sqrt();
            for j in 0..h * w {
                let expect = ssig_v[i] * (s[j] - m) / sd + smu_v[i];
                assert!((yd[i * h * w + j] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adain_rejects_non_positive_sigma() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        let smu = Tensor::zeros(vec![1, 1]);
        let ssig = Tensor::zeros(vec![1, 1]);
        let mut g = Graph::no_grad();
        assert_eq!(
            g.adain(&x, &smu, &ssig, EPS).unwrap_err().category(),
            "invalid-statistics"
        );
    }

    #[test]
    fn padain_self_permutation_is_bit_exact_identity() {
        use rand::Rng;
        let mut rng = crate::rng::substream(8, "padain-self");
        let data: Vec<f32> = (0..2 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![2, 2, 3, 3], data.clone()).unwrap();
        let mut g = Graph::no_grad();
        let y = g.padain_transfer(&x, &[0, 1], EPS).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn padain_receiver_takes_donor_stats() {
        use rand::Rng;
        let mut rng = crate::rng::substream(9, "padain-swap");
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let x = Tensor::from_vec(vec![2, 3, 4, 4], data).unwrap();
        let mut g = Graph::no_grad();
        let (mu_in, sig_in) = g.channel_stats(&x, EPS).unwrap();
        let y = g.padain_transfer(&x, &[1, 1], EPS).unwrap();
        let (mu_out, sig_out) = g.channel_stats(&y, EPS).unwrap();
        // receiver row 0 now carries row 1 statistics
        for ci in 0..3 {
            assert!((mu_out.to_vec()[ci] - mu_in.to_vec()[3 + ci]).abs() < 1e-4);
            assert!((sig_out.to_vec()[ci] - sig_in.to_vec()[3 + ci]).abs() < 1e-4);
        }
        // donor row 1 untouched
        assert_eq!(y.to_vec()[48..], x.to_vec()[48..]);
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let x = Tensor::from_vec(vec![1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let mut g = Graph::no_grad();
        let y = g.softmax_channels(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance() {
        use rand::Rng;
        let mut rng = crate::rng::substream(10, "softmax-shift");
        let data: Vec<f32> = (0..1 * 4 * 2 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let shifted: Vec<f32> = data.iter().map(|v| v + 3.5).collect();
        let a = Tensor::from_vec(vec![1, 4, 2, 2], data).unwrap();
        let b = Tensor::from_vec(vec![1, 4, 2, 2], shifted).unwrap();
        let mut g = Graph::no_grad();
        let ya = g.softmax_channels(&a).unwrap();
        let yb = g.softmax_channels(&b).unwrap();
        for (u, v) in ya.to_vec().iter().zip(yb.to_vec().iter()) {
            assert!((u - v).abs() < 1e-5);
        }
        // sums to one per pixel
        let yv = ya.to_vec();
        for p in 0..4 {
            let s: f32 = (0..4).map(|ci| yv[ci * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(vec![1, 4, 2, 2]);
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let mut g = Graph::no_grad();
        let loss = g.softmax_cross_entropy(&logits, &[labels], None).unwrap();
        assert!((loss.item() - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let mut data = vec![0.0f32; 3 * 4];
        for p in 0..4 {
            data[p] = 20.0; // channel 0 spiked at every pixel
        }
        let logits = Tensor::from_vec(vec![1, 3, 2, 2], data).unwrap();
        let labels = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        let mut g = Graph::no_grad();
        let loss = g.softmax_cross_entropy(&logits, &[labels], None).unwrap();
        assert!(loss.item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(12, "ce-oracle");
        let (c, h, w) = (3, 2, 2);
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
        let logits = Tensor::from_vec(vec![1, c, h, w], data.clone()).unwrap();
        let lm = LabelMap::new(h, w, labels.clone()).unwrap();
        let mut g = Graph::no_grad();
        let loss = g.softmax_cross_entropy(&logits, &[lm], None).unwrap();
        let mut expect = 0.0f64;
        for p in 0..h * w {
            let z: Vec<f64> = (0..c).map(|ci| f64::from(data[ci * h * w + p])).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            expect += lse - z[usize::from(labels[p])];
        }
        expect /= (h * w) as f64;
        assert!((f64::from(loss.item()) - expect).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(vec![1, 3, 1, 1]);
        let labels = LabelMap::new(1, 1, vec![7]).unwrap();
        let mut g = Graph::no_grad();
        assert_eq!(
            g.softmax_cross_entropy(&logits, &[labels], None)
                .unwrap_err()
                .category(),
            "invalid-label"
        );
    }

    #[test]
    fn ignored_pixels_are_excluded() {
        let mut data = vec![0.0f32; 2 * 4];
        data[0] = 20.0; // pixel 0: certain class 0
        let logits = Tensor::from_vec(vec![1, 2, 2, 2], data).unwrap();
        let labels = LabelMap::new(2, 2, vec![0, IGNORE, IGNORE, IGNORE]).unwrap();
        let mut g = Graph::no_grad();
        let loss = g
            .softmax_cross_entropy(&logits, &[labels], Some(IGNORE))
            .unwrap();
        assert!(loss.item().abs() < 1e-6);
    }

    #[test]
    fn all_ignored_pixels_is_an_error() {
        let logits = Tensor::zeros(vec![1, 2, 1, 2]);
        let labels = LabelMap::new(1, 2, vec![IGNORE, IGNORE]).unwrap();
        let mut g = Graph::no_grad();
        assert_eq!(
            g.softmax_cross_entropy(&logits, &[labels], Some(IGNORE))
                .unwrap_err()
                .category(),
            "undefined-metric"
        );
    }

    #[test]
    fn soft_target_uniform_matches_ln_k() {
        // uniform logits over 8 channels with one-hot targets
        let logits = Tensor::zeros(vec![1, 8, 1, 2]);
        let mut y = vec![0.0f32; 8 * 2];
        y[0] = 1.0; // pixel 0 -> channel 0
        y[2 * 1 + 1] = 1.0; // pixel 1 -> channel 1
        let targets = Tensor::from_vec(vec![1, 8, 1, 2], y).unwrap();
        let mut g = Graph::no_grad();
        let loss = g.soft_target_cross_entropy(&logits, &targets).unwrap();
        assert!((loss.item() - 8.0f32.ln()).abs() < 1e-6);
    }
}
