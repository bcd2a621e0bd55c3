//! Spatial primitives: 2-D convolution, 2x2 max-pooling, nearest-neighbor
//! upsampling. The convolution copies into a zero-padded buffer once and
//! runs contiguous row kernels, which the compiler vectorizes.

use super::{check_finite, Graph, Tensor};
use crate::error::{Error, Result};

fn rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "{what} must be rank 4, got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Copy `[B,C,H,W]` data into a `[B,C,H+2p,W+2p]` zero-padded buffer.
fn pad_input(data: &[f32], b: usize, c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return data.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; b * c * hp * wp];
    for bc in 0..b * c {
        for y in 0..h {
            let src = bc * h * w + y * w;
            let dst = bc * hp * wp + (y + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }
}

fn conv_forward(input_padded: &[f32], kernel: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let (hp, wp) = d.padded();
    let mut out = vec![0.0f32; d.b * d.cout * d.ho * d.wo];
    for bi in 0..d.b {
        for co in 0..d.cout {
            let obase = (bi * d.cout + co) * d.ho * d.wo;
            out[obase..obase + d.ho * d.wo].fill(bias[co]);
            for ci in 0..d.cin {
                let ibase = (bi * d.cin + ci) * hp * wp;
                let kbase = (co * d.cin + ci) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let kval = kernel[kbase + ky * d.k + kx];
                        if kval == 0.0 {
                            continue;
                        }
                        for oy in 0..d.ho {
                            let irow = ibase + (oy * d.stride + ky) * wp + kx;
                            let orow = obase + oy * d.wo;
                            if d.stride == 1 {
                                let src = &input_padded[irow..irow + d.wo];
                                let dst = &mut out[orow..orow + d.wo];
                                for (o, s) in dst.iter_mut().zip(src.iter()) {
                                    *o += kval * s;
                                }
                            } else {
                                for ox in 0..d.wo {
                                    out[orow + ox] +=
                                        kval * input_padded[irow + ox * d.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Graph {
    /// Zero-padded cross-correlation of `input [B,Cin,H,W]` with
    /// `kernel [Cout,Cin,k,k]` plus `bias [Cout]`.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let [b, cin, h, w] = rank4(input, "conv2d input")?;
        let [cout, kcin, kh, kw] = rank4(kernel, "conv2d kernel")?;
        if kh != kw {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be square, got {kh}x{kw}"
            )));
        }
        let k = kh;
        if kcin != cin {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if bias.shape() != vec![cout] {
            return Err(Error::InvalidShape(format!(
                "conv2d bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d stride must be positive".into()));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let dims = ConvDims {
            b,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let padded = pad_input(&input.data(), b, cin, h, w, pad);
        let out_data = conv_forward(&padded, &kernel.data(), &bias.data(), &dims);
        check_finite(&out_data, "conv2d")?;
        let out = Tensor::raw(
            vec![b, cout, dims.ho, dims.wo],
            out_data,
            self.wants_grad(&[input, kernel, bias]),
        );
        if out.requires_grad() {
            let (ic, kc, bc, oc) = (input.clone(), kernel.clone(), bias.clone(), out.clone());
            self.push(
                vec![input.clone(), kernel.clone(), bias.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let d = ConvDims {
                        b,
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        stride,
                        pad,
                        ho: (h + 2 * pad - k) / stride + 1,
                        wo: (w + 2 * pad - k) / stride + 1,
                    };
                    let (hp, wp) = d.padded();
                    let kd = kc.data();
                    let padded = pad_input(&ic.data(), b, cin, h, w, pad);

                    if bc.requires_grad() {
                        let mut gbias = vec![0.0f32; cout];
                        for bi in 0..b {
                            for co in 0..cout {
                                let obase = (bi * cout + co) * d.ho * d.wo;
                                gbias[co] += g[obase..obase + d.ho * d.wo].iter().sum::<f32>();
                            }
                        }
                        bc.accumulate_grad(&gbias);
                    }

                    if kc.requires_grad() {
                        let mut gker = vec![0.0f32; cout * cin * k * k];
                        for bi in 0..b {
                            for co in 0..cout {
                                let obase = (bi * cout + co) * d.ho * d.wo;
                                for ci in 0..cin {
                                    let ibase = (bi * cin + ci) * hp * wp;
                                    let kbase = (co * cin + ci) * k * k;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let mut acc = 0.0f32;
                                            for oy in 0..d.ho {
                                                let irow =
                                                    ibase + (oy * stride + ky) * wp + kx;
                                                let orow = obase + oy * d.wo;
                                                if stride == 1 {
                                                    let src =
                                                        &padded[irow..irow + d.wo];
                                                    let gr = &g[orow..orow + d.wo];
                                                    acc += src
                                                        .iter()
                                                        .zip(gr.iter())
                                                        .map(|(a, b)| a * b)
                                                        .sum::<f32>();
                                                } else {
                                                    for ox in 0..d.wo {
                                                        acc += padded
                                                            [irow + ox * stride]
                                                            * g[orow + ox];
                                                    }
                                                }
                                            }
                                            gker[kbase + ky * k + kx] += acc;
                                        }
                                    }
                                }
                            }
                        }
                        kc.accumulate_grad(&gker);
                    }

                    if ic.requires_grad() {
                        // scatter into a padded gradient buffer, then crop
                        let mut gin_p = vec![0.0f32; b * cin * hp * wp];
                        for bi in 0..b {
                            for co in 0..cout {
                                let obase = (bi * cout + co) * d.ho * d.wo;
                                for ci in 0..cin {
                                    let ibase = (bi * cin + ci) * hp * wp;
                                    let kbase = (co * cin + ci) * k * k;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let kval = kd[kbase + ky * k + kx];
                                            if kval == 0.0 {
                                                continue;
                                            }
                                            for oy in 0..d.ho {
                                                let irow =
                                                    ibase + (oy * stride + ky) * wp + kx;
                                                let orow = obase + oy * d.wo;
                                                if stride == 1 {
                                                    let dst = &mut gin_p
                                                        [irow..irow + d.wo];
                                                    let gr = &g[orow..orow + d.wo];
                                                    for (di, gi) in
                                                        dst.iter_mut().zip(gr.iter())
                                                    {
                                                        *di += kval * gi;
                                                    }
                                                } else {
                                                    for ox in 0..d.wo {
                                                        gin_p[irow + ox * stride] +=
                                                            kval * g[orow + ox];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        let mut gin = vec![0.0f32; b * cin * h * w];
                        if pad == 0 {
                            gin.copy_from_slice(&gin_p);
                        } else {
                            for bc_idx in 0..b * cin {
                                for y in 0..h {
                                    let src = bc_idx * hp * wp + (y + pad) * wp + pad;
                                    let dst = bc_idx * h * w + y * w;
                                    gin[dst..dst + w]
                                        .copy_from_slice(&gin_p[src..src + w]);
                                }
                            }
                        }
                        ic.accumulate_grad(&gin);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// The gradient routes to the argmax position, ties going to the first
    /// element in row-major scan order.
    pub fn maxpool2x2(&mut self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = rank4(x, "maxpool2x2 input")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidShape(format!(
                "maxpool2x2 input {h}x{w} too small"
            )));
        }
        let mut out_data = vec![0.0f32; b * c * ho * wo];
        let mut argmax = vec![0u32; b * c * ho * wo];
        {
            let xd = x.data();
            for bc_idx in 0..b * c {
                let ibase = bc_idx * h * w;
                let obase = bc_idx * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ibase + (oy * 2 + dy) * w + ox * 2 + dx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out_data[obase + oy * wo + ox] = best;
                        argmax[obase + oy * wo + ox] = best_idx as u32;
                    }
                }
            }
        }
        let out = Tensor::raw(vec![b, c, ho, wo], out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            let n = x.numel();
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let mut contrib = vec![0.0f32; n];
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        contrib[src as usize] += gi;
                    }
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// Nearest-neighbor upsampling by a factor of 2 in both spatial axes.
    pub fn upsample_nearest2x(&mut self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = rank4(x, "upsample input")?;
        let (ho, wo) = (h * 2, w * 2);
        let mut out_data = vec![0.0f32; b * c * ho * wo];
        {
            let xd = x.data();
            for bc_idx in 0..b * c {
                let ibase = bc_idx * h * w;
                let obase = bc_idx * ho * wo;
                for y in 0..h {
                    for xcol in 0..w {
                        let v = xd[ibase + y * w + xcol];
                        let o = obase + (y * 2) * wo + xcol * 2;
                        out_data[o] = v;
                        out_data[o + 1] = v;
                        out_data[o + wo] = v;
                        out_data[o + wo + 1] = v;
                    }
                }
            }
        }
        let out = Tensor::raw(vec![b, c, ho, wo], out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let mut contrib = vec![0.0f32; b * c * h * w];
                    for bc_idx in 0..b * c {
                        let ibase = bc_idx * h * w;
                        let obase = bc_idx * ho * wo;
                        for y in 0..h {
                            for xcol in 0..w {
                                let o = obase + (y * 2) * wo + xcol * 2;
                                contrib[ibase + y * w + xcol] =
                                    g[o] + g[o + 1] + g[o + wo] + g[o + wo + 1];
                            }
                        }
                    }
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

    /// Brute-force convolution used as the independent oracle.
    pub(crate) fn conv_oracle(
        input: &[f32],
        ishape: [usize; 4],
        kernel: &[f32],
        kshape: [usize; 4],
        bias: &[f32],
        stride: usize,
        pad: usize,
    ) -> (Vec<f32>, [usize; 4]) {
        let [b, cin, h, w] = ishape;
        let [cout, _, k, _] = kshape;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f32; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = input
                                        [((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = kernel[((co * cin + ci) * k + ky) * k + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, [b, cout, ho, wo])
    }

    #[test]
    fn identity_kernel_doubles_ones() {
        let input = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let kernel = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let bias = Tensor::zeros(vec![1]);
        let mut g = Graph::no_grad();
        let out = g.conv2d(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 3, 3]);
        assert_eq!(out.to_vec(), vec![2.0; 9]);
    }

    #[test]
    fn full_window_sum() {
        let input = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let bias = Tensor::zeros(vec![1]);
        let mut g = Graph::no_grad();
        let out = g.conv2d(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 1, 1]);
        assert_eq!(out.to_vec(), vec![10.0]);
    }

    #[test]
    fn random_conv_matches_loop_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(3, "conv-oracle");
        for (stride, pad) in [(1usize, 1usize), (1, 0), (2, 1), (2, 0)] {
            let ishape = [2usize, 3, 8, 8];
            let kshape = [4usize, 3, 3, 3];
            let input: Vec<f32> = (0..ishape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let kernel: Vec<f32> = (0..kshape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let bias: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (expect, oshape) = conv_oracle(&input, ishape, &kernel, kshape, &bias, stride, pad);

            let it = Tensor::from_vec(ishape.to_vec(), input).unwrap();
            let kt = Tensor::from_vec(kshape.to_vec(), kernel).unwrap();
            let bt = Tensor::from_vec(vec![4], bias).unwrap();
            let mut g = Graph::no_grad();
            let out = g.conv2d(&it, &kt, &bt, stride, pad).unwrap();
            assert_eq!(out.shape(), oshape.to_vec());
            for (a, e) in out.to_vec().iter().zip(expect.iter()) {
                assert!((a - e).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_takes_max_and_routes_gradient() {
        let x = Tensor::param(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let y = g.maxpool2x2(&x).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_gradient_follows_max_position_everywhere() {
        // All four positions of the 2x2 window, exhaustively.
        for pos in 0..4 {
            let mut vals = vec![0.0f32; 4];
            vals[pos] = 5.0;
            let x = Tensor::param(vec![1, 1, 2, 2], vals).unwrap();
            let mut g = Graph::new();
            let y = g.maxpool2x2(&x).unwrap();
            let loss = g.sum_all(&y).unwrap();
            g.backward(&loss).unwrap();
            let grad = x.grad().unwrap();
            for (i, v) in grad.iter().enumerate() {
                assert_eq!(*v, if i == pos { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan_order() {
        let x = Tensor::param(vec![1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let y = g.maxpool2x2(&x).unwrap();
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_doubles_each_axis() {
        let x = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::no_grad();
        let y = g.upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 4]);
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let input = Tensor::zeros(vec![1, 1, 2, 2]);
        let kernel = Tensor::zeros(vec![1, 1, 5, 5]);
        let bias = Tensor::zeros(vec![1]);
        let mut g = Graph::no_grad();
        assert_eq!(
            g.conv2d(&input, &kernel, &bias, 1, 1)
                .unwrap_err()
                .category(),
            "invalid-shape"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::substream(99, "conv-fd");
        let ishape = vec![1usize, 2, 5, 5];
        let kshape = vec![3usize, 2, 3, 3];
        let idata: Vec<f32> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kdata: Vec<f32> = (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bdata: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_of = |id: &[f32], kd: &[f32], bd: &[f32]| -> f32 {
            let it = Tensor::from_vec(ishape.clone(), id.to_vec()).unwrap();
            let kt = Tensor::from_vec(kshape.clone(), kd.to_vec()).unwrap();
            let bt = Tensor::from_vec(vec![3], bd.to_vec()).unwrap();
            let mut g = Graph::no_grad();
            let out = g.conv2d(&it, &kt, &bt, 1, 1).unwrap();
            let sq = g.mul(&out, &out).unwrap();
            g.sum_all(&sq).unwrap().item()
        };

        let it = Tensor::param(ishape.clone(), idata.clone()).unwrap();
        let kt = Tensor::param(kshape.clone(), kdata.clone()).unwrap();
        let bt = Tensor::param(vec![3], bdata.clone()).unwrap();
        let mut g = Graph::new();
        let out = g.conv2d(&it, &kt, &bt, 1, 1).unwrap();
        let sq = g.mul(&out, &out).unwrap();
        let loss = g.sum_all(&sq).unwrap();
        g.backward(&loss).unwrap();

        let h = 1e-2f32;
        let check = |analytic: &[f32], data: &[f32], which: usize| {
            for i in (0..data.len()).step_by(7) {
                let mut plus = data.to_vec();
                plus[i] += h;
                let mut minus = data.to_vec();
                minus[i] -= h;
                let (fp, fm) = match which {
                    0 => (loss_of(&plus, &kdata, &bdata), loss_of(&minus, &kdata, &bdata)),
                    1 => (loss_of(&idata, &plus, &bdata), loss_of(&idata, &minus, &bdata)),
                    _ => (loss_of(&idata, &kdata, &plus), loss_of(&idata, &kdata, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[i];
                let denom = a.abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((a - fd) / denom).abs() < 1e-2,
                    "which {which} idx {i}: analytic {a} fd {fd}"
                );
            }
        };
        check(&it.grad().unwrap(), &idata, 0);
        check(&kt.grad().unwrap(), &kdata, 1);
        check(&bt.grad().unwrap(), &bdata, 2);
    }
}
