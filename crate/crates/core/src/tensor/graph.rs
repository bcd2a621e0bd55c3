//! The recording graph: a tape of primitive operations in execution
//! (hence topological) order, each holding its operand handles and a
//! backward closure with the saved forward context.

use super::{check_finite, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) outputs: Vec<Tensor>,
    pub(crate) backward: Box<dyn Fn()>,
}

/// Records primitive operations for one forward pass and replays them in
/// reverse for backpropagation. Confined to a single thread; independent
/// graphs can run concurrently on separate threads.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records every differentiable operation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Inference-only graph: nothing is recorded and outputs never require
    /// gradients.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn push(
        &mut self,
        inputs: Vec<Tensor>,
        outputs: Vec<Tensor>,
        backward: Box<dyn Fn()>,
    ) {
        self.nodes.push(Node {
            inputs,
            outputs,
            backward,
        });
    }

    /// Backpropagate from a scalar loss produced by this graph's recorded
    /// operations. Gradients of leaves accumulate across calls; gradients of
    /// intermediates are reset at the start of each call.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::ContractViolation(format!(
                "backward on non-scalar tensor of shape {:?}",
                loss.shape()
            )));
        }
        let produced = self
            .nodes
            .iter()
            .any(|n| n.outputs.iter().any(|o| o.ptr_eq(loss)));
        if !produced {
            return Err(Error::ContractViolation(
                "backward target was not produced by this graph's recorded operations".into(),
            ));
        }
        for node in &self.nodes {
            for out in &node.outputs {
                out.zero_grad();
            }
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            (node.backward)();
        }
        for node in &self.nodes {
            for t in node.inputs.iter().chain(node.outputs.iter()) {
                t.grad_finite("backward")?;
            }
        }
        Ok(())
    }

    // ---- elementwise and reduction primitives ----

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op(a, b, "add", |x, y| x + y, AddLike::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op(a, b, "sub", |x, y| x - y, AddLike::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_op(a, b, "mul", |x, y| x * y, AddLike::Mul)
    }

    fn zip_op(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        kind: AddLike,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::InvalidShape(format!(
                "{name}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out_data: Vec<f32> = {
            let ad = a.data();
            let bd = b.data();
            ad.iter().zip(bd.iter()).map(|(x, y)| f(*x, *y)).collect()
        };
        check_finite(&out_data, name)?;
        let out = Tensor::raw(a.shape(), out_data, self.wants_grad(&[a, b]));
        if out.requires_grad() {
            let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
            self.push(
                vec![a.clone(), b.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    match kind {
                        AddLike::Add => {
                            if ac.requires_grad() {
                                ac.accumulate_grad(&g);
                            }
                            if bc.requires_grad() {
                                bc.accumulate_grad(&g);
                            }
                        }
                        AddLike::Sub => {
                            if ac.requires_grad() {
                                ac.accumulate_grad(&g);
                            }
                            if bc.requires_grad() {
                                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                                bc.accumulate_grad(&neg);
                            }
                        }
                        AddLike::Mul => {
                            if ac.requires_grad() {
                                let contrib: Vec<f32> = {
                                    let bd = bc.data();
                                    g.iter().zip(bd.iter()).map(|(gv, bv)| gv * bv).collect()
                                };
                                ac.accumulate_grad(&contrib);
                            }
                            if bc.requires_grad() {
                                let contrib: Vec<f32> = {
                                    let ad = ac.data();
                                    g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).collect()
                                };
                                bc.accumulate_grad(&contrib);
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor, factor: f32) -> Result<Tensor> {
        let out_data: Vec<f32> = x.data().iter().map(|v| v * factor).collect();
        check_finite(&out_data, "scale")?;
        let out = Tensor::raw(x.shape(), out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let contrib: Vec<f32> = g.iter().map(|v| v * factor).collect();
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out_data: Vec<f32> = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::raw(x.shape(), out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let contrib: Vec<f32> = {
                        let xd = xc.data();
                        g.iter()
                            .zip(xd.iter())
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect()
                    };
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }

    /// Matrix-vector product: `m` is `[rows, cols]`, `v` is `[cols]`.
    pub fn matvec(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let ms = m.shape();
        let vs = v.shape();
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(Error::InvalidShape(format!("matvec: {ms:?} x {vs:?}")));
        }
        let (rows, cols) = (ms[0], ms[1]);
        let out_data: Vec<f32> = {
            let md = m.data();
            let vd = v.data();
            (0..rows)
                .map(|i| (0..cols).map(|j| md[i * cols + j] * vd[j]).sum())
                .collect()
        };
        check_finite(&out_data, "matvec")?;
        let out = Tensor::raw(vec![rows], out_data, self.wants_grad(&[m, v]));
        if out.requires_grad() {
            let (mc, vc, oc) = (m.clone(), v.clone(), out.clone());
            self.push(
                vec![m.clone(), v.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    if mc.requires_grad() {
                        let contrib: Vec<f32> = {
                            let vd = vc.data();
                            let mut c = vec![0.0; rows * cols];
                            for i in 0..rows {
                                for j in 0..cols {
                                    c[i * cols + j] = g[i] * vd[j];
                                }
                            }
                            c
                        };
                        mc.accumulate_grad(&contrib);
                    }
                    if vc.requires_grad() {
                        let contrib: Vec<f32> = {
                            let md = mc.data();
                            let mut c = vec![0.0; cols];
                            for i in 0..rows {
                                for j in 0..cols {
                                    c[j] += g[i] * md[i * cols + j];
                                }
                            }
                            c
                        };
                        vc.accumulate_grad(&contrib);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let total: f32 = x.data().iter().sum();
        check_finite(&[total], "sum_all")?;
        let out = Tensor::raw(vec![1], vec![total], self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            let n = x.numel();
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    xc.accumulate_grad(&vec![g[0]; n]);
                }),
            );
        }
        Ok(out)
    }

    /// Euclidean distance `||a - b||_2` as a scalar.
    pub fn l2_distance(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::InvalidShape(format!(
                "l2_distance: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let dist = {
            let ad = a.data();
            let bd = b.data();
            ad.iter()
                .zip(bd.iter())
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum::<f32>()
                .sqrt()
        };
        check_finite(&[dist], "l2_distance")?;
        let out = Tensor::raw(vec![1], vec![dist], self.wants_grad(&[a, b]));
        if out.requires_grad() {
            let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
            self.push(
                vec![a.clone(), b.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    if dist == 0.0 {
                        return; // subgradient 0 at the kink
                    }
                    let contrib: Vec<f32> = {
                        let ad = ac.data();
                        let bd = bc.data();
                        ad.iter()
                            .zip(bd.iter())
                            .map(|(x, y)| g[0] * (x - y) / dist)
                            .collect()
                    };
                    if ac.requires_grad() {
                        ac.accumulate_grad(&contrib);
                    }
                    if bc.requires_grad() {
                        let neg: Vec<f32> = contrib.iter().map(|v| -v).collect();
                        bc.accumulate_grad(&neg);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Select the contiguous batch rows `[from, to)` of a rank-4 tensor.
    pub fn slice_batch(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::InvalidShape(format!("slice_batch on rank {}", s.len())));
        }
        if from >= to || to > s[0] {
            return Err(Error::InvalidShape(format!(
                "slice_batch range {from}..{to} of batch {}",
                s[0]
            )));
        }
        let per = s[1] * s[2] * s[3];
        let out_data = x.data()[from * per..to * per].to_vec();
        let out_shape = vec![to - from, s[1], s[2], s[3]];
        let out = Tensor::raw(out_shape, out_data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (xc, oc) = (x.clone(), out.clone());
            let n = x.numel();
            self.push(
                vec![x.clone()],
                vec![out.clone()],
                Box::new(move || {
                    let Some(g) = oc.grad() else { return };
                    let mut contrib = vec![0.0; n];
                    contrib[from * per..to * per].copy_from_slice(&g);
                    xc.accumulate_grad(&contrib);
                }),
            );
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum AddLike {
    Add,
    Sub,
    Mul,
}
