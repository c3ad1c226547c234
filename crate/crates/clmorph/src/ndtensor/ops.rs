//! Elementwise arithmetic, reductions and shape ops with their backward rules.
//!
//! Binary ops accept equal shapes or a single-element tensor on either side
//! (scalar broadcast); no other broadcasting exists.

use super::{OpNode, Tensor};
use crate::error::{Error, Result};

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::Dimension(format!(
            "incompatible shapes {:?} and {:?} (only scalar broadcast is supported)",
            a.shape(),
            b.shape()
        )))
    }
}

/// Reduce an elementwise gradient to a parent's shape: identity for full
/// shape, total sum for a broadcast scalar.
fn reduce_to(parent: &Tensor, grad: &[f64]) -> Vec<f64> {
    if parent.numel() == grad.len() {
        grad.to_vec()
    } else {
        vec![grad.iter().sum()]
    }
}

fn at(data: &[f64], i: usize) -> f64 {
    // Scalar operands broadcast by indexing element 0.
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

macro_rules! binary_op {
    ($opname:ident, $method:ident, $fwd:expr, $bwd:expr, $label:literal) => {
        struct $opname {
            lhs: Tensor,
            rhs: Tensor,
        }

        impl OpNode for $opname {
            fn parents(&self) -> Vec<Tensor> {
                vec![self.lhs.clone(), self.rhs.clone()]
            }

            fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
                let a = self.lhs.data();
                let b = self.rhs.data();
                let fwd_bwd: fn(f64, f64, f64) -> (f64, f64) = $bwd;
                let n = out_grad.len();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    let (da, db) = fwd_bwd(at(&a, i), at(&b, i), out_grad[i]);
                    ga[i] = da;
                    gb[i] = db;
                }
                vec![
                    self.lhs.requires_grad().then(|| reduce_to(&self.lhs, &ga)),
                    self.rhs.requires_grad().then(|| reduce_to(&self.rhs, &gb)),
                ]
            }

            fn name(&self) -> &'static str {
                $label
            }
        }

        impl Tensor {
            pub fn $method(&self, rhs: &Tensor) -> Result<Tensor> {
                let shape = broadcast_shape(self, rhs)?;
                let n: usize = shape.iter().product();
                let a = self.data();
                let b = rhs.data();
                let f: fn(f64, f64) -> f64 = $fwd;
                let data: Vec<f64> = (0..n).map(|i| f(at(&a, i), at(&b, i))).collect();
                drop(a);
                drop(b);
                Ok(Tensor::from_op(
                    shape,
                    data,
                    Box::new($opname {
                        lhs: self.clone(),
                        rhs: rhs.clone(),
                    }),
                ))
            }
        }
    };
}

binary_op!(AddOp, add, |a, b| a + b, |_a, _b, g| (g, g), "add");
binary_op!(SubOp, sub, |a, b| a - b, |_a, _b, g| (g, -g), "sub");
binary_op!(MulOp, mul, |a, b| a * b, |a, b, g| (g * b, g * a), "mul");
binary_op!(DivOp, div, |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)), "div");

struct UnaryOp {
    input: Tensor,
    // (out_value, input_value, out_grad) -> input_grad
    grad: fn(f64, f64, f64) -> f64,
    label: &'static str,
}

impl OpNode for UnaryOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.input.data();
        let g: Vec<f64> = (0..out_grad.len())
            .map(|i| (self.grad)(out[i], x[i], out_grad[i]))
            .collect();
        vec![Some(g)]
    }

    fn name(&self) -> &'static str {
        self.label
    }
}

impl Tensor {
    fn unary(&self, fwd: impl Fn(f64) -> f64, grad: fn(f64, f64, f64) -> f64, label: &'static str) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| fwd(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Box::new(UnaryOp {
                input: self.clone(),
                grad,
                label,
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |out, _x, g| g * out, "exp")
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(f64::ln, |_out, x, g| g / x, "log"))
    }

    /// Square root; every element must be non-negative.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(f64::sqrt, |out, _x, g| g * 0.5 / out, "sqrt"))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_out, _x, g| -g, "neg")
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Box::new(LeakyReluOp {
                input: self.clone(),
                slope,
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Box::new(UnaryOp {
                input: self.clone(),
                grad: |_out, _x, g| g,
                label: "add_scalar",
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * c).collect();
        let op = MulScalarOp {
            input: self.clone(),
            factor: c,
        };
        Tensor::from_op(self.shape().to_vec(), data, Box::new(op))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            Box::new(ReduceOp {
                input: self.clone(),
                kind: Reduce::Sum,
            }),
        )
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n],
            Box::new(ReduceOp {
                input: self.clone(),
                kind: Reduce::Mean,
            }),
        )
    }

    /// Euclidean norm of all elements (scalar output).
    pub fn l2_norm(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&x| x * x).sum();
        Tensor::from_op(
            vec![1],
            vec![s.sqrt()],
            Box::new(ReduceOp {
                input: self.clone(),
                kind: Reduce::L2Norm,
            }),
        )
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Box::new(ReshapeOp { input: self.clone() }),
        ))
    }
}

struct LeakyReluOp {
    input: Tensor,
    slope: f64,
}

impl OpNode for LeakyReluOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.input.data();
        let g: Vec<f64> = out_grad
            .iter()
            .zip(x.iter())
            .map(|(&g, &x)| if x >= 0.0 { g } else { self.slope * g })
            .collect();
        vec![Some(g)]
    }

    fn name(&self) -> &'static str {
        "leaky_relu"
    }
}

struct MulScalarOp {
    input: Tensor,
    factor: f64,
}

impl OpNode for MulScalarOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(out_grad.iter().map(|g| g * self.factor).collect())]
    }

    fn name(&self) -> &'static str {
        "mul_scalar"
    }
}

enum Reduce {
    Sum,
    Mean,
    L2Norm,
}

struct ReduceOp {
    input: Tensor,
    kind: Reduce,
}

impl OpNode for ReduceOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = out_grad[0];
        let n = self.input.numel();
        let grad = match self.kind {
            Reduce::Sum => vec![g; n],
            Reduce::Mean => vec![g / n as f64; n],
            Reduce::L2Norm => {
                let norm = out[0].max(1e-300);
                self.input.data().iter().map(|&x| g * x / norm).collect()
            }
        };
        vec![Some(grad)]
    }

    fn name(&self) -> &'static str {
        match self.kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::L2Norm => "l2_norm",
        }
    }
}

struct ReshapeOp {
    input: Tensor,
}

impl OpNode for ReshapeOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(out_grad.to_vec())]
    }

    fn name(&self) -> &'static str {
        "reshape"
    }
}

/// Affine map: `input [N,K] x weight [M,K]^T + bias [M] -> [N,M]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (ish, wsh, bsh) = (input.shape(), weight.shape(), bias.shape());
    if ish.len() != 2 || wsh.len() != 2 || bsh.len() != 1 {
        return Err(Error::Dimension(format!(
            "linear expects input [N,K], weight [M,K], bias [M]; got {ish:?}, {wsh:?}, {bsh:?}"
        )));
    }
    let (n, k) = (ish[0], ish[1]);
    let (m, wk) = (wsh[0], wsh[1]);
    if wk != k || bsh[0] != m {
        return Err(Error::Dimension(format!(
            "linear inner dimensions do not match: input [{n},{k}], weight [{m},{wk}], bias [{}]",
            bsh[0]
        )));
    }
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            let xr = &x[i * k..(i + 1) * k];
            let wr = &w[j * k..(j + 1) * k];
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            out[i * m + j] = acc;
        }
    }
    drop(x);
    drop(w);
    drop(b);
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        Box::new(LinearOp {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        }),
    ))
}

struct LinearOp {
    input: Tensor,
    weight: Tensor,
    bias: Tensor,
}

impl OpNode for LinearOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone(), self.weight.clone(), self.bias.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, k) = (self.input.shape()[0], self.input.shape()[1]);
        let m = self.weight.shape()[0];
        let x = self.input.data();
        let w = self.weight.data();

        let gx = self.input.requires_grad().then(|| {
            let mut gx = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..m {
                    let g = out_grad[i * m + j];
                    let wr = &w[j * k..(j + 1) * k];
                    let gr = &mut gx[i * k..(i + 1) * k];
                    for (gv, wv) in gr.iter_mut().zip(wr) {
                        *gv += g * wv;
                    }
                }
            }
            gx
        });
        let gw = self.weight.requires_grad().then(|| {
            let mut gw = vec![0.0; m * k];
            for i in 0..n {
                let xr = &x[i * k..(i + 1) * k];
                for j in 0..m {
                    let g = out_grad[i * m + j];
                    let gr = &mut gw[j * k..(j + 1) * k];
                    for (gv, xv) in gr.iter_mut().zip(xr) {
                        *gv += g * xv;
                    }
                }
            }
            gw
        });
        let gb = self.bias.requires_grad().then(|| {
            let mut gb = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    gb[j] += out_grad[i * m + j];
                }
            }
            gb
        });
        vec![gx, gw, gb]
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

/// Per-channel spatial mean: `[C,D,H,W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let sh = input.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!(
            "global_avg_pool expects [C,D,H,W], got {sh:?}"
        )));
    }
    let (c, vox) = (sh[0], sh[1] * sh[2] * sh[3]);
    let x = input.data();
    let out: Vec<f64> = (0..c)
        .map(|ch| x[ch * vox..(ch + 1) * vox].iter().sum::<f64>() / vox as f64)
        .collect();
    drop(x);
    Ok(Tensor::from_op(
        vec![c],
        out,
        Box::new(GlobalAvgPoolOp { input: input.clone() }),
    ))
}

struct GlobalAvgPoolOp {
    input: Tensor,
}

impl OpNode for GlobalAvgPoolOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let sh = self.input.shape();
        let (c, vox) = (sh[0], sh[1] * sh[2] * sh[3]);
        let mut g = vec![0.0; c * vox];
        for ch in 0..c {
            let gv = out_grad[ch] / vox as f64;
            for v in &mut g[ch * vox..(ch + 1) * vox] {
                *v = gv;
            }
        }
        vec![Some(g)]
    }

    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
}

/// Channel concatenation of `[Ci,D,H,W]` tensors with equal spatial extents.
pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Usage("concat_channels of zero tensors".into()));
    }
    let spatial = &inputs[0].shape()[1..];
    for t in inputs {
        let sh = t.shape();
        if sh.len() != 4 || &sh[1..] != spatial {
            return Err(Error::Dimension(format!(
                "concat_channels: mismatched shapes {:?} vs [C,{:?}]",
                sh, spatial
            )));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(c_total * spatial.iter().product::<usize>());
    for t in inputs {
        data.extend_from_slice(&t.data());
    }
    let mut shape = vec![c_total];
    shape.extend_from_slice(spatial);
    Ok(Tensor::from_op(
        shape,
        data,
        Box::new(ConcatChannelsOp {
            inputs: inputs.to_vec(),
        }),
    ))
}

struct ConcatChannelsOp {
    inputs: Vec<Tensor>,
}

impl OpNode for ConcatChannelsOp {
    fn parents(&self) -> Vec<Tensor> {
        self.inputs.clone()
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut grads = Vec::with_capacity(self.inputs.len());
        let mut offset = 0;
        for t in &self.inputs {
            let n = t.numel();
            grads.push(
                t.requires_grad()
                    .then(|| out_grad[offset..offset + n].to_vec()),
            );
            offset += n;
        }
        grads
    }

    fn name(&self) -> &'static str {
        "concat_channels"
    }
}
