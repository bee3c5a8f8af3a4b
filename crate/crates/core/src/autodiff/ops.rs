use super::kernels::{self, Dims4};
use super::tape::{transpose, Op, Tape, Var};
use crate::error::TensorError;
use crate::tensor::{gemm, Tensor};

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
}

impl Tape {
    /// Dispatches a pointwise op; binary kinds require `b`.
    pub fn elementwise<'t>(
        &'t self,
        op: ElementwiseOp,
        a: Var<'t>,
        b: Option<Var<'t>>,
    ) -> Result<Var<'t>, TensorError> {
        let need_b = || b.ok_or_else(|| TensorError::shape(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => a.add(need_b()?),
            ElementwiseOp::Mul => a.mul(need_b()?),
            ElementwiseOp::Tanh => Ok(a.tanh()),
            ElementwiseOp::Sigmoid => Ok(a.sigmoid()),
            ElementwiseOp::Relu => Ok(a.relu()),
        }
    }
}

fn expect_rank(what: &str, shape: &[usize], rank: usize) -> Result<(), TensorError> {
    if shape.len() != rank {
        return Err(TensorError::shape(format!("{what}: expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables live on different tapes");
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.value.map(f), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    /// Orders two operands so the second is equal-shaped or broadcast over
    /// the leading axis of the first.
    fn broadcast_pair(&self, other: Var<'t>, name: &str) -> Result<(Var<'t>, Var<'t>, bool), TensorError> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            Ok((*self, other, false))
        } else if sa.len() == sb.len() + 1 && sa[1..] == sb[..] {
            Ok((*self, other, true))
        } else if sb.len() == sa.len() + 1 && sb[1..] == sa[..] {
            Ok((other, *self, true))
        } else {
            Err(TensorError::shape(format!("{name}: cannot combine {sa:?} with {sb:?}")))
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, bool) -> Op,
    ) -> Result<Var<'t>, TensorError> {
        let (big, small, broadcast) = self.broadcast_pair(other, name)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[big.id], &nodes[small.id]);
            let bd = b.value.data();
            let inner = bd.len();
            let data = a.value.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % inner])).collect();
            (
                Tensor::from_parts(a.value.shape().to_vec(), data),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, make(big.id, small.id, broadcast), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", |a, b| a + b, |a, b, broadcast| Op::Add { a, b, broadcast })
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, |a, b, broadcast| Op::Mul { a, b, broadcast })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (Tensor::scalar(n.value.sum()), n.requires_grad)
        };
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    /// `[M,K] · [K,P] -> [M,P]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::shape(format!("matmul: {sa:?} x {sb:?}")));
            }
            let (m, k, p) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * p];
            gemm(m, k, p, a.value.data(), (k, 1), b.value.data(), (p, 1), &mut out, (p, 1), false);
            (Tensor::from_parts(vec![m, p], out), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let s = x.value.shape();
            expect_rank("transpose", s, 2)?;
            (transpose(x.value.data(), s[0], s[1]), x.requires_grad)
        };
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    /// Dilated causal convolution along the time axis of `[B,C_in,N,W]` with
    /// a `[C_out,C_in,K]` kernel. The input is left-padded with
    /// `(K-1)*dilation` zeros so the output keeps length `W`.
    pub fn conv_time_dilated_causal(&self, kernel: Var<'t>, dilation: usize) -> Result<Var<'t>, TensorError> {
        self.same_tape(&kernel);
        if dilation == 0 {
            return Err(TensorError::shape("dilation must be at least 1"));
        }
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, k) = (&nodes[self.id], &nodes[kernel.id]);
            let (sx, sk) = (x.value.shape(), k.value.shape());
            expect_rank("causal conv input", sx, 4)?;
            expect_rank("causal conv kernel", sk, 3)?;
            if sk[1] != sx[1] {
                return Err(TensorError::shape(format!(
                    "causal conv: kernel {sk:?} does not match input channels of {sx:?}"
                )));
            }
            let dims = Dims4::from_shape(sx);
            let (co, ks) = (sk[0], sk[2]);
            if (ks - 1) * dilation >= dims.time {
                log::warn!(
                    "causal conv reach {} (K={ks}, dilation={dilation}) is not shorter than the window {}; \
                     early taps only read padding",
                    (ks - 1) * dilation,
                    dims.time
                );
            }
            let out = kernels::causal_conv_forward(x.value.data(), dims, k.value.data(), co, ks, dilation);
            (
                Tensor::from_parts(vec![dims.batch, co, dims.nodes, dims.time], out),
                x.requires_grad || k.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::CausalConv {
                x: self.id,
                kernel: kernel.id,
                dilation,
            },
            rg,
        ))
    }

    /// Channel mixing at every `(b, n, t)`: `weight [C_out,C_in]`, `bias [C_out]`.
    pub fn conv_1x1(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            let (sx, sw, sb) = (x.value.shape(), w.value.shape(), b.value.shape());
            expect_rank("conv_1x1 input", sx, 4)?;
            if sw.len() != 2 || sw[1] != sx[1] || sb != [sw[0]] {
                return Err(TensorError::shape(format!(
                    "conv_1x1: input {sx:?}, weight {sw:?}, bias {sb:?}"
                )));
            }
            let dims = Dims4::from_shape(sx);
            let out = kernels::conv1x1_forward(x.value.data(), dims, w.value.data(), b.value.data());
            (
                Tensor::from_parts(vec![dims.batch, sw[0], dims.nodes, dims.time], out),
                x.requires_grad || w.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Conv1x1 {
                x: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting each row max.
    pub fn softmax_rows(&self) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let s = x.value.shape();
            expect_rank("softmax_rows", s, 2)?;
            if !x.value.is_finite() {
                return Err(TensorError::NonFinite("softmax_rows input".into()));
            }
            let out = kernels::softmax_rows(x.value.data(), s[1]);
            (Tensor::from_parts(s.to_vec(), out), x.requires_grad)
        };
        Ok(self.tape.push(value, Op::SoftmaxRows(self.id), rg))
    }

    /// Affine map `x [B,F] -> x·weightᵀ + bias` with `weight [O,F]`, `bias [O]`.
    pub fn dense(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            let (sx, sw, sb) = (x.value.shape(), w.value.shape(), b.value.shape());
            if sx.len() != 2 || sw.len() != 2 || sw[1] != sx[1] || sb != [sw[0]] {
                return Err(TensorError::shape(format!("dense: input {sx:?}, weight {sw:?}, bias {sb:?}")));
            }
            let (batch, feat, outs) = (sx[0], sx[1], sw[0]);
            let mut out: Vec<f64> = (0..batch).flat_map(|_| b.value.data().iter().copied()).collect();
            gemm(batch, feat, outs, x.value.data(), (feat, 1), w.value.data(), (1, feat), &mut out, (outs, 1), true);
            (
                Tensor::from_parts(vec![batch, outs], out),
                x.requires_grad || w.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Dense {
                x: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            (x.value.reshape(shape)?, x.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// `[B, ...] -> [B, F]`, keeping row-major element order.
    pub fn flatten(&self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let batch = shape[0];
        let features = shape[1..].iter().product();
        self.reshape(&[batch, features])
    }

    /// `y[b,c,n,t] = Σ_j adj[n,j]·x[b,c,j,t]`.
    pub fn node_mix(&self, adj: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&adj);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, a) = (&nodes[self.id], &nodes[adj.id]);
            let (sx, sa) = (x.value.shape(), a.value.shape());
            expect_rank("node_mix input", sx, 4)?;
            if sa != [sx[2], sx[2]] {
                return Err(TensorError::shape(format!(
                    "node_mix: adjacency {sa:?} does not match {} nodes",
                    sx[2]
                )));
            }
            let out = kernels::node_mix_forward(x.value.data(), Dims4::from_shape(sx), a.value.data());
            (Tensor::from_parts(sx.to_vec(), out), x.requires_grad || a.requires_grad)
        };
        Ok(self.tape.push(value, Op::NodeMix { x: self.id, adj: adj.id }, rg))
    }

    /// `self + alpha·I` for a square matrix and a single-element `alpha`.
    pub fn add_scaled_identity(&self, alpha: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&alpha);
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, s) = (&nodes[self.id], &nodes[alpha.id]);
            let sa = a.value.shape();
            if sa.len() != 2 || sa[0] != sa[1] || s.value.numel() != 1 {
                return Err(TensorError::shape(format!(
                    "add_scaled_identity: matrix {sa:?}, alpha {:?}",
                    s.value.shape()
                )));
            }
            let n = sa[0];
            let mut out = a.value.clone();
            let alpha_v = s.value.data()[0];
            for i in 0..n {
                out.data_mut()[i * n + i] += alpha_v;
            }
            (out, a.requires_grad || s.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::AddScaledIdentity {
                a: self.id,
                alpha: alpha.id,
            },
            rg,
        ))
    }

    /// Mean squared error against a fixed target of the same shape.
    pub fn mse_loss(&self, target: &Tensor) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let p = &nodes[self.id];
            if p.value.shape() != target.shape() {
                return Err(TensorError::shape(format!(
                    "mse_loss: prediction {:?} vs target {:?}",
                    p.value.shape(),
                    target.shape()
                )));
            }
            let n = target.numel() as f64;
            let sq: f64 = p
                .value
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (Tensor::scalar(sq / n), p.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::Mse {
                pred: self.id,
                target: target.clone(),
            },
            rg,
        ))
    }
}

/// Channel-axis concatenation of `[B, C_i, ...]` tensors in argument order.
pub fn concat_channels<'t>(xs: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    let first = xs.first().ok_or_else(|| TensorError::shape("concat of zero tensors"))?;
    let tape = first.tape;
    let (value, rg) = {
        let nodes = tape.nodes();
        let s0 = nodes[first.id].value.shape();
        if s0.len() < 2 {
            return Err(TensorError::shape(format!("concat needs rank >= 2, got {s0:?}")));
        }
        let mut channels = 0;
        let mut rg = false;
        for x in xs {
            first.same_tape(x);
            let n = &nodes[x.id];
            let s = n.value.shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::shape(format!("concat: {s:?} incompatible with {s0:?}")));
            }
            channels += s[1];
            rg |= n.requires_grad;
        }
        let batch = s0[0];
        let mut shape = s0.to_vec();
        shape[1] = channels;
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for b in 0..batch {
            for x in xs {
                let v = &nodes[x.id].value;
                let inner = v.numel() / batch;
                out.extend_from_slice(&v.data()[b * inner..(b + 1) * inner]);
            }
        }
        (Tensor::from_parts(shape, out), rg)
    };
    Ok(tape.push(value, Op::Concat(xs.iter().map(|x| x.id).collect()), rg))
}
