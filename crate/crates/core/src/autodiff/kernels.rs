//! Slice-level forward/backward kernels shared by the tape ops.
//!
//! Activations use the `[B, C, N, W]` layout: batch, channel, node, time.

use crate::tensor::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims4 {
    pub batch: usize,
    pub channels: usize,
    pub nodes: usize,
    pub time: usize,
}

impl Dims4 {
    pub fn from_shape(shape: &[usize]) -> Self {
        Self {
            batch: shape[0],
            channels: shape[1],
            nodes: shape[2],
            time: shape[3],
        }
    }

    /// Elements in one channel plane (`N * W`).
    pub fn plane(&self) -> usize {
        self.nodes * self.time
    }
}

/// Fills `col` (`[C_in * K, N * W]`) with the causally shifted taps of one
/// batch item. Tap `k` reads `x[t - (K-1-k)*dilation]`, zero before the start.
fn im2col(x: &[f64], dims: Dims4, kernel_size: usize, dilation: usize, col: &mut [f64]) {
    let (w, plane) = (dims.time, dims.plane());
    for ci in 0..dims.channels {
        let src_plane = &x[ci * plane..(ci + 1) * plane];
        for k in 0..kernel_size {
            let shift = (kernel_size - 1 - k) * dilation;
            let row = &mut col[(ci * kernel_size + k) * plane..(ci * kernel_size + k + 1) * plane];
            for n in 0..dims.nodes {
                let dst = &mut row[n * w..(n + 1) * w];
                let src = &src_plane[n * w..(n + 1) * w];
                if shift >= w {
                    dst.fill(0.0);
                } else {
                    dst[..shift].fill(0.0);
                    dst[shift..].copy_from_slice(&src[..w - shift]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `dx`.
fn col2im(col: &[f64], dims: Dims4, kernel_size: usize, dilation: usize, dx: &mut [f64]) {
    let (w, plane) = (dims.time, dims.plane());
    for ci in 0..dims.channels {
        let dst_plane = &mut dx[ci * plane..(ci + 1) * plane];
        for k in 0..kernel_size {
            let shift = (kernel_size - 1 - k) * dilation;
            if shift >= w {
                continue;
            }
            let row = &col[(ci * kernel_size + k) * plane..(ci * kernel_size + k + 1) * plane];
            for n in 0..dims.nodes {
                let dst = &mut dst_plane[n * w..n * w + w - shift];
                let src = &row[n * w + shift..(n + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

pub(crate) fn causal_conv_forward(
    x: &[f64],
    dims: Dims4,
    kernel: &[f64],
    out_channels: usize,
    kernel_size: usize,
    dilation: usize,
) -> Vec<f64> {
    let plane = dims.plane();
    let rows = dims.channels * kernel_size;
    let mut out = vec![0.0; dims.batch * out_channels * plane];
    let mut col = vec![0.0; rows * plane];
    let in_stride = dims.channels * plane;
    let out_stride = out_channels * plane;
    for b in 0..dims.batch {
        im2col(&x[b * in_stride..(b + 1) * in_stride], dims, kernel_size, dilation, &mut col);
        gemm(
            out_channels,
            rows,
            plane,
            kernel,
            (rows, 1),
            &col,
            (plane, 1),
            &mut out[b * out_stride..(b + 1) * out_stride],
            (plane, 1),
            false,
        );
    }
    out
}

/// Returns `(dx, dkernel)`; each is computed only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_conv_backward(
    grad: &[f64],
    x: &[f64],
    dims: Dims4,
    kernel: &[f64],
    out_channels: usize,
    kernel_size: usize,
    dilation: usize,
    want_dx: bool,
    want_dkernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = dims.plane();
    let rows = dims.channels * kernel_size;
    let in_stride = dims.channels * plane;
    let out_stride = out_channels * plane;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dkernel.then(|| vec![0.0; kernel.len()]);
    let mut col = vec![0.0; rows * plane];
    for b in 0..dims.batch {
        let g = &grad[b * out_stride..(b + 1) * out_stride];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * in_stride..(b + 1) * in_stride], dims, kernel_size, dilation, &mut col);
            gemm(out_channels, plane, rows, g, (plane, 1), &col, (1, plane), dk, (rows, 1), true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, out_channels, plane, kernel, (1, rows), g, (plane, 1), &mut col, (plane, 1), false);
            col2im(&col, dims, kernel_size, dilation, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (dx, dk)
}

pub(crate) fn conv1x1_forward(x: &[f64], dims: Dims4, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_channels = bias.len();
    let plane = dims.plane();
    let in_stride = dims.channels * plane;
    let out_stride = out_channels * plane;
    let mut out = vec![0.0; dims.batch * out_stride];
    for b in 0..dims.batch {
        let o = &mut out[b * out_stride..(b + 1) * out_stride];
        for (co, row) in o.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            out_channels,
            dims.channels,
            plane,
            weight,
            (dims.channels, 1),
            &x[b * in_stride..(b + 1) * in_stride],
            (plane, 1),
            o,
            (plane, 1),
            true,
        );
    }
    out
}

pub(crate) struct Conv1x1Grads {
    pub dx: Option<Vec<f64>>,
    pub dweight: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub(crate) fn conv1x1_backward(
    grad: &[f64],
    x: &[f64],
    dims: Dims4,
    weight: &[f64],
    out_channels: usize,
    want: (bool, bool, bool),
) -> Conv1x1Grads {
    let plane = dims.plane();
    let ci = dims.channels;
    let in_stride = ci * plane;
    let out_stride = out_channels * plane;
    let mut dx = want.0.then(|| vec![0.0; x.len()]);
    let mut dw = want.1.then(|| vec![0.0; weight.len()]);
    let mut db = want.2.then(|| vec![0.0; out_channels]);
    for b in 0..dims.batch {
        let g = &grad[b * out_stride..(b + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            gemm(out_channels, plane, ci, g, (plane, 1), xb, (1, plane), dw, (ci, 1), true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            gemm(ci, out_channels, plane, weight, (1, ci), g, (plane, 1), dxb, (plane, 1), false);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in g.chunks_exact(plane).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    Conv1x1Grads {
        dx,
        dweight: dw,
        dbias: db,
    }
}

/// `y[b,c,n,t] = Σ_j adj[n,j] · x[b,c,j,t]`.
pub(crate) fn node_mix_forward(x: &[f64], dims: Dims4, adj: &[f64]) -> Vec<f64> {
    let (n, w, plane) = (dims.nodes, dims.time, dims.plane());
    let mut out = vec![0.0; x.len()];
    for (xb, ob) in x.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        gemm(n, n, w, adj, (n, 1), xb, (w, 1), ob, (w, 1), false);
    }
    out
}

pub(crate) fn node_mix_backward(
    grad: &[f64],
    x: &[f64],
    dims: Dims4,
    adj: &[f64],
    want_dx: bool,
    want_dadj: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, w, plane) = (dims.nodes, dims.time, dims.plane());
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dadj = want_dadj.then(|| vec![0.0; adj.len()]);
    for (i, (gb, xb)) in grad.chunks_exact(plane).zip(x.chunks_exact(plane)).enumerate() {
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[i * plane..(i + 1) * plane];
            gemm(n, n, w, adj, (1, n), gb, (w, 1), dxb, (w, 1), false);
        }
        if let Some(da) = dadj.as_mut() {
            gemm(n, w, n, gb, (w, 1), xb, (1, w), da, (n, 1), true);
        }
    }
    (dx, dadj)
}

/// Row-wise softmax of a `[rows, cols]` matrix with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward(grad: &[f64], y: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((g, y), d) in grad.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
        for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
            *d = yi * (gi - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let dims = Dims4 {
            batch: 1,
            channels: 2,
            nodes: 2,
            time: 5,
        };
        let (k, d) = (3, 2);
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..60).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; 60];
        im2col(&x, dims, k, d, &mut col);
        let mut back = vec![0.0; 20];
        col2im(&y, dims, k, d, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
