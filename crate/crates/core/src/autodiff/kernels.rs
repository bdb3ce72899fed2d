//! Raw 1-D convolution kernels over `[channels, time]` buffers.

use super::gemm::{gemm, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dAttrs {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    /// Zero padding added on both ends of the time axis.
    pub padding: usize,
}

impl Default for Conv1dAttrs {
    fn default() -> Self {
        Conv1dAttrs {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }
}

impl Conv1dAttrs {
    /// Output length, or `None` when the dilated kernel does not fit.
    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub kernel: usize,
    pub out_len: usize,
}

fn im2col(
    x: &[f64],
    dims: &ConvDims,
    a: &Conv1dAttrs,
    group: usize,
    cig: usize,
    cols: &mut [f64],
) {
    let (k_len, t_out, t_in) = (dims.kernel, dims.out_len, dims.len);
    for ci in 0..cig {
        let row_in = &x[(group * cig + ci) * t_in..][..t_in];
        for k in 0..k_len {
            let dst = &mut cols[(ci * k_len + k) * t_out..][..t_out];
            let shift = (k * a.dilation) as isize - a.padding as isize;
            for (t, d) in dst.iter_mut().enumerate() {
                let src = (t * a.stride) as isize + shift;
                *d = if src >= 0 && (src as usize) < t_in {
                    row_in[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    dims: &ConvDims,
    a: &Conv1dAttrs,
    group: usize,
    cig: usize,
    dx: &mut [f64],
) {
    let (k_len, t_out, t_in) = (dims.kernel, dims.out_len, dims.len);
    for ci in 0..cig {
        let row = &mut dx[(group * cig + ci) * t_in..][..t_in];
        for k in 0..k_len {
            let src = &cols[(ci * k_len + k) * t_out..][..t_out];
            let shift = (k * a.dilation) as isize - a.padding as isize;
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * a.stride) as isize + shift;
                if pos >= 0 && (pos as usize) < t_in {
                    row[pos as usize] += v;
                }
            }
        }
    }
}

fn is_pointwise(dims: &ConvDims, a: &Conv1dAttrs) -> bool {
    dims.kernel == 1 && a.stride == 1 && a.padding == 0 && a.groups == 1
}

fn is_depthwise(dims: &ConvDims, a: &Conv1dAttrs) -> bool {
    a.groups == dims.cin && a.groups == dims.cout
}

/// Cross-correlation; `w` is `[cout, cin/groups, kernel]`.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], dims: &ConvDims, a: &Conv1dAttrs) -> Vec<f64> {
    let mut out = vec![0.0; dims.cout * dims.out_len];
    if is_pointwise(dims, a) {
        gemm(
            View::row_major(w, dims.cout, dims.cin),
            View::row_major(x, dims.cin, dims.len),
            0.0,
            &mut out,
        );
        return out;
    }
    if is_depthwise(dims, a) {
        for c in 0..dims.cout {
            let xr = &x[c * dims.len..][..dims.len];
            let wr = &w[c * dims.kernel..][..dims.kernel];
            let orow = &mut out[c * dims.out_len..][..dims.out_len];
            for (k, &wk) in wr.iter().enumerate() {
                let shift = (k * a.dilation) as isize - a.padding as isize;
                for (t, o) in orow.iter_mut().enumerate() {
                    let src = (t * a.stride) as isize + shift;
                    if src >= 0 && (src as usize) < dims.len {
                        *o += wk * xr[src as usize];
                    }
                }
            }
        }
        return out;
    }
    let cig = dims.cin / a.groups;
    let cog = dims.cout / a.groups;
    let mut cols = vec![0.0; cig * dims.kernel * dims.out_len];
    for g in 0..a.groups {
        im2col(x, dims, a, g, cig, &mut cols);
        let wg = &w[g * cog * cig * dims.kernel..][..cog * cig * dims.kernel];
        gemm(
            View::row_major(wg, cog, cig * dims.kernel),
            View::row_major(&cols, cig * dims.kernel, dims.out_len),
            0.0,
            &mut out[g * cog * dims.out_len..][..cog * dims.out_len],
        );
    }
    out
}

/// Accumulates input and weight gradients of [`conv1d_forward`].
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dims: &ConvDims,
    a: &Conv1dAttrs,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if is_pointwise(dims, a) {
        if let Some(dx) = dx {
            gemm(
                View::row_major(w, dims.cout, dims.cin).t(),
                View::row_major(dy, dims.cout, dims.len),
                1.0,
                dx,
            );
        }
        if let Some(dw) = dw {
            gemm(
                View::row_major(dy, dims.cout, dims.len),
                View::row_major(x, dims.cin, dims.len).t(),
                1.0,
                dw,
            );
        }
        return;
    }
    if is_depthwise(dims, a) {
        let mut dx = dx;
        let mut dw = dw;
        for c in 0..dims.cout {
            let xr = &x[c * dims.len..][..dims.len];
            let dyr = &dy[c * dims.out_len..][..dims.out_len];
            for k in 0..dims.kernel {
                let shift = (k * a.dilation) as isize - a.padding as isize;
                let wk = w[c * dims.kernel + k];
                let mut acc = 0.0;
                for (t, &g) in dyr.iter().enumerate() {
                    let src = (t * a.stride) as isize + shift;
                    if src >= 0 && (src as usize) < dims.len {
                        let s = src as usize;
                        acc += g * xr[s];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * dims.len + s] += g * wk;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[c * dims.kernel + k] += acc;
                }
            }
        }
        return;
    }
    let cig = dims.cin / a.groups;
    let cog = dims.cout / a.groups;
    let rows = cig * dims.kernel;
    let mut cols = vec![0.0; rows * dims.out_len];
    let mut dx = dx;
    let mut dw = dw;
    for g in 0..a.groups {
        let dyg = &dy[g * cog * dims.out_len..][..cog * dims.out_len];
        let wg = &w[g * cog * rows..][..cog * rows];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, dims, a, g, cig, &mut cols);
            gemm(
                View::row_major(dyg, cog, dims.out_len),
                View::row_major(&cols, rows, dims.out_len).t(),
                1.0,
                &mut dw[g * cog * rows..][..cog * rows],
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                View::row_major(wg, cog, rows).t(),
                View::row_major(dyg, cog, dims.out_len),
                0.0,
                &mut cols,
            );
            col2im(&cols, dims, a, g, cig, dx);
        }
    }
}

/// Transposed convolution with overlap-add; `w` is `[cin, cout, kernel]`,
/// output length `(len - 1) * stride + kernel`.
pub(crate) fn conv_transpose1d_forward(
    x: &[f64],
    w: &[f64],
    dims: &ConvDims,
    stride: usize,
) -> Vec<f64> {
    let rows = dims.cout * dims.kernel;
    let mut frames = vec![0.0; rows * dims.len];
    gemm(
        View::row_major(w, dims.cin, rows).t(),
        View::row_major(x, dims.cin, dims.len),
        0.0,
        &mut frames,
    );
    let mut out = vec![0.0; dims.cout * dims.out_len];
    for co in 0..dims.cout {
        let orow = &mut out[co * dims.out_len..][..dims.out_len];
        for k in 0..dims.kernel {
            let fr = &frames[(co * dims.kernel + k) * dims.len..][..dims.len];
            for (t, &v) in fr.iter().enumerate() {
                orow[t * stride + k] += v;
            }
        }
    }
    out
}

pub(crate) fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dims: &ConvDims,
    stride: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let rows = dims.cout * dims.kernel;
    let mut dframes = vec![0.0; rows * dims.len];
    for co in 0..dims.cout {
        let dyr = &dy[co * dims.out_len..][..dims.out_len];
        for k in 0..dims.kernel {
            let fr = &mut dframes[(co * dims.kernel + k) * dims.len..][..dims.len];
            for (t, v) in fr.iter_mut().enumerate() {
                *v = dyr[t * stride + k];
            }
        }
    }
    if let Some(dx) = dx {
        gemm(
            View::row_major(w, dims.cin, rows),
            View::row_major(&dframes, rows, dims.len),
            1.0,
            dx,
        );
    }
    if let Some(dw) = dw {
        gemm(
            View::row_major(x, dims.cin, dims.len),
            View::row_major(&dframes, rows, dims.len).t(),
            1.0,
            dw,
        );
    }
}
