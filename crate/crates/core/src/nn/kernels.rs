//! Forward and backward kernels shared by the tape and by tape-free inference.
//!
//! Images are NHWC. Convolution weights are `[out, k, k, in]` so that one
//! kernel row lines up with a contiguous `k * in` run of the input row.
//! Every reduction has a fixed summation order, so results do not depend on
//! the rayon thread count.

use rayon::prelude::*;

const PAR_MIN_WORK: usize = 1 << 15;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    fn in_sample(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    fn out_sample(&self) -> usize {
        self.out_h() * self.out_w() * self.out_c
    }

    fn work(&self) -> usize {
        self.batch * self.out_sample() * self.kernel * self.kernel * self.in_c
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow, k, c, s) = (g.out_h(), g.out_w(), g.kernel, g.in_c, g.stride);
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let per_sample = |(n, out_n): (usize, &mut [f64])| {
        let xn = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        for oy in 0..oh {
            for ox in 0..ow {
                let cell = &mut out_n[(oy * ow + ox) * g.out_c..(oy * ow + ox + 1) * g.out_c];
                for (o, slot) in cell.iter_mut().enumerate() {
                    let mut acc = b[o];
                    for ky in 0..k {
                        let start = ((oy * s + ky) * g.in_w + ox * s) * c;
                        let wstart = (o * k + ky) * k * c;
                        acc += dot(&xn[start..start + k * c], &w[wstart..wstart + k * c]);
                    }
                    *slot = acc;
                }
            }
        }
    };
    if g.work() >= PAR_MIN_WORK {
        out.par_chunks_mut(g.out_sample()).enumerate().for_each(per_sample);
    } else {
        out.chunks_mut(g.out_sample()).enumerate().for_each(per_sample);
    }
    out
}

/// Returns (grad_x, grad_w, grad_b). `grad_x` is skipped when `need_x` is false.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (oh, ow, k, c, s) = (g.out_h(), g.out_w(), g.kernel, g.in_c, g.stride);
    let par = g.work() >= PAR_MIN_WORK;

    let grad_x = need_x.then(|| {
        let mut gx = vec![0.0; g.batch * g.in_sample()];
        let per_sample = |(n, gx_n): (usize, &mut [f64])| {
            let go_n = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..g.out_c {
                        let gv = go_n[(oy * ow + ox) * g.out_c + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let start = ((oy * s + ky) * g.in_w + ox * s) * c;
                            let wstart = (o * k + ky) * k * c;
                            axpy(gv, &w[wstart..wstart + k * c], &mut gx_n[start..start + k * c]);
                        }
                    }
                }
            }
        };
        if par {
            gx.par_chunks_mut(g.in_sample()).enumerate().for_each(per_sample);
        } else {
            gx.chunks_mut(g.in_sample()).enumerate().for_each(per_sample);
        }
        gx
    });

    let filter = k * k * c;
    let mut gw = vec![0.0; g.out_c * filter];
    let per_filter = |(o, gw_o): (usize, &mut [f64])| {
        for n in 0..g.batch {
            let xn = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
            let go_n = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = go_n[(oy * ow + ox) * g.out_c + o];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let start = ((oy * s + ky) * g.in_w + ox * s) * c;
                        axpy(gv, &xn[start..start + k * c], &mut gw_o[ky * k * c..(ky + 1) * k * c]);
                    }
                }
            }
        }
    };
    if par {
        gw.par_chunks_mut(filter).enumerate().for_each(per_filter);
    } else {
        gw.chunks_mut(filter).enumerate().for_each(per_filter);
    }

    let mut gb = vec![0.0; g.out_c];
    for chunk in grad_out.chunks(g.out_c) {
        for (b, v) in gb.iter_mut().zip(chunk) {
            *b += v;
        }
    }
    (grad_x, gw, gb)
}

/// `y[n, o] = x[n, :] . w[o, :] + b[o]`
pub fn linear_forward(batch: usize, inp: usize, out: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    let per_sample = |(n, y_n): (usize, &mut [f64])| {
        let xn = &x[n * inp..(n + 1) * inp];
        for (o, slot) in y_n.iter_mut().enumerate() {
            *slot = b[o] + dot(xn, &w[o * inp..(o + 1) * inp]);
        }
    };
    if batch * inp * out >= PAR_MIN_WORK {
        y.par_chunks_mut(out).enumerate().for_each(per_sample);
    } else {
        y.chunks_mut(out).enumerate().for_each(per_sample);
    }
    y
}

pub fn linear_backward(
    batch: usize,
    inp: usize,
    out: usize,
    x: &[f64],
    w: &[f64],
    grad_y: &[f64],
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let par = batch * inp * out >= PAR_MIN_WORK;
    let grad_x = need_x.then(|| {
        let mut gx = vec![0.0; batch * inp];
        let per_sample = |(n, gx_n): (usize, &mut [f64])| {
            for o in 0..out {
                let gv = grad_y[n * out + o];
                if gv != 0.0 {
                    axpy(gv, &w[o * inp..(o + 1) * inp], gx_n);
                }
            }
        };
        if par {
            gx.par_chunks_mut(inp).enumerate().for_each(per_sample);
        } else {
            gx.chunks_mut(inp).enumerate().for_each(per_sample);
        }
        gx
    });
    let mut gw = vec![0.0; out * inp];
    let per_row = |(o, gw_o): (usize, &mut [f64])| {
        for n in 0..batch {
            let gv = grad_y[n * out + o];
            if gv != 0.0 {
                axpy(gv, &x[n * inp..(n + 1) * inp], gw_o);
            }
        }
    };
    if par {
        gw.par_chunks_mut(inp).enumerate().for_each(per_row);
    } else {
        gw.chunks_mut(inp).enumerate().for_each(per_row);
    }
    let mut gb = vec![0.0; out];
    for n in 0..batch {
        for o in 0..out {
            gb[o] += grad_y[n * out + o];
        }
    }
    (grad_x, gw, gb)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (d, v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}
