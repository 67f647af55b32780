//! Batched kernels. Forward kernels read and write `f32` and accumulate in
//! `f64`; backward kernels work on `f64` buffers throughout.

use rayon::prelude::*;

/// Geometry of a 2-d sliding window (convolution or pooling) over one sample.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn in_len(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }
}

pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: Window) -> Vec<f32> {
    let n = x.len() / g.in_len();
    let mut out = vec![0.0f32; n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, xs)| {
            for o in 0..g.out_ch {
                let b = bias.map_or(0.0, |b| b[o] as f64);
                let wo = &weight[o * g.in_ch * g.kh * g.kw..(o + 1) * g.in_ch * g.kh * g.kw];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                    acc += wo[(c * g.kh + ky) * g.kw + kx] as f64
                                        * xs[(c * g.h + iy) * g.w + ix] as f64;
                                }
                            }
                        }
                        y[(o * g.oh + oy) * g.ow + ox] = acc as f32;
                    }
                }
            }
        });
    out
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(grad: &[f64], weight: &[f32], g: Window) -> Vec<f64> {
    let n = grad.len() / g.out_len();
    let mut gin = vec![0.0f64; n * g.in_len()];
    gin.par_chunks_mut(g.in_len())
        .zip(grad.par_chunks(g.out_len()))
        .for_each(|(gx, gy)| {
            for o in 0..g.out_ch {
                let wo = &weight[o * g.in_ch * g.kh * g.kw..(o + 1) * g.in_ch * g.kh * g.kw];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = gy[(o * g.oh + oy) * g.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..g.in_ch {
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                    gx[(c * g.h + iy) * g.w + ix] +=
                                        go * wo[(c * g.kh + ky) * g.kw + kx] as f64;
                                }
                            }
                        }
                    }
                }
            }
        });
    gin
}

/// Gradients with respect to the convolution weight and bias.
pub fn conv2d_backward_params(grad: &[f64], x: &[f32], g: Window) -> (Vec<f64>, Vec<f64>) {
    let n = grad.len() / g.out_len();
    let per_out = g.in_ch * g.kh * g.kw;
    let mut gw = vec![0.0f64; g.out_ch * per_out];
    let mut gb = vec![0.0f64; g.out_ch];
    gw.par_chunks_mut(per_out)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(o, (gwo, gbo))| {
            for s in 0..n {
                let gy = &grad[s * g.out_len()..(s + 1) * g.out_len()];
                let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = gy[(o * g.oh + oy) * g.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        *gbo += go;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                    gwo[(c * g.kh + ky) * g.kw + kx] +=
                                        go * xs[(c * g.h + iy) * g.w + ix] as f64;
                                }
                            }
                        }
                    }
                }
            }
        });
    (gw, gb)
}

pub fn dense_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, inputs: usize, outputs: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len() / inputs * outputs];
    out.par_chunks_mut(outputs)
        .zip(x.par_chunks(inputs))
        .for_each(|(y, xs)| {
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &weight[o * inputs..(o + 1) * inputs];
                let mut acc = bias.map_or(0.0, |b| b[o] as f64);
                for (w, v) in row.iter().zip(xs) {
                    acc += *w as f64 * *v as f64;
                }
                *yo = acc as f32;
            }
        });
    out
}

pub fn dense_backward_input(grad: &[f64], weight: &[f32], inputs: usize, outputs: usize) -> Vec<f64> {
    let n = grad.len() / outputs;
    let mut gin = vec![0.0f64; n * inputs];
    gin.par_chunks_mut(inputs)
        .zip(grad.par_chunks(outputs))
        .for_each(|(gx, gy)| {
            for (o, &go) in gy.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &weight[o * inputs..(o + 1) * inputs];
                for (gxi, w) in gx.iter_mut().zip(row) {
                    *gxi += go * *w as f64;
                }
            }
        });
    gin
}

pub fn dense_backward_params(grad: &[f64], x: &[f32], inputs: usize, outputs: usize) -> (Vec<f64>, Vec<f64>) {
    let n = grad.len() / outputs;
    let mut gw = vec![0.0f64; outputs * inputs];
    let mut gb = vec![0.0f64; outputs];
    gw.par_chunks_mut(inputs)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(o, (row, gbo))| {
            for s in 0..n {
                let go = grad[s * outputs + o];
                if go == 0.0 {
                    continue;
                }
                *gbo += go;
                let xs = &x[s * inputs..(s + 1) * inputs];
                for (r, v) in row.iter_mut().zip(xs) {
                    *r += go * *v as f64;
                }
            }
        });
    (gw, gb)
}

/// Per-channel affine map `y = scale[c] * x + shift[c]` used by inference batch norm.
pub fn bn_coefficients(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var)
        .map(|(&g, &v)| g as f64 / (v as f64 + eps as f64).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b as f64 - m as f64 * s)
        .collect();
    (scale, shift)
}

/// Channel index of flat element `e` for items of `channels * spatial` values.
#[inline]
pub fn channel_of(e: usize, channels: usize, spatial: usize) -> usize {
    (e / spatial) % channels
}

pub fn bn_forward(x: &[f32], scale: &[f64], shift: &[f64], spatial: usize) -> Vec<f32> {
    let c = scale.len();
    x.iter()
        .enumerate()
        .map(|(e, &v)| {
            let ch = channel_of(e, c, spatial);
            (scale[ch] * v as f64 + shift[ch]) as f32
        })
        .collect()
}

/// Index within the input item of the maximum in each pooling window.
/// Ties resolve to the first element in row-major window order.
pub fn max_pool_argmax(x: &[f32], g: Window) -> Vec<usize> {
    let n = x.len() / g.in_len();
    let mut idx = vec![0usize; n * g.out_len()];
    idx.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(out, xs)| {
            for c in 0..g.in_ch {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut best = usize::MAX;
                        let mut best_v = f32::NEG_INFINITY;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let i = (c * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx;
                                if best == usize::MAX || xs[i] > best_v {
                                    best = i;
                                    best_v = xs[i];
                                }
                            }
                        }
                        out[(c * g.oh + oy) * g.ow + ox] = best;
                    }
                }
            }
        });
    idx
}

pub fn max_pool_forward(x: &[f32], g: Window) -> Vec<f32> {
    let arg = max_pool_argmax(x, g);
    let (il, ol) = (g.in_len(), g.out_len());
    arg.iter()
        .enumerate()
        .map(|(k, &i)| x[(k / ol) * il + i])
        .collect()
}

pub fn avg_pool_forward(x: &[f32], g: Window) -> Vec<f32> {
    let n = x.len() / g.in_len();
    let area = (g.kh * g.kw) as f64;
    let mut out = vec![0.0f32; n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, xs)| {
            for c in 0..g.in_ch {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0f64;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                acc += xs[(c * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx] as f64;
                            }
                        }
                        y[(c * g.oh + oy) * g.ow + ox] = (acc / area) as f32;
                    }
                }
            }
        });
    out
}

pub fn avg_pool_backward(grad: &[f64], g: Window) -> Vec<f64> {
    let n = grad.len() / g.out_len();
    let area = (g.kh * g.kw) as f64;
    let mut gin = vec![0.0f64; n * g.in_len()];
    gin.par_chunks_mut(g.in_len())
        .zip(grad.par_chunks(g.out_len()))
        .for_each(|(gx, gy)| {
            for c in 0..g.in_ch {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = gy[(c * g.oh + oy) * g.ow + ox] / area;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                gx[(c * g.h + oy * g.stride + ky) * g.w + ox * g.stride + kx] += go;
                            }
                        }
                    }
                }
            }
        });
    gin
}

pub fn global_avg_pool_forward(x: &[f32], spatial: usize) -> Vec<f32> {
    x.chunks(spatial)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
        .collect()
}
