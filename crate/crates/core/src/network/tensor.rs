//! Dense 4-axis tensors in `(batch, freq, time, channels)` layout and the
//! convolutional primitives that operate on them.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, f: usize, t: usize, c: usize) -> usize {
        let [_, nf, nt, nc] = self.shape;
        ((b * nf + f) * nt + t) * nc + c
    }

    pub fn get(&self, b: usize, f: usize, t: usize, c: usize) -> f64 {
        self.data[self.offset(b, f, t, c)]
    }

    pub fn set(&mut self, b: usize, f: usize, t: usize, c: usize, v: f64) {
        let i = self.offset(b, f, t, c);
        self.data[i] = v;
    }

    /// Channel vector at one `(batch, freq, time)` position.
    #[inline]
    pub fn pixel(&self, b: usize, f: usize, t: usize) -> &[f64] {
        let i = self.offset(b, f, t, 0);
        &self.data[i..i + self.shape[3]]
    }

    #[inline]
    pub fn pixel_mut(&mut self, b: usize, f: usize, t: usize) -> &mut [f64] {
        let i = self.offset(b, f, t, 0);
        let c = self.shape[3];
        &mut self.data[i..i + c]
    }

    pub fn map(&self, op: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| op(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Signed source index for a dilated tap, `None` when it falls in the padding.
#[inline]
fn tap(pos: usize, k: usize, half: usize, dilation: usize, len: usize) -> Option<usize> {
    let p = pos as isize + (k as isize - half as isize) * dilation as isize;
    (p >= 0 && (p as usize) < len).then_some(p as usize)
}

fn check_conv(input: &Tensor, kernel: &Tensor, bias: &[f64], dilation: (usize, usize)) -> Result<()> {
    let [kf, kt, cin, cout] = kernel.shape();
    if kf % 2 == 0 || kt % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel spatial dims must be odd, got {kf}x{kt}"
        )));
    }
    if input.shape()[3] != cin {
        return Err(Error::invalid(format!(
            "input has {} channels, kernel expects {cin}",
            input.shape()[3]
        )));
    }
    if bias.len() != cout {
        return Err(Error::invalid(format!(
            "bias has {} entries, kernel has {cout} output channels",
            bias.len()
        )));
    }
    if dilation.0 == 0 || dilation.1 == 0 {
        return Err(Error::invalid("dilation must be positive"));
    }
    Ok(())
}

/// Same-padded, dilated 2-D cross-correlation. `kernel` has shape
/// `(kf, kt, in_channels, out_channels)`; `dilation` is `(freq, time)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f64], dilation: (usize, usize)) -> Result<Tensor> {
    check_conv(input, kernel, bias, dilation)?;
    let [nb, nf, nt, _] = input.shape();
    let [kf, kt, cin, cout] = kernel.shape();
    let (df, dt) = dilation;
    let kd = kernel.data();
    let mut out = Tensor::zeros([nb, nf, nt, cout]);
    for b in 0..nb {
        for f in 0..nf {
            for t in 0..nt {
                let o = out.offset(b, f, t, 0);
                let acc = &mut out.data[o..o + cout];
                acc.copy_from_slice(bias);
                for i in 0..kf {
                    let Some(fi) = tap(f, i, kf / 2, df, nf) else { continue };
                    for j in 0..kt {
                        let Some(tj) = tap(t, j, kt / 2, dt, nt) else { continue };
                        let px = input.pixel(b, fi, tj);
                        let kblock = &kd[(i * kt + j) * cin * cout..(i * kt + j + 1) * cin * cout];
                        for (ci, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let row = &kblock[ci * cout..(ci + 1) * cout];
                            for (a, &w) in acc.iter_mut().zip(row) {
                                *a += v * w;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dilation: (usize, usize),
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let [nb, nf, nt, _] = input.shape();
    let [kf, kt, cin, cout] = kernel.shape();
    if grad_out.shape() != [nb, nf, nt, cout] {
        return Err(Error::invalid("conv2d gradient has the wrong shape"));
    }
    let (df, dt) = dilation;
    let kd = kernel.data();
    let mut g_in = Tensor::zeros(input.shape());
    let mut g_k = Tensor::zeros(kernel.shape());
    let mut g_b = vec![0.0; cout];
    for b in 0..nb {
        for f in 0..nf {
            for t in 0..nt {
                let g = grad_out.pixel(b, f, t);
                for (gb, &gv) in g_b.iter_mut().zip(g) {
                    *gb += gv;
                }
                for i in 0..kf {
                    let Some(fi) = tap(f, i, kf / 2, df, nf) else { continue };
                    for j in 0..kt {
                        let Some(tj) = tap(t, j, kt / 2, dt, nt) else { continue };
                        let base = (i * kt + j) * cin * cout;
                        let px_off = input.offset(b, fi, tj, 0);
                        for ci in 0..cin {
                            let x = input.data[px_off + ci];
                            let krow = &kd[base + ci * cout..base + (ci + 1) * cout];
                            let dot: f64 = krow.iter().zip(g).map(|(w, gv)| w * gv).sum();
                            g_in.data[px_off + ci] += dot;
                            if x != 0.0 {
                                let gk = &mut g_k.data[base + ci * cout..base + (ci + 1) * cout];
                                for (a, &gv) in gk.iter_mut().zip(g) {
                                    *a += x * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((g_in, g_k, g_b))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of relu given its output.
pub fn relu_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    let data = output
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: output.shape,
        data,
    }
}

/// 2x2 max pooling over frequency and time; also returns, per output
/// element, the flat input index that supplied the maximum.
pub fn maxpool2_indexed(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [nb, nf, nt, nc] = input.shape();
    if nf % 2 != 0 || nt % 2 != 0 {
        return Err(Error::invalid(format!(
            "max pooling needs even freq/time dims, got {nf}x{nt}"
        )));
    }
    let mut out = Tensor::zeros([nb, nf / 2, nt / 2, nc]);
    let mut arg = vec![0; out.len()];
    for b in 0..nb {
        for f in 0..nf / 2 {
            for t in 0..nt / 2 {
                for c in 0..nc {
                    let mut best = input.offset(b, 2 * f, 2 * t, c);
                    for (df, dt) in [(0, 1), (1, 0), (1, 1)] {
                        let i = input.offset(b, 2 * f + df, 2 * t + dt, c);
                        if input.data[i] > input.data[best] {
                            best = i;
                        }
                    }
                    let o = out.offset(b, f, t, c);
                    out.data[o] = input.data[best];
                    arg[o] = best;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    Ok(maxpool2_indexed(input)?.0)
}

pub fn maxpool2_backward(input_shape: [usize; 4], argmax: &[usize], grad: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &v) in argmax.iter().zip(&grad.data) {
        g.data[i] += v;
    }
    g
}

/// Nearest-neighbour 2x upsampling over frequency and time.
pub fn upsample2(input: &Tensor) -> Tensor {
    let [nb, nf, nt, nc] = input.shape();
    let mut out = Tensor::zeros([nb, 2 * nf, 2 * nt, nc]);
    for b in 0..nb {
        for f in 0..2 * nf {
            for t in 0..2 * nt {
                let src = input.offset(b, f / 2, t / 2, 0);
                let dst = out.offset(b, f, t, 0);
                out.data[dst..dst + nc].copy_from_slice(&input.data[src..src + nc]);
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let [nb, nf, nt, nc] = grad.shape();
    let mut g = Tensor::zeros([nb, nf / 2, nt / 2, nc]);
    for b in 0..nb {
        for f in 0..nf {
            for t in 0..nt {
                let src = grad.offset(b, f, t, 0);
                let dst = g.offset(b, f / 2, t / 2, 0);
                for c in 0..nc {
                    g.data[dst + c] += grad.data[src + c];
                }
            }
        }
    }
    g
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [nb, nf, nt, ca] = a.shape();
    let cb = b.shape()[3];
    if b.shape()[..3] != a.shape()[..3] {
        return Err(Error::invalid(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([nb, nf, nt, ca + cb]);
    for bi in 0..nb {
        for f in 0..nf {
            for t in 0..nt {
                let px = out.pixel_mut(bi, f, t);
                px[..ca].copy_from_slice(a.pixel(bi, f, t));
                px[ca..].copy_from_slice(b.pixel(bi, f, t));
            }
        }
    }
    Ok(out)
}

/// Splits a concatenated gradient back into its `[a, b]` parts.
pub fn split_channels(grad: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [nb, nf, nt, nc] = grad.shape();
    let mut a = Tensor::zeros([nb, nf, nt, ca]);
    let mut b = Tensor::zeros([nb, nf, nt, nc - ca]);
    for bi in 0..nb {
        for f in 0..nf {
            for t in 0..nt {
                let px = grad.pixel(bi, f, t);
                a.pixel_mut(bi, f, t).copy_from_slice(&px[..ca]);
                b.pixel_mut(bi, f, t).copy_from_slice(&px[ca..]);
            }
        }
    }
    (a, b)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
