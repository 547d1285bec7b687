//! Brute-force reference implementations, written for clarity rather than
//! speed and sharing no code with the library.
#![allow(clippy::needless_range_loop)]

use dereverb_core::network::Tensor;

/// `out[b,f,t,o] = bias[o] + sum k[i,j,c,o] * x[b, f + df(i - kf/2), t + dt(j - kt/2), c]`,
/// with out-of-range taps reading zero.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: &[f64], (df, dt): (usize, usize)) -> Tensor {
    let [nb, nf, nt, cin] = x.shape();
    let [kf, kt, _, cout] = k.shape();
    let mut out = Tensor::zeros([nb, nf, nt, cout]);
    for b in 0..nb {
        for f in 0..nf {
            for t in 0..nt {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for i in 0..kf {
                        for j in 0..kt {
                            let fi = f as i64 + df as i64 * (i as i64 - kf as i64 / 2);
                            let tj = t as i64 + dt as i64 * (j as i64 - kt as i64 / 2);
                            if fi < 0 || tj < 0 || fi >= nf as i64 || tj >= nt as i64 {
                                continue;
                            }
                            for c in 0..cin {
                                acc += k.get(i, j, c, o) * x.get(b, fi as usize, tj as usize, c);
                            }
                        }
                    }
                    out.set(b, f, t, o, acc);
                }
            }
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn maxpool2(x: &Tensor) -> Tensor {
    let [nb, nf, nt, nc] = x.shape();
    let mut out = Tensor::zeros([nb, nf / 2, nt / 2, nc]);
    for b in 0..nb {
        for f in 0..nf / 2 {
            for t in 0..nt / 2 {
                for c in 0..nc {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, d)| x.get(b, 2 * f + a, 2 * t + d, c))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.set(b, f, t, c, m);
                }
            }
        }
    }
    out
}

pub fn tcn(x: &Tensor, layers: &[(Tensor, Vec<f64>); 4]) -> Tensor {
    let mut h = x.clone();
    for ((k, bias), d) in layers.iter().zip([1, 2, 4, 8]) {
        h = relu(&conv2d(&h, k, bias, (1, d)));
    }
    let data = h.data().iter().zip(x.data()).map(|(a, b)| a + b).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Row-major `rows x cols` matrix.
pub struct Matrix<'a> {
    pub data: &'a [f64],
    pub cols: usize,
}

impl Matrix<'_> {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Self-attention over time frames. Token `t` lists the features of frame
/// `t` frequency-major: `x[b, 0, t, 0..C], x[b, 1, t, 0..C], ...`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    x: &Tensor,
    heads: usize,
    key_dim: usize,
    (wq, bq): (Matrix<'_>, &[f64]),
    (wk, bk): (Matrix<'_>, &[f64]),
    (wv, bv): (Matrix<'_>, &[f64]),
    (wo, bo): (Matrix<'_>, &[f64]),
) -> Tensor {
    let [nb, nf, nt, nc] = x.shape();
    let d = nf * nc;
    let inner = heads * key_dim;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..nb {
        let token = |t: usize, i: usize| x.get(b, i / nc, t, i % nc);
        let project = |w: &Matrix<'_>, bias: &[f64]| -> Vec<Vec<f64>> {
            (0..nt)
                .map(|t| {
                    (0..inner)
                        .map(|j| bias[j] + (0..d).map(|i| token(t, i) * w.at(i, j)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (project(&wq, bq), project(&wk, bk), project(&wv, bv));
        let mut concat = vec![vec![0.0; inner]; nt];
        for h in 0..heads {
            let cols = h * key_dim..(h + 1) * key_dim;
            for (i, row) in concat.iter_mut().enumerate() {
                let scores: Vec<f64> = (0..nt)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (key_dim as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in cols.clone() {
                    row[c] = (0..nt).map(|j| scores[j].exp() / z * v[j][c]).sum();
                }
            }
        }
        for (t, row) in concat.iter().enumerate() {
            for i in 0..d {
                let y = bo[i] + (0..inner).map(|j| row[j] * wo.at(j, i)).sum::<f64>() + token(t, i);
                out.set(b, i / nc, t, i % nc, y);
            }
        }
    }
    out
}
