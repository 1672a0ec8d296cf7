//! Plain-loop reference implementations used as test oracles. They share no
//! code with the library kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgsln_core::nn::ParamStore;
use sgsln_core::{Real, Tensor};

pub fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Dense NCHW array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct A {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl A {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }

    pub fn from<T: Real>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        let (h, w) = match s.len() {
            2 => (1, 1),
            3 => (1, s[2]),
            _ => (s[2], s[3]),
        };
        Self { n: s[0], c: s[1], h, w, d: t.data().iter().map(|v| v.f64()).collect() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        self.d[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { d: self.d.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn max_diff<T: Real>(&self, t: &Tensor<T>) -> f64 {
        assert_eq!(self.d.len(), t.numel());
        self.d.iter().zip(t.data()).map(|(a, b)| (a - b.f64()).abs()).fold(0.0, f64::max)
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    store.get(id).data().to_vec()
}

/// Square-kernel convolution, padding k/2, replicate or zero border.
pub fn conv(x: &A, w: &[f64], b: Option<&[f64]>, cout: usize, k: usize, stride: usize, replicate: bool) -> A {
    let pad = (k / 2) as isize;
    let oh = (x.h + 2 * (k / 2) - k) / stride + 1;
    let ow = (x.w + 2 * (k / 2) - k) / stride + 1;
    let mut out = A::zeros(x.n, cout, oh, ow);
    for n in 0..x.n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut iy = (oy * stride + ky) as isize - pad;
                                let mut ix = (ox * stride + kx) as isize - pad;
                                if replicate {
                                    iy = iy.clamp(0, x.h as isize - 1);
                                    ix = ix.clamp(0, x.w as isize - 1);
                                } else if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w[((co * x.c + ci) * k + ky) * k + kx] * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc + b.map_or(0.0, |b| b[co]));
                }
            }
        }
    }
    out
}

pub fn group_norm(x: &A, gamma: &[f64], beta: &[f64], gs: usize) -> A {
    let mut out = x.clone();
    let hw = x.h * x.w;
    for n in 0..x.n {
        for g in 0..x.c / gs {
            let vals: Vec<f64> = (g * gs..(g + 1) * gs)
                .flat_map(|c| x.d[(n * x.c + c) * hw..(n * x.c + c + 1) * hw].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for c in g * gs..(g + 1) * gs {
                for i in 0..hw {
                    let j = (n * x.c + c) * hw + i;
                    out.d[j] = (x.d[j] - mean) * rstd * gamma[c] + beta[c];
                }
            }
        }
    }
    out
}

pub fn relu(x: &A) -> A {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &A) -> A {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn channels(x: &A, lo: usize, hi: usize) -> A {
    let mut out = A::zeros(x.n, hi - lo, x.h, x.w);
    for n in 0..x.n {
        for c in lo..hi {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(n, c - lo, y, xx, x.at(n, c, y, xx));
                }
            }
        }
    }
    out
}

pub fn concat(a: &A, b: &A) -> A {
    let mut out = A::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c + b.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    let v = if c < a.c { a.at(n, c, y, x) } else { b.at(n, c - a.c, y, x) };
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    out
}

pub fn interleave(a: &A, b: &A) -> A {
    let mut out = A::zeros(a.n, 2 * a.c, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    out.set(n, 2 * c, y, x, a.at(n, c, y, x));
                    out.set(n, 2 * c + 1, y, x, b.at(n, c, y, x));
                }
            }
        }
    }
    out
}

pub fn maxpool2(x: &A) -> A {
    let mut out = A::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h / 2 {
                for xx in 0..x.w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(n, c, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.set(n, c, y, xx, m);
                }
            }
        }
    }
    out
}

/// Align-corners-false bilinear ×2 upsampling from the source-coordinate formula.
pub fn upsample2(x: &A) -> A {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = A::zeros(x.n, x.c, oh, ow);
    let src = |o: usize, extent: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, s - i0 as f64)
    };
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                let (y0, y1, fy) = src(oy, x.h);
                for ox in 0..ow {
                    let (x0, x1, fx) = src(ox, x.w);
                    let top = x.at(n, c, y0, x0) * (1.0 - fx) + x.at(n, c, y0, x1) * fx;
                    let bot = x.at(n, c, y1, x0) * (1.0 - fx) + x.at(n, c, y1, x1) * fx;
                    out.set(n, c, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

/// Per-(n, c) spatial average and maximum.
pub fn spatial_stats(x: &A) -> (Vec<f64>, Vec<f64>) {
    let hw = x.h * x.w;
    let mut avg = Vec::new();
    let mut max = Vec::new();
    for p in 0..x.n * x.c {
        let s = &x.d[p * hw..(p + 1) * hw];
        avg.push(s.iter().sum::<f64>() / hw as f64);
        max.push(s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    (avg, max)
}

/// Per-pixel channel average and maximum maps, each `n × 1 × h × w`.
pub fn channel_stats(x: &A) -> (A, A) {
    let mut avg = A::zeros(x.n, 1, x.h, x.w);
    let mut max = A::zeros(x.n, 1, x.h, x.w);
    for n in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let vals: Vec<f64> = (0..x.c).map(|c| x.at(n, c, y, xx)).collect();
                avg.set(n, 0, y, xx, vals.iter().sum::<f64>() / x.c as f64);
                max.set(n, 0, y, xx, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    (avg, max)
}

/// Stepwise half-convolution unit with parameters under `prefix`.
pub fn hcu(store: &ParamStore<f64>, prefix: &str, x: &A, cout: usize, stride: usize) -> A {
    let half = x.c / 2;
    let xa = channels(x, 0, half);
    let xb = channels(x, half, x.c);
    let w = param(store, &format!("{prefix}.core.conv.weight"));
    let g = param(store, &format!("{prefix}.core.norm.gamma"));
    let b = param(store, &format!("{prefix}.core.norm.beta"));
    let gs = group_size(cout / 2);
    let processed = relu(&group_norm(&conv(&xa, &w, None, cout / 2, 3, stride, true), &g, &b, gs));
    let mut residual = if stride == 2 { maxpool2(&xb) } else { xb };
    if x.c != cout {
        let rw = param(store, &format!("{prefix}.residual.weight"));
        residual = conv(&residual, &rw, None, cout / 2, 1, 1, false);
    }
    interleave(&processed, &residual)
}

pub fn group_size(c: usize) -> usize {
    (1..=c.min(8)).rev().find(|g| c.is_multiple_of(*g)).unwrap()
}

pub fn conv_norm_relu(store: &ParamStore<f64>, prefix: &str, x: &A, cout: usize, stride: usize) -> A {
    let w = param(store, &format!("{prefix}.conv.weight"));
    let g = param(store, &format!("{prefix}.norm.gamma"));
    let b = param(store, &format!("{prefix}.norm.beta"));
    relu(&group_norm(&conv(x, &w, None, cout, 3, stride, true), &g, &b, group_size(cout)))
}
