//! Scalar f64 reference implementations shared by the integration tests.
#![allow(dead_code)]

use growlength::model::ModelParams;
use growlength::rope::RopeScaling;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(data: &[f32], cols: usize) -> Mat {
    data.chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let n = w[0].len();
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| b[j] + row.iter().zip(w).map(|(xv, wr)| xv * wr[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * rstd * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Adjacent-pair rotation at `pos` with angles computed directly from the base.
pub fn rotate(x: &[f64], pos: usize, base: f64, scaling: RopeScaling) -> Vec<f64> {
    let hd = x.len();
    let p = match scaling {
        RopeScaling::None => pos as f64,
        RopeScaling::Interpolation { factor } => pos as f64 / factor,
    };
    let mut out = x.to_vec();
    for i in 0..hd / 2 {
        let theta = (-((2 * i) as f64) / hd as f64 * base.ln()).exp();
        let (s, c) = (p * theta).sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

/// Parameters as f64 copies in canonical order.
pub fn params_f64(p: &ModelParams) -> Vec<Vec<f64>> {
    p.tensors().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect()
}

fn mat(v: &[f64], cols: usize) -> Mat {
    v.chunks(cols).map(|r| r.to_vec()).collect()
}

/// Full model forward for one sequence: logits `[T][V]`.
pub fn logits(p: &ModelParams, w: &[Vec<f64>], tokens: &[u32]) -> Mat {
    let c = &p.config;
    let (d, f, v, hd) = (c.d_model, c.ffn_dim(), c.vocab_size, c.head_dim);
    let t_len = tokens.len();
    let emb = mat(&w[0], d);
    let mut x: Mat = tokens.iter().map(|&id| emb[id as usize].clone()).collect();
    for l in 0..c.n_layers {
        let o = 1 + 16 * l;
        let h = layer_norm(&x, &w[o], &w[o + 1]);
        let q = linear(&h, &mat(&w[o + 2], d), &w[o + 3]);
        let k = linear(&h, &mat(&w[o + 4], d), &w[o + 5]);
        let vv = linear(&h, &mat(&w[o + 6], d), &w[o + 7]);
        let mut att = vec![vec![0.0; d]; t_len];
        for head in 0..c.n_heads {
            let sl = head * hd..(head + 1) * hd;
            let qs: Vec<Vec<f64>> =
                (0..t_len).map(|t| rotate(&q[t][sl.clone()], t, c.rope.base, c.rope.scaling)).collect();
            let ks: Vec<Vec<f64>> =
                (0..t_len).map(|t| rotate(&k[t][sl.clone()], t, c.rope.base, c.rope.scaling)).collect();
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| qs[t].iter().zip(&ks[s]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let pr = softmax(&scores);
                for (s, ps) in pr.iter().enumerate() {
                    for j in 0..hd {
                        att[t][head * hd + j] += ps * vv[s][head * hd + j];
                    }
                }
            }
        }
        let proj = linear(&att, &mat(&w[o + 8], d), &w[o + 9]);
        for t in 0..t_len {
            for j in 0..d {
                x[t][j] += proj[t][j];
            }
        }
        let h = layer_norm(&x, &w[o + 10], &w[o + 11]);
        let mut hid = linear(&h, &mat(&w[o + 12], f), &w[o + 13]);
        hid.iter_mut().flatten().for_each(|z| *z = gelu(*z));
        let out = linear(&hid, &mat(&w[o + 14], d), &w[o + 15]);
        for t in 0..t_len {
            for j in 0..d {
                x[t][j] += out[t][j];
            }
        }
    }
    let n = w.len();
    let x = layer_norm(&x, &w[n - 4], &w[n - 3]);
    linear(&x, &mat(&w[n - 2], v), &w[n - 1])
}

/// Mean next-token cross-entropy of one sequence.
pub fn loss(p: &ModelParams, w: &[Vec<f64>], inputs: &[u32], targets: &[u32]) -> f64 {
    let lg = logits(p, w, inputs);
    cross_entropy(&lg, targets)
}

pub fn cross_entropy(logits: &Mat, targets: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / targets.len() as f64
}

/// Central difference of `f` with respect to `w[i][j]`.
pub fn central_difference<F: Fn(&[Vec<f64>]) -> f64>(w: &mut [Vec<f64>], i: usize, j: usize, h: f64, f: F) -> f64 {
    let orig = w[i][j];
    w[i][j] = orig + h;
    let up = f(w);
    w[i][j] = orig - h;
    let down = f(w);
    w[i][j] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < 1e-5 || diff / analytic.abs().max(numeric.abs()) < 1e-3
}
