//! Independent reference implementations and generators shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uncproxy_core::calibration::PairSample;
use uncproxy_core::linalg::Matrix;
use uncproxy_core::mlp::{
    flatten_params, loss, loss_and_gradient, sample_dropout_masks, unflatten_params, Activation,
    Batch, DropoutMasks, NetworkParams,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random point of the probability simplex; roughly one in four vectors
/// gets an exact zero entry.
pub fn random_simplex<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c)
        .map(|_| -rng.random::<f64>().max(1e-300).ln())
        .collect();
    if c > 1 && rng.random::<f64>() < 0.25 {
        let k = rng.random_range(0..c);
        v[k] = 0.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

// ---- calibration -------------------------------------------------------

pub fn random_pairs<R: Rng>(rng: &mut R, n: usize, c: usize) -> Vec<PairSample> {
    (0..n)
        .map(|i| PairSample {
            sample_id: format!("p{i}"),
            label_class: rng.random_range(0..c),
            pred_probs: random_simplex(rng, c),
        })
        .collect()
}

fn top(p: &PairSample) -> (usize, f64) {
    let mut best = 0;
    for c in 1..p.pred_probs.len() {
        if p.pred_probs[c] > p.pred_probs[best] {
            best = c;
        }
    }
    (best, p.pred_probs[best])
}

fn in_bin(v: f64, b: usize, bins: usize) -> bool {
    let lo = b as f64 / bins as f64;
    let hi = (b + 1) as f64 / bins as f64;
    if b + 1 == bins {
        v >= lo && v <= 1.0
    } else {
        v >= lo && v < hi
    }
}

/// Per-bin `(count, mean value, hit rate)` by scanning every pair for
/// every bin.
fn scan_bins(values: &[(f64, bool)], bins: usize) -> Vec<(usize, f64, f64)> {
    (0..bins)
        .map(|b| {
            let mut n = 0;
            let mut sum = 0.0;
            let mut hits = 0;
            for &(v, hit) in values {
                if in_bin(v, b, bins) {
                    n += 1;
                    sum += v;
                    if hit {
                        hits += 1;
                    }
                }
            }
            if n == 0 {
                (0, 0.0, 0.0)
            } else {
                (n, sum / n as f64, hits as f64 / n as f64)
            }
        })
        .collect()
}

pub fn ece_oracle(pairs: &[PairSample], bins: usize) -> f64 {
    let values: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| {
            let (k, conf) = top(p);
            (conf, k == p.label_class)
        })
        .collect();
    scan_bins(&values, bins)
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(n, conf, acc)| n as f64 / pairs.len() as f64 * (acc - conf).abs())
        .sum()
}

pub fn mce_oracle(pairs: &[PairSample], bins: usize) -> f64 {
    let values: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| {
            let (k, conf) = top(p);
            (conf, k == p.label_class)
        })
        .collect();
    scan_bins(&values, bins)
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(_, conf, acc)| (acc - conf).abs())
        .fold(0.0, f64::max)
}

pub fn sce_oracle(pairs: &[PairSample], bins: usize) -> f64 {
    let c = pairs[0].pred_probs.len();
    let mut total = 0.0;
    for class in 0..c {
        let values: Vec<(f64, bool)> = pairs
            .iter()
            .map(|p| (p.pred_probs[class], p.label_class == class))
            .collect();
        total += scan_bins(&values, bins)
            .iter()
            .filter(|b| b.0 > 0)
            .map(|&(n, conf, acc)| n as f64 / pairs.len() as f64 * (acc - conf).abs())
            .sum::<f64>();
    }
    total / c as f64
}

/// Adaptive error: ranks by (confidence, pair index), range `i` of `R`
/// holds `ceil((n - i) / R)` consecutive ranks.
pub fn adaptive_oracle(pairs: &[PairSample], ranges: usize, threshold: Option<f64>) -> f64 {
    let c = pairs[0].pred_probs.len();
    let mut total = 0.0;
    for class in 0..c {
        let mut idx: Vec<usize> = (0..pairs.len())
            .filter(|&i| threshold.is_none_or(|eps| pairs[i].pred_probs[class] > eps))
            .collect();
        if idx.is_empty() {
            continue;
        }
        // selection sort on (value, index)
        for a in 0..idx.len() {
            let mut m = a;
            for b in a + 1..idx.len() {
                let (vb, vm) = (
                    pairs[idx[b]].pred_probs[class],
                    pairs[idx[m]].pred_probs[class],
                );
                if vb < vm || (vb == vm && idx[b] < idx[m]) {
                    m = b;
                }
            }
            idx.swap(a, m);
        }
        let n = idx.len();
        let mut start = 0;
        for r in 0..ranges {
            let len = (n - r).div_ceil(ranges);
            if len == 0 {
                continue;
            }
            let slice = &idx[start..start + len];
            start += len;
            let conf = slice
                .iter()
                .map(|&i| pairs[i].pred_probs[class])
                .sum::<f64>()
                / len as f64;
            let acc = slice
                .iter()
                .filter(|&&i| pairs[i].label_class == class)
                .count() as f64
                / len as f64;
            total += (acc - conf).abs();
        }
    }
    total / (c * ranges) as f64
}

/// Pairs whose label matches the top class with probability equal to the
/// top-class confidence.
pub fn calibrated_pairs<R: Rng>(rng: &mut R, n: usize, c: usize) -> Vec<PairSample> {
    (0..n)
        .map(|i| {
            let probs = random_simplex(rng, c);
            let (k, conf) = top(&PairSample {
                sample_id: String::new(),
                label_class: 0,
                pred_probs: probs.clone(),
            });
            let label = if rng.random::<f64>() < conf {
                k
            } else {
                let mut other = rng.random_range(0..c - 1);
                if other >= k {
                    other += 1;
                }
                other
            };
            PairSample {
                sample_id: format!("p{i}"),
                label_class: label,
                pred_probs: probs,
            }
        })
        .collect()
}

// ---- network -----------------------------------------------------------

/// Forward pass written out with plain loops, independent of the library.
pub fn forward_oracle(params: &NetworkParams, x: &[f64], masks: Option<&DropoutMasks>) -> Vec<f64> {
    let mut h = x.to_vec();
    for (k, layer) in params.layers().iter().enumerate() {
        if let Some(m) = masks {
            let scale = 1.0 / (1.0 - m.p());
            for (v, &keep) in h.iter_mut().zip(m.layer(k)) {
                *v = if keep { *v * scale } else { 0.0 };
            }
        }
        let mut z = vec![0.0; layer.out_dim()];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut s = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                s += layer.weights.get(o, i) * hi;
            }
            *zo = match layer.activation {
                Activation::Relu => s.max(0.0),
                Activation::Identity => s,
            };
        }
        h = z;
    }
    h
}

pub fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Max relative error between the analytic gradient and central
/// differences with step `h`, on a 2-8-8-3 net with frozen masks.
pub fn gradient_check(seed: u64, h: f64) -> f64 {
    let params = NetworkParams::init(&[2, 8, 8, 3], seed).unwrap();
    let mut r = rng(seed ^ 0xA5A5);
    let xs: Vec<Vec<f64>> = (0..4)
        .map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])
        .collect();
    let ys: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(&mut r, 3)).collect();
    let masks: Vec<DropoutMasks> = (0..4)
        .map(|i| sample_dropout_masks(&params, 0.3, seed + 100 + i).unwrap())
        .collect();
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let batch = Batch {
        features: &xr,
        labels: &yr,
        masks: Some(&masks),
    };
    let wd = 1e-3;
    let (_, grads) = loss_and_gradient(&params, &batch, wd).unwrap();
    let analytic = grads.flatten();
    let theta = flatten_params(&params);
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        let lp = loss(&unflatten_params(&params, &plus).unwrap(), &batch, wd).unwrap();
        let lm = loss(&unflatten_params(&params, &minus).unwrap(), &batch, wd).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

pub fn matrix_of(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}
