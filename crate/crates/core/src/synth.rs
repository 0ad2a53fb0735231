//! Synthetic soft-labeled data with known class posteriors.
//!
//! Classes are equally likely isotropic Gaussians sharing one scale, so the
//! Bayes posterior is a softmax of `-||x - mu_c||^2 / (2 scale^2)`. Each
//! simulated annotator draws one label from that posterior. A fixed subset
//! of samples is then shifted in feature space *after* annotation: the
//! annotators saw the unshifted stimulus, the model sees a shifted one.
//!
//! Sample `i` draws everything from the stream `(seed, [SYNTH_SAMPLE, i])`
//! in this order: class, then `feature_dim` standard normals, then
//! `annotators_k` uniforms for the votes. The shifted subset is the first
//! `round(ood_fraction * N)` entries of a Fisher-Yates shuffle of `0..N`
//! driven by `(seed, [SYNTH_OOD])`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::mlp::softmax;
use crate::rng::{self, domain};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// One mean vector per class.
    pub component_means: Vec<Vec<f64>>,
    pub component_scale: f64,
    pub annotators_k: u32,
    #[serde(default)]
    pub ood_fraction: f64,
    /// Added to the features of shifted samples; may be empty when
    /// `ood_fraction` is 0.
    #[serde(default)]
    pub ood_shift: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    /// Class means evenly spaced on a circle of `radius` in the first two
    /// feature dimensions; remaining dimensions are pure noise.
    pub fn circle(
        n_samples: usize,
        n_classes: usize,
        feature_dim: usize,
        radius: f64,
        component_scale: f64,
        annotators_k: u32,
        seed: u64,
    ) -> Self {
        let component_means = (0..n_classes)
            .map(|c| {
                let angle = std::f64::consts::TAU * c as f64 / n_classes as f64;
                let mut mu = vec![0.0; feature_dim];
                mu[0] = radius * angle.cos();
                if feature_dim > 1 {
                    mu[1] = radius * angle.sin();
                }
                mu
            })
            .collect();
        Self {
            n_samples,
            n_classes,
            feature_dim,
            component_means,
            component_scale,
            annotators_k,
            ood_fraction: 0.0,
            ood_shift: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.annotators_k == 0 {
            return bad("annotators_k must be at least 1".into());
        }
        if !(self.component_scale > 0.0 && self.component_scale.is_finite()) {
            return bad("component_scale must be positive".into());
        }
        if self.component_means.len() != self.n_classes {
            return bad(format!(
                "expected {} component means, found {}",
                self.n_classes,
                self.component_means.len()
            ));
        }
        if self
            .component_means
            .iter()
            .any(|m| m.len() != self.feature_dim || m.iter().any(|v| !v.is_finite()))
        {
            return bad(format!(
                "every component mean needs {} finite entries",
                self.feature_dim
            ));
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad("ood_fraction must be in [0, 1)".into());
        }
        if self.ood_fraction > 0.0 && self.ood_shift.len() != self.feature_dim {
            return bad(format!("ood_shift needs {} entries", self.feature_dim));
        }
        Ok(())
    }

    pub fn n_ood(&self) -> usize {
        (self.ood_fraction * self.n_samples as f64).round() as usize
    }
}

/// Bayes posterior over the equal-prior Gaussian components.
pub fn true_posterior(x: &[f64], config: &SynthConfig) -> Result<Vec<f64>> {
    if x.len() != config.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: config.feature_dim,
            got: x.len(),
        });
    }
    let two_var = 2.0 * config.component_scale * config.component_scale;
    let logits: Vec<f64> = config
        .component_means
        .iter()
        .map(|mu| {
            let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2 / two_var
        })
        .collect();
    softmax(&logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub features: Matrix,
    pub true_posteriors: Matrix,
    pub annotation_counts: Vec<Vec<u32>>,
    pub is_ood: Vec<bool>,
    /// Component each sample was drawn from.
    pub components: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:06}")
}

fn draw_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (c, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return c;
        }
    }
    probs.len() - 1
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let n = config.n_samples;
    let d = config.feature_dim;
    let mut features = Vec::with_capacity(n * d);
    let mut posteriors = Vec::with_capacity(n * config.n_classes);
    let mut counts = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = rng::stream(config.seed, &[domain::SYNTH_SAMPLE, i as u64]);
        let class = rng.random_range(0..config.n_classes);
        let x: Vec<f64> = config.component_means[class]
            .iter()
            .map(|mu| {
                let z: f64 = rng.sample(StandardNormal);
                mu + config.component_scale * z
            })
            .collect();
        let posterior = true_posterior(&x, config)?;
        let mut votes = vec![0u32; config.n_classes];
        for _ in 0..config.annotators_k {
            votes[draw_categorical(&mut rng, &posterior)] += 1;
        }
        features.extend(x);
        posteriors.extend(posterior);
        counts.push(votes);
        components.push(class);
    }

    let mut is_ood = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(config.seed, &[domain::SYNTH_OOD]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for &i in &order[..config.n_ood()] {
        is_ood[i] = true;
        for (f, s) in features[i * d..(i + 1) * d]
            .iter_mut()
            .zip(&config.ood_shift)
        {
            *f += s;
        }
    }

    Ok(SynthDataset {
        features: Matrix::new(n, d, features)?,
        true_posteriors: Matrix::new(n, config.n_classes, posteriors)?,
        annotation_counts: counts,
        is_ood,
        components,
        sample_ids: (0..n).map(sample_id).collect(),
    })
}
