//! Divergences, significance tests, accuracy and selective prediction.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::calibration::sort_by_uncertainty;
use crate::{argmax, Error, Result, PROB_FLOOR};

fn check_same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::EmptyInput("probability vector"));
    }
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `KL(p || q)` in nats, `q` clipped at [`PROB_FLOOR`], `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(PROB_FLOOR)).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, bounded by `ln 2`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * (kl_unchecked(p, &m) + kl_unchecked(q, &m))).max(0.0))
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of freedom,
/// `P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample Pearson correlation with a two-sided t-test p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "pearson needs at least 3 points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("pearson inputs must be finite".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        student_t_two_sided_p(t, df)
    };
    Ok(CorrelationResult { r, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

impl TTestResult {
    /// One-sided p-value for the alternative "first mean is greater".
    pub fn p_greater(&self) -> f64 {
        if self.t_statistic > 0.0 {
            0.5 * self.p_value
        } else {
            1.0 - 0.5 * self.p_value
        }
    }
}

fn sample_variance(values: &[f64], m: f64) -> f64 {
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Paired-samples t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let var = sample_variance(&diffs, m);
    if var.is_nan() || var <= 0.0 {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let df = (n - 1) as f64;
    let t_statistic = m / (var.sqrt() / (n as f64).sqrt());
    Ok(TTestResult {
        t_statistic,
        df,
        p_value: student_t_two_sided_p(t_statistic, df),
    })
}

/// Welch's unequal-variance t-test for two independent groups.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput(
            "each group needs at least 2 values".into(),
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (
        sample_variance(a, ma) / a.len() as f64,
        sample_variance(b, mb) / b.len() as f64,
    );
    if (va + vb).is_nan() || va + vb <= 0.0 {
        return Err(Error::Degenerate("both groups have zero variance".into()));
    }
    let t_statistic = (ma - mb) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    Ok(TTestResult {
        t_statistic,
        df,
        p_value: student_t_two_sided_p(t_statistic, df),
    })
}

fn check_aligned<A: AsRef<[f64]>, B: AsRef<[f64]>>(predictions: &[A], labels: &[B]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    Ok(())
}

fn hits<A: AsRef<[f64]>, B: AsRef<[f64]>>(predictions: &[A], labels: &[B], idx: &[usize]) -> usize {
    idx.iter()
        .filter(|&&i| argmax(predictions[i].as_ref()) == argmax(labels[i].as_ref()))
        .count()
}

fn percent(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64 * 100.0
}

/// Percentage of samples whose predicted top class equals the annotated
/// top class (lowest index wins ties on both sides).
pub fn accuracy<A: AsRef<[f64]>, B: AsRef<[f64]>>(predictions: &[A], labels: &[B]) -> Result<f64> {
    check_aligned(predictions, labels)?;
    let all: Vec<usize> = (0..predictions.len()).collect();
    Ok(percent(hits(predictions, labels, &all), all.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub coverage: f64,
    pub accuracy: f64,
    pub n_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub points: Vec<RejectionPoint>,
}

/// Accuracy on the `round(q N)` least-uncertain samples for each coverage
/// `q` (ties by sample index, rounding half away from zero). Coverages are
/// sorted and deduplicated.
pub fn rejection_curve<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    predictions: &[A],
    labels: &[B],
    uncertainties: &[f64],
    coverages: &[f64],
) -> Result<RejectionCurve> {
    check_aligned(predictions, labels)?;
    if uncertainties.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: uncertainties.len(),
        });
    }
    let mut qs = coverages.to_vec();
    if let Some(&bad) = qs.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return Err(Error::InvalidCoverage(bad));
    }
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    let order = sort_by_uncertainty(uncertainties)?;
    let n = predictions.len();
    let points = qs
        .into_iter()
        .map(|coverage| {
            let n_kept = (coverage * n as f64).round() as usize;
            if n_kept == 0 {
                return Err(Error::InvalidCoverage(coverage));
            }
            Ok(RejectionPoint {
                coverage,
                accuracy: percent(hits(predictions, labels, &order[..n_kept]), n_kept),
                n_kept,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RejectionCurve { points })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extremes {
    /// Ascending uncertainty.
    pub lowest: Vec<String>,
    /// Descending uncertainty.
    pub highest: Vec<String>,
}

/// The `k` least and most uncertain sample ids; ties go to the lower
/// sample index in both lists.
pub fn rank_extremes(ids: &[String], uncertainties: &[f64], k: usize) -> Result<Extremes> {
    if ids.len() != uncertainties.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: uncertainties.len(),
        });
    }
    if k > ids.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds {} samples",
            ids.len()
        )));
    }
    let ascending = sort_by_uncertainty(uncertainties)?;
    let mut descending: Vec<usize> = (0..ids.len()).collect();
    descending.sort_by(|&a, &b| uncertainties[b].total_cmp(&uncertainties[a]));
    let pick = |idx: &[usize]| idx[..k].iter().map(|&i| ids[i].clone()).collect();
    Ok(Extremes {
        lowest: pick(&ascending),
        highest: pick(&descending),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        // q = 0 where p > 0 is clipped, not infinite
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = pearson(&x, &y).unwrap();
        assert!((r.r - 1.0).abs() < 1e-15);
        assert_eq!(r.p_value, 0.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 10]), Err(Error::Degenerate(_))));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn paired_ttest_examples() {
        let b = [1.0, 2.5, 3.0, 4.5, 2.0];
        let a_up: Vec<f64> = b
            .iter()
            .zip([0.9, 1.1, 1.0, 1.2, 0.8])
            .map(|(x, d)| x + d)
            .collect();
        assert!(paired_ttest(&a_up, &b).unwrap().t_statistic > 0.0);
        let a_down: Vec<f64> = b
            .iter()
            .zip([0.9, 1.1, 1.0, 1.2, 0.8])
            .map(|(x, d)| x - d)
            .collect();
        assert!(paired_ttest(&a_down, &b).unwrap().t_statistic < 0.0);
        assert!(matches!(paired_ttest(&b, &b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn welch_detects_shift() {
        let a: Vec<f64> = (0..30).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..40).map(|i| (i % 5) as f64 * 0.1).collect();
        let t = welch_ttest(&a, &b).unwrap();
        assert!(t.t_statistic > 0.0);
        assert!(t.p_greater() < 1e-6);
        assert!(welch_ttest(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let labels = vec![
            vec![1.0, 0.0],
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.3, 0.7],
        ];
        assert_eq!(accuracy(&labels, &labels).unwrap(), 100.0);
        let uniform = vec![vec![0.25; 4]; 3];
        let one_hot0 = vec![vec![1.0, 0.0, 0.0, 0.0]; 3];
        assert_eq!(accuracy(&uniform, &one_hot0).unwrap(), 100.0);
        let preds = vec![
            vec![0.9, 0.1],
            vec![0.1, 0.9],
            vec![0.7, 0.3],
            vec![0.8, 0.2],
        ];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 75.0);
        assert!(accuracy::<Vec<f64>, Vec<f64>>(&[], &[]).is_err());
    }

    #[test]
    fn rejection_examples() {
        let labels = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let preds = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.6, 0.4],
            vec![0.3, 0.7],
        ];
        let full = rejection_curve(&preds, &labels, &[0.1, 0.9, 0.2, 0.3], &[1.0]).unwrap();
        assert_eq!(full.points[0].accuracy, accuracy(&preds, &labels).unwrap());

        // constant uncertainty: first round(qN) samples by index are kept
        let c = rejection_curve(&preds, &labels, &[0.5; 4], &[0.5, 0.25]).unwrap();
        assert_eq!(c.points[0].coverage, 0.25);
        assert_eq!(c.points[0].n_kept, 1);
        assert_eq!(c.points[1].n_kept, 2);
        assert_eq!(c.points[1].accuracy, 50.0);

        // dropping the most uncertain (wrong) sample helps
        let r = rejection_curve(&preds, &labels, &[0.1, 0.9, 0.2, 0.3], &[0.75]).unwrap();
        assert_eq!(r.points[0].accuracy, 100.0);

        assert!(matches!(
            rejection_curve(&preds, &labels, &[0.5; 4], &[0.1]),
            Err(Error::InvalidCoverage(_))
        ));
        assert!(rejection_curve(&preds, &labels, &[0.5; 4], &[1.5]).is_err());
        assert!(rejection_curve(&preds, &labels, &[0.5; 4], &[0.0]).is_err());
    }

    #[test]
    fn round_half_away_from_zero_for_kept_sizes() {
        let labels = vec![vec![1.0, 0.0]; 10];
        let c = rejection_curve(&labels, &labels, &[0.0; 10], &[0.25, 0.35]).unwrap();
        assert_eq!(c.points[0].n_kept, 3); // 2.5 -> 3
        assert_eq!(c.points[1].n_kept, 4); // 3.5 -> 4
    }

    #[test]
    fn extremes() {
        let ids: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let e = rank_extremes(&ids, &[0.4, 0.1, 0.9, 0.4], 2).unwrap();
        assert_eq!(e.lowest, vec!["b", "a"]);
        assert_eq!(e.highest, vec!["c", "a"]);
        let all = rank_extremes(&ids, &[0.4, 0.1, 0.9, 0.4], 4).unwrap();
        let mut sorted = all.highest.clone();
        sorted.sort();
        assert_eq!(sorted, ids);
        assert!(rank_extremes(&ids, &[0.0; 4], 5).is_err());
    }
}
