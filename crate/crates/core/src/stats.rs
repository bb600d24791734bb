//! Two-sample comparison battery and regression-fit scores.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectBand {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectBand {
    pub fn of(d: f64) -> Self {
        let d = d.abs();
        if d < 0.2 {
            Self::Negligible
        } else if d < 0.5 {
            Self::Small
        } else if d < 0.8 {
            Self::Medium
        } else {
            Self::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Negligible => "negligible",
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }
}

/// `***` / `**` / `*` / `ns` at the 0.001 / 0.01 / 0.05 levels.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "ns"
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sum_sq_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

fn require(a: &[f64], b: &[f64], min: usize, what: &str) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(Error::Validation(format!(
            "{what} needs at least {min} values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("{what} received a non-finite value")));
    }
    Ok(())
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^{j-1} exp(-2 j² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    let mut prev = 0.0f64;
    for j in 1..=200 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev.abs() || term.abs() < 1e-300 {
            return (2.0 * sum).clamp(0.0, 1.0);
        }
        prev = term;
        sign = -sign;
    }
    // series failed to converge, which only happens as λ -> 0
    1.0
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    require(a, b, 1, "ks_test")?;
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let p = kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
    Ok(TestResult { statistic: d, p })
}

/// Student's two-sample t-test with pooled variance. The statistic is
/// `(mean_a - mean_b) / se`, so swapping the samples flips its sign.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    require(a, b, 2, "t_test")?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = (sum_sq_dev(a) + sum_sq_dev(b)) / df;
    if pooled <= 0.0 {
        return Err(Error::DegenerateVariance("both samples have zero variance".into()));
    }
    let t = (mean(a) - mean(b)) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 2");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TestResult { statistic: t, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub d: f64,
    pub band: EffectBand,
}

/// `|mean_a - mean_b|` over the pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<EffectSize> {
    require(a, b, 2, "cohens_d")?;
    let df = (a.len() + b.len()) as f64 - 2.0;
    let sd = ((sum_sq_dev(a) + sum_sq_dev(b)) / df).sqrt();
    if sd <= 0.0 {
        return Err(Error::DegenerateVariance("pooled standard deviation is zero".into()));
    }
    let d = (mean(a) - mean(b)).abs() / sd;
    Ok(EffectSize { d, band: EffectBand::of(d) })
}

/// The KS / t / Cohen's d bundle for one real-vs-generated comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub ks: TestResult,
    pub ks_marker: String,
    pub t: TestResult,
    pub t_marker: String,
    pub effect: EffectSize,
}

pub fn compare(a: &[f64], b: &[f64]) -> Result<StatsReport> {
    let ks = ks_test(a, b)?;
    let t = t_test(a, b)?;
    Ok(StatsReport {
        ks,
        ks_marker: significance_marker(ks.p).into(),
        t,
        t_marker: significance_marker(t.p).into(),
        effect: cohens_d(a, b)?,
    })
}

fn paired(targets: &[f64], observed: &[f64]) -> Result<()> {
    if targets.len() != observed.len() {
        return Err(Error::Validation(format!(
            "{} targets vs {} observations",
            targets.len(),
            observed.len()
        )));
    }
    if targets.len() < 2 {
        return Err(Error::Validation("need at least two (target, observed) pairs".into()));
    }
    Ok(())
}

/// Coefficient of determination of `observed` against the identity line
/// `observed = target`, normalised by the spread of the targets.
pub fn r_squared(targets: &[f64], observed: &[f64]) -> Result<f64> {
    paired(targets, observed)?;
    let ss_tot = sum_sq_dev(targets);
    if ss_tot <= 0.0 {
        return Err(Error::DegenerateVariance("targets have zero variance".into()));
    }
    let ss_res: f64 = targets.iter().zip(observed).map(|(t, o)| (o - t) * (o - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(targets: &[f64], observed: &[f64]) -> Result<f64> {
    if targets.len() != observed.len() || targets.is_empty() {
        return Err(Error::Validation("mae needs equal, non-empty samples".into()));
    }
    Ok(targets.iter().zip(observed).map(|(t, o)| (o - t).abs()).sum::<f64>() / targets.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    paired(a, b)?;
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let denom = (sum_sq_dev(&ra) * sum_sq_dev(&rb)).sqrt();
    if denom == 0.0 {
        return Err(Error::DegenerateVariance("constant sample in spearman".into()));
    }
    Ok(cov / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ks_examples() {
        assert_eq!(ks_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap().statistic, 0.0);
        assert_eq!(ks_test(&[0.0, 0.0], &[1.0, 1.0]).unwrap().statistic, 1.0);
        assert_eq!(ks_test(&[1.0, 2.0], &[1.5, 2.5]).unwrap().statistic, 0.5);
        assert!(ks_test(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_p_matches_tabulated_kolmogorov() {
        // Q(1.36) ~= 0.05 and Q(1.63) ~= 0.01 from standard tables.
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 5e-4);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 5e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn t_examples() {
        let same = t_test(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert!((same.p - 1.0).abs() < 1e-12);
        let r = t_test(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((r.statistic.abs() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(t_test(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn cohens_examples() {
        let e = cohens_d(&[1.0, 3.0], &[1.0, 3.0]).unwrap();
        assert_eq!((e.d, e.band), (0.0, EffectBand::Negligible));
        let e = cohens_d(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((e.d - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.band, EffectBand::Medium);
        assert_eq!(EffectBand::of(0.85), EffectBand::Large);
        assert_eq!(EffectBand::of(0.19999), EffectBand::Negligible);
        assert_eq!(EffectBand::of(0.2), EffectBand::Small);
        assert_eq!(EffectBand::of(0.8), EffectBand::Large);
    }

    #[test]
    fn markers() {
        assert_eq!(significance_marker(0.0005), "***");
        assert_eq!(significance_marker(0.005), "**");
        assert_eq!(significance_marker(0.03), "*");
        assert_eq!(significance_marker(0.602), "ns");
    }

    #[test]
    fn fit_scores() {
        let t = [0.1, 0.2, 0.3];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert!(r_squared(&t, &[0.2, 0.2, 0.2]).unwrap().abs() < 1e-12);
        assert!((mae(&t, &[0.12, 0.19, 0.33]).unwrap() - 0.02).abs() < 1e-12);
        assert!(r_squared(&[0.2, 0.2], &[0.1, 0.3]).is_err());
    }

    #[test]
    fn spearman_signs() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 2..30)
    }

    proptest! {
        #[test]
        fn ks_symmetric_and_bounded(a in sample(), b in sample()) {
            let ab = ks_test(&a, &b).unwrap();
            let ba = ks_test(&b, &a).unwrap();
            prop_assert_eq!(ab.statistic, ba.statistic);
            prop_assert!((0.0..=1.0).contains(&ab.statistic));
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }

        #[test]
        fn t_antisymmetric_d_symmetric(a in sample(), b in sample()) {
            if let (Ok(ab), Ok(ba)) = (t_test(&a, &b), t_test(&b, &a)) {
                prop_assert!((ab.statistic + ba.statistic).abs() <= 1e-9 * ab.statistic.abs().max(1.0));
                prop_assert!((ab.p - ba.p).abs() < 1e-12);
                let (x, y) = (cohens_d(&a, &b).unwrap(), cohens_d(&b, &a).unwrap());
                prop_assert!((x.d - y.d).abs() < 1e-12);
            }
        }
    }
}
