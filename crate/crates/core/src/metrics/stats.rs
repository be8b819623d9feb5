//! ANOVA and the special functions behind its p-values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Survival function `P(F > f)` of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    inc_beta(d2 / (d2 + d1 * f), d2 / 2.0, d1 / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub f: f64,
    pub p: f64,
    pub df_between: f64,
    pub df_within: f64,
    pub ss_between: f64,
    pub ss_within: f64,
}

/// Ordinary one-way ANOVA.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaTable> {
    if groups.len() < 2 {
        return Err(Error::DegenerateGroups("need at least two groups".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::DegenerateGroups(format!("group of size {} (need >= 2)", g.len())));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (mean - grand).powi(2);
        ss_within += g.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    let df_between = (groups.len() - 1) as f64;
    let df_within = (n - groups.len()) as f64;
    finish(ss_between, ss_within, df_between, df_within)
}

/// Repeated-measures one-way ANOVA: `conditions[c][s]` is subject `s` under condition `c`.
///
/// Subject (block) effects are removed from the error term. With two
/// conditions this is the paired comparison (F equals the paired t²).
pub fn repeated_measures_anova(conditions: &[Vec<f64>]) -> Result<AnovaTable> {
    let k = conditions.len();
    if k < 2 {
        return Err(Error::DegenerateGroups("need at least two conditions".into()));
    }
    let s = conditions[0].len();
    if s < 2 || conditions.iter().any(|c| c.len() != s) {
        return Err(Error::DegenerateGroups("conditions need the same >= 2 subjects".into()));
    }
    let grand = conditions.iter().flatten().sum::<f64>() / (k * s) as f64;
    let cond_means: Vec<f64> = conditions.iter().map(|c| c.iter().sum::<f64>() / s as f64).collect();
    let subj_means: Vec<f64> = (0..s).map(|j| conditions.iter().map(|c| c[j]).sum::<f64>() / k as f64).collect();
    let ss_cond: f64 = cond_means.iter().map(|m| s as f64 * (m - grand).powi(2)).sum();
    let mut ss_err = 0.0;
    for (c, cm) in conditions.iter().zip(&cond_means) {
        for (j, v) in c.iter().enumerate() {
            ss_err += (v - cm - subj_means[j] + grand).powi(2);
        }
    }
    finish(ss_cond, ss_err, (k - 1) as f64, ((k - 1) * (s - 1)) as f64)
}

fn finish(ss_between: f64, ss_within: f64, df_between: f64, df_within: f64) -> Result<AnovaTable> {
    let ms_within = ss_within / df_within;
    let ms_between = ss_between / df_between;
    let scale = ss_between.abs().max(ss_within.abs()).max(1.0);
    if ms_within <= 1e-14 * scale {
        if ss_between <= 1e-14 * scale {
            return Err(Error::DegenerateGroups("zero variance within and between groups".into()));
        }
        return Err(Error::DegenerateGroups("zero within-group variance".into()));
    }
    let f = ms_between / ms_within;
    let p = f_sf(f, df_between, df_within);
    Ok(AnovaTable { f, p, df_between, df_within, ss_between, ss_within })
}

/// Sample (n − 1) standard deviation.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn inc_beta_symmetry_and_closed_forms() {
        // I_x(1, 1) = x ; I_x(a, 1) = x^a
        for &x in &[0.1, 0.37, 0.8] {
            assert!((inc_beta(x, 1.0, 1.0) - x).abs() < 1e-12);
            assert!((inc_beta(x, 3.0, 1.0) - x.powi(3)).abs() < 1e-12);
            let (a, b) = (2.5, 4.0);
            assert!((inc_beta(x, a, b) + inc_beta(1.0 - x, b, a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_groups() {
        let g = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![1.0, 2.0, 3.0, 4.0, 5.0]];
        let t = one_way_anova(&g).unwrap();
        assert_eq!(t.f, 0.0);
        assert_eq!(t.p, 1.0);
    }

    #[test]
    fn shifted_groups_reference() {
        // Reference: between MS 2.5, within MS 2.5 -> F = 1 on (1, 8) df.
        let g = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0, 3.0, 4.0, 5.0, 6.0]];
        let t = one_way_anova(&g).unwrap();
        assert!((t.f - 1.0).abs() < 1e-12);
        assert!((t.p - 0.3465935070873342).abs() < 1e-9);
        assert!((t.ss_between / t.df_between - 2.5).abs() < 1e-12);
    }

    #[test]
    fn far_apart_groups() {
        let g = vec![vec![0.0, 0.1, -0.1, 0.05], vec![100.0, 100.1, 99.9, 100.05]];
        assert!(one_way_anova(&g).unwrap().p < 1e-6);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(one_way_anova(&[vec![1.0, 2.0]]).is_err());
        assert!(one_way_anova(&[vec![1.0], vec![2.0, 3.0]]).is_err());
        assert!(matches!(
            one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]),
            Err(Error::DegenerateGroups(_))
        ));
    }

    #[test]
    fn paired_matches_t_squared() {
        // paired t = 14.1421 on 4 df (reference), two-sided p = 1.4513e-4
        let a = vec![5.0, 6.0, 7.0, 8.0, 9.0];
        let d = [1.0, 1.2, 0.8, 1.1, 0.9];
        let b: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x - y).collect();
        let t = repeated_measures_anova(&[a, b]).unwrap();
        assert!((t.f - 14.142135623730951f64.powi(2)).abs() < 1e-8);
        assert!((t.p - 0.0001451281706131975).abs() < 1e-9);
        assert_eq!(t.df_within, 4.0);
    }

    #[test]
    fn sd_of_three() {
        assert!((sample_sd(&[0.70, 0.72, 0.74]) - 0.02).abs() < 1e-12);
        assert!((sample_sd(&[0.74, 0.70, 0.72]) - 0.02).abs() < 1e-12);
        assert_eq!(sample_sd(&[0.5, 0.5, 0.5]), 0.0);
    }
}
