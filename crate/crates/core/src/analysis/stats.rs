//! Summary statistics for reports: mean and SEM, Pearson correlation with a
//! Student-t p-value, Spearman rank correlation, median-quadrant classes.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Unbiased sample standard deviation over `sqrt(n)`; `None` when `n < 2`.
    pub sem: Option<f64>,
    pub n: usize,
}

pub fn mean_sem(values: &[f64]) -> Result<MeanSem> {
    if values.is_empty() {
        return Err(Error::Undefined("mean of an empty sample".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Ok(MeanSem { mean, sem, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

impl Correlation {
    /// Significance marker used in text reports.
    pub fn stars(&self) -> &'static str {
        if self.p < 0.001 {
            "*"
        } else {
            ""
        }
    }
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("correlation inputs", x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::Undefined(format!("correlation needs n >= 3, got {}", x.len())));
    }
    let (cx, cy) = (centered(x), centered(y));
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let syy: f64 = cy.iter().map(|v| v * v).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a zero-variance argument".into()));
    }
    let sxy: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` under the null, via `t = r sqrt((n-2)/(1-r²))`
/// with `n - 2` degrees of freedom.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let r = pearson_r(x, y)?;
    Ok(Correlation {
        r,
        p: pearson_p_value(r, x.len()),
        n: x.len(),
    })
}

/// Pearson `r` with a two-sided permutation p-value.
pub fn pearson_permutation(x: &[f64], y: &[f64], resamples: usize, rng: &mut Rng) -> Result<Correlation> {
    let r = pearson_r(x, y)?;
    let mut perm = y.to_vec();
    let mut extreme = 0usize;
    for _ in 0..resamples {
        rng.shuffle(&mut perm);
        if pearson_r(x, &perm)?.abs() >= r.abs() - 1e-15 {
            extreme += 1;
        }
    }
    Ok(Correlation {
        r,
        p: (1 + extreme) as f64 / (1 + resamples) as f64,
        n: x.len(),
    })
}

/// 1-based ranks with ties sharing their mid-rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = mid;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape("correlation inputs", x.len(), y.len()));
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("median of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Prompt-dependence class: ambiguity sign, then sensitivity sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    PlusPlus,
    PlusMinus,
    MinusPlus,
    MinusMinus,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::PlusPlus,
        Quadrant::PlusMinus,
        Quadrant::MinusPlus,
        Quadrant::MinusMinus,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Quadrant::PlusPlus => "+/+",
            Quadrant::PlusMinus => "+/-",
            Quadrant::MinusPlus => "-/+",
            Quadrant::MinusMinus => "-/-",
        }
    }

    fn from_signs(ambiguous: bool, sensitive: bool) -> Self {
        match (ambiguous, sensitive) {
            (true, true) => Quadrant::PlusPlus,
            (true, false) => Quadrant::PlusMinus,
            (false, true) => Quadrant::MinusPlus,
            (false, false) => Quadrant::MinusMinus,
        }
    }
}

impl Serialize for Quadrant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Quadrant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Quadrant::ALL
            .into_iter()
            .find(|q| q.label() == s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown quadrant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantSummary {
    pub quadrant: Quadrant,
    pub count: usize,
    pub mean_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantTable {
    pub median_u_amb: f64,
    pub median_delta_star: f64,
    pub labels: Vec<Quadrant>,
    pub classes: Vec<QuadrantSummary>,
}

/// "+" ambiguity: `U_amb` above its median. "+" sensitivity: `δ*` below its
/// median (a small margin means a sensitive prompt). Ties go to "-".
pub fn quadrant_classes(u_amb: &[f64], delta_star: &[f64], dice: &[f64]) -> Result<QuadrantTable> {
    if u_amb.len() != delta_star.len() || u_amb.len() != dice.len() {
        return Err(Error::shape(
            "quadrant inputs",
            u_amb.len(),
            format!("{} / {}", delta_star.len(), dice.len()),
        ));
    }
    if u_amb.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "quadrant classes need >= 4 rows, got {}",
            u_amb.len()
        )));
    }
    let mu = median(u_amb)?;
    let md = median(delta_star)?;
    let labels: Vec<Quadrant> = u_amb
        .iter()
        .zip(delta_star)
        .map(|(&u, &d)| Quadrant::from_signs(u > mu, d < md))
        .collect();
    let classes = Quadrant::ALL
        .iter()
        .map(|&q| {
            let members: Vec<f64> = labels
                .iter()
                .zip(dice)
                .filter(|(l, _)| **l == q)
                .map(|(_, &d)| d)
                .collect();
            QuadrantSummary {
                quadrant: q,
                count: members.len(),
                mean_dice: (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64),
            }
        })
        .collect();
    Ok(QuadrantTable {
        median_u_amb: mu,
        median_delta_star: md,
        labels,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    /// Two-sided tail of Student's t by Simpson integration of the density.
    fn t_two_sided(t: f64, df: f64) -> f64 {
        let c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn perfect_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-15);
        assert!(c.p < 1e-12);
    }

    #[test]
    fn small_hand_example() {
        let c = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        // Σdxdy = 8, Sxx = Syy = 10.
        assert!((c.r - 0.8).abs() < 1e-15);
        let t = 0.8 * (3.0f64 / (1.0 - 0.64)).sqrt();
        assert!((c.p - t_two_sided(t, 3.0)).abs() < 1e-6, "{}", c.p);
        let t7 = 0.7 * (3.0f64 / (1.0 - 0.49)).sqrt();
        let p7 = pearson_p_value(0.7, 5);
        assert!((p7 - t_two_sided(t7, 3.0)).abs() < 1e-6);
        assert!((p7 - 0.188).abs() < 1e-3, "{p7}");
    }

    #[test]
    fn null_correlations_are_small() {
        let mut ok = 0;
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let x: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
            let c = pearson(&x, &y).unwrap();
            if c.r.abs() < 0.3 && c.p > 0.001 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}");
    }

    #[test]
    fn zero_variance_is_undefined() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn permutation_p_value_agrees_roughly() {
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.4 * v + rng.normal()).collect();
        let t = pearson(&x, &y).unwrap();
        let p = pearson_permutation(&x, &y, 10_000, &mut Rng::new(4)).unwrap();
        assert_eq!(t.r, p.r);
        assert!((t.p - p.p).abs() < 0.02, "{} vs {}", t.p, p.p);
    }

    #[test]
    fn sem_examples() {
        let s = mean_sem(&[0.8, 0.6]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.sem.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mean_sem(&[1.0; 5]).unwrap().sem, Some(0.0));
        assert_eq!(mean_sem(&[1.0]).unwrap().sem, None);
        let base = [0.3, 0.9, 0.5, 0.7];
        let rep: Vec<f64> = base.iter().cycle().take(400).cloned().collect();
        let ratio = mean_sem(&base).unwrap().sem.unwrap() / mean_sem(&rep).unwrap().sem.unwrap();
        // Sum of squares grows 100x, so the ratio is sqrt((N-1)N / (100 (n-1) n)).
        let expect = (399.0f64 * 400.0 / (100.0 * 3.0 * 4.0)).sqrt();
        assert!((ratio - expect).abs() < 1e-9);
    }

    #[test]
    fn quadrant_corners_and_ties() {
        let u = [0.0, 0.0, 1.0, 1.0];
        let d = [0.0, 1.0, 0.0, 1.0];
        let t = quadrant_classes(&u, &d, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(
            t.labels,
            vec![
                Quadrant::MinusPlus,
                Quadrant::MinusMinus,
                Quadrant::PlusPlus,
                Quadrant::PlusMinus
            ]
        );
        assert!(t.classes.iter().all(|c| c.count == 1));
        let same = quadrant_classes(&[0.5; 6], &[0.01; 6], &[0.9; 6]).unwrap();
        assert!(same.labels.iter().all(|&q| q == Quadrant::MinusMinus));
        assert!(quadrant_classes(&u[..3], &d[..3], &[0.0; 3]).is_err());
    }

    #[test]
    fn spearman_of_monotone_data_is_one() {
        let x = [1.0, 2.0, 3.0, 10.0, 11.0];
        let y = [0.1, 0.2, 0.25, 5.0, 100.0];
        assert!((spearman(&x, &y).unwrap().r - 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            x in proptest::collection::vec(-10.0f64..10.0, 5..30),
            seed in 0u64..1000,
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let mut rng = Rng::new(seed);
            let y: Vec<f64> = x.iter().map(|v| v + rng.normal()).collect();
            let base = pearson(&x, &y);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            let tx: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let c = pearson(&tx, &y).unwrap();
            prop_assert!((c.r - base.r).abs() < 1e-9);
            prop_assert!((c.p - base.p).abs() < 1e-7);
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            let n = pearson(&x, &neg).unwrap();
            prop_assert!((n.r + base.r).abs() < 1e-12);
            prop_assert!((n.p - base.p).abs() < 1e-12);
        }

        #[test]
        fn quadrant_sides_are_balanced(
            u in proptest::collection::vec(0.0f64..1.0, 4..40),
            seed in 0u64..100,
        ) {
            let mut rng = Rng::new(seed);
            let d: Vec<f64> = u.iter().map(|_| (rng.below(5) as f64) * 0.01).collect();
            let t = quadrant_classes(&u, &d, &vec![0.5; u.len()]).unwrap();
            let plus = t.labels.iter().filter(|q| matches!(q, Quadrant::PlusPlus | Quadrant::PlusMinus)).count();
            let minus = u.len() - plus;
            let ties = u.iter().filter(|&&v| v == t.median_u_amb).count();
            prop_assert!((plus as i64 - minus as i64).unsigned_abs() as usize <= ties.max(1));
            let total: usize = t.classes.iter().map(|c| c.count).sum();
            prop_assert_eq!(total, u.len());
        }
    }
}
