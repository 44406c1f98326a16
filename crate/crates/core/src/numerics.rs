//! Statistical and optimization kernels: least squares with classical
//! inference, Student-t tail probabilities, Pearson correlation and a
//! hinge-loss linear separator.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmudError};
use crate::rng;

/// Ordinary least squares fit with an intercept.
///
/// `coefficients[0]` is the intercept; the rest follow the order of the
/// regressors in the design rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub n: usize,
    pub dof: usize,
}

impl RegressionFit {
    pub fn slope(&self) -> f64 {
        self.coefficients[1]
    }

    pub fn slope_p(&self) -> f64 {
        self.p_values[1]
    }
}

/// Householder QR of a column-major `n x k` matrix, in place. Returns the
/// Householder vectors (stored below the diagonal) and the diagonal of R.
struct Qr {
    n: usize,
    k: usize,
    /// column-major, upper triangle holds R (excluding diagonal)
    a: Vec<f64>,
    rdiag: Vec<f64>,
}

impl Qr {
    fn factor(mut a: Vec<f64>, n: usize, k: usize) -> Qr {
        let mut rdiag = vec![0.0; k];
        for j in 0..k {
            let col = j * n;
            let norm = a[col + j..col + n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                rdiag[j] = 0.0;
                continue;
            }
            let alpha = if a[col + j] > 0.0 { -norm } else { norm };
            // v = x - alpha e1, stored in place and scaled so v[0] = 1 is not assumed
            a[col + j] -= alpha;
            let vnorm2: f64 = a[col + j..col + n].iter().map(|v| v * v).sum();
            for jj in j + 1..k {
                let other = jj * n;
                let dot: f64 = (j..n).map(|i| a[col + i] * a[other + i]).sum();
                let s = 2.0 * dot / vnorm2;
                for i in j..n {
                    a[other + i] -= s * a[col + i];
                }
            }
            rdiag[j] = alpha;
        }
        Qr { n, k, a, rdiag }
    }

    /// Applies Q^T to `y` in place.
    fn apply_qt(&self, y: &mut [f64]) {
        let n = self.n;
        for j in 0..self.k {
            if self.rdiag[j] == 0.0 {
                continue;
            }
            let col = j * n;
            let vnorm2: f64 = self.a[col + j..col + n].iter().map(|v| v * v).sum();
            let dot: f64 = (j..n).map(|i| self.a[col + i] * y[i]).sum();
            let s = 2.0 * dot / vnorm2;
            for i in j..n {
                y[i] -= s * self.a[col + i];
            }
        }
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.rdiag[i]
        } else {
            self.a[j * self.n + i]
        }
    }

    fn solve_r(&self, rhs: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut x = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = rhs[i];
            for (j, xj) in x.iter().enumerate().skip(i + 1) {
                s -= self.r(i, j) * xj;
            }
            x[i] = s / self.r(i, i);
        }
        x
    }

    /// Row norms of R^{-1}, i.e. sqrt of the diagonal of (X^T X)^{-1}.
    fn inverse_row_norms(&self) -> Vec<f64> {
        let k = self.k;
        // columns of R^{-1}: solve R x = e_c
        let mut rinv = vec![vec![0.0; k]; k];
        for c in 0..k {
            let mut e = vec![0.0; k];
            e[c] = 1.0;
            let col = self.solve_r(&e);
            for r in 0..k {
                rinv[r][c] = col[r];
            }
        }
        rinv.iter()
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Least squares `y = b0 + b . x` with classical standard errors and
/// two-sided t-test p-values.
///
/// Each design row holds the non-intercept regressors of one observation.
pub fn ols(design: &[Vec<f64>], y: &[f64]) -> Result<RegressionFit> {
    let n = y.len();
    if design.len() != n {
        return Err(TmudError::Domain(format!(
            "{} design rows but {} responses",
            design.len(),
            n
        )));
    }
    let p = design.first().map_or(0, Vec::len);
    if design.iter().any(|row| row.len() != p) {
        return Err(TmudError::Domain("ragged design rows".into()));
    }
    let k = p + 1;
    if n <= k {
        return Err(TmudError::Domain(format!(
            "need more than {k} observations, got {n}"
        )));
    }
    if design.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(TmudError::Domain("non-finite value in regression input".into()));
    }

    let mut a = vec![0.0; n * k];
    for i in 0..n {
        a[i] = 1.0;
        for j in 0..p {
            a[(j + 1) * n + i] = design[i][j];
        }
    }
    let col_norms: Vec<f64> = (0..k)
        .map(|j| a[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let qr = Qr::factor(a, n, k);
    for j in 0..k {
        if qr.rdiag[j].abs() <= 1e-10 * col_norms[j].max(f64::MIN_POSITIVE) {
            return Err(TmudError::SingularDesign(format!(
                "column {j} is linearly dependent on earlier columns"
            )));
        }
    }

    let mut qty = y.to_vec();
    qr.apply_qt(&mut qty);
    let coefficients = qr.solve_r(&qty[..k]);

    let residual_ss: f64 = (0..n)
        .map(|i| {
            let fitted = coefficients[0]
                + design[i]
                    .iter()
                    .zip(&coefficients[1..])
                    .map(|(x, b)| x * b)
                    .sum::<f64>();
            (y[i] - fitted).powi(2)
        })
        .sum();
    let mean = y.iter().sum::<f64>() / n as f64;
    let total_ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if total_ss > 0.0 {
        1.0 - residual_ss / total_ss
    } else {
        0.0
    };
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / (n as f64 - p as f64 - 1.0);

    let dof = n - k;
    let sigma = (residual_ss / dof as f64).sqrt();
    let std_errors: Vec<f64> = qr.inverse_row_norms().iter().map(|v| v * sigma).collect();
    let t_stats: Vec<f64> = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| {
            if *se > 0.0 {
                b / se
            } else if *b == 0.0 {
                0.0
            } else {
                b.signum() * f64::INFINITY
            }
        })
        .collect();
    let p_values = t_stats
        .iter()
        .map(|t| t_tail(*t, dof as f64))
        .collect::<Result<Vec<_>>>()?;

    Ok(RegressionFit {
        coefficients,
        std_errors,
        t_stats,
        p_values,
        r_squared,
        adj_r_squared,
        n,
        dof,
    })
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
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

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
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

/// Two-sided Student-t tail probability `2 (1 - F(|t|))`.
pub fn t_tail(t: f64, dof: f64) -> Result<f64> {
    if !(dof >= 1.0) {
        return Err(TmudError::Domain(format!("degrees of freedom {dof} < 1")));
    }
    if t.is_nan() {
        return Err(TmudError::Domain("t statistic is NaN".into()));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let x = dof / (dof + t * t);
    Ok(reg_inc_beta(dof / 2.0, 0.5, x).clamp(0.0, 1.0))
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(TmudError::Domain(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(TmudError::InsufficientData(format!(
            "correlation needs at least 2 pairs, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(TmudError::UndefinedCorrelation(
            "zero variance in one of the series".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Schedule for [`linear_separator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    /// L2 penalty on the weights.
    pub penalty: f64,
    /// Passes over the data; the objective is recorded after each one.
    pub epochs: usize,
    /// Initial step size; step `t` is `eta0 / (1 + penalty * eta0 * t)`.
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            penalty: 1e-4,
            epochs: 60,
            eta0: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separator {
    /// Unit normal.
    pub normal: Vec<f64>,
    /// Offset in the normalized scale: decision is `normal . x + offset`.
    pub offset: f64,
    pub train_accuracy: f64,
    /// Primal objective of the averaged iterate after each epoch.
    pub objective_trace: Vec<f64>,
}

/// Mean hinge loss plus `penalty * |w|^2 / 2` (bias unpenalized).
pub fn hinge_objective(points: &[Vec<f64>], labels: &[bool], w: &[f64], b: f64, penalty: f64) -> f64 {
    let n = points.len() as f64;
    let loss: f64 = points
        .iter()
        .zip(labels)
        .map(|(x, &l)| {
            let y = if l { 1.0 } else { -1.0 };
            let m = y * (dot(w, x) + b);
            (1.0 - m).max(0.0)
        })
        .sum::<f64>()
        / n;
    loss + 0.5 * penalty * dot(w, w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear max-margin separator by averaged stochastic subgradient descent
/// on the regularized hinge loss.
pub fn linear_separator(points: &[Vec<f64>], labels: &[bool], config: &SeparatorConfig) -> Result<Separator> {
    if points.len() != labels.len() {
        return Err(TmudError::Domain("points and labels differ in length".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == labels.len() {
        return Err(TmudError::Domain("separator needs both classes".into()));
    }
    if !(config.penalty > 0.0) || config.epochs == 0 || !(config.eta0 > 0.0) {
        return Err(TmudError::Config("invalid separator schedule".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(TmudError::Domain("points differ in dimension".into()));
    }

    let lambda = config.penalty;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; dim];
    let mut avg_b = 0.0;
    let mut t: u64 = 0;
    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut rng = rng::stream(config.seed, "separator", 0);
    let mut trace = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = config.eta0 / (1.0 + lambda * config.eta0 * t as f64);
            let y = if labels[i] { 1.0 } else { -1.0 };
            let margin = y * (dot(&w, &points[i]) + b);
            let shrink = 1.0 - eta * lambda;
            for wj in w.iter_mut() {
                *wj *= shrink;
            }
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(&points[i]) {
                    *wj += eta * y * xj;
                }
                b += eta * y;
            }
            t += 1;
            // running (Polyak) average of the iterates
            let mu = 1.0 / t as f64;
            for (aj, wj) in avg_w.iter_mut().zip(&w) {
                *aj += mu * (wj - *aj);
            }
            avg_b += mu * (b - avg_b);
        }
        trace.push(hinge_objective(points, labels, &avg_w, avg_b, lambda));
    }

    let norm = dot(&avg_w, &avg_w).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(TmudError::Training {
            epoch: config.epochs,
            reason: "separator weights collapsed to zero".into(),
        });
    }
    let normal: Vec<f64> = avg_w.iter().map(|v| v / norm).collect();
    let offset = avg_b / norm;
    let correct = points
        .iter()
        .zip(labels)
        .filter(|(x, &l)| (dot(&normal, x) + offset > 0.0) == l)
        .count();
    Ok(Separator {
        normal,
        offset,
        train_accuracy: correct as f64 / points.len() as f64,
        objective_trace: trace,
    })
}

/// One-sided exact binomial test of `successes` out of `n` against
/// probability 1/2: returns `P(X >= successes)`.
pub fn binomial_upper_tail_half(successes: usize, n: usize) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > n {
        return 0.0;
    }
    // sum_{k>=s} C(n,k) / 2^n in log space
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let ln_n_fact = ln_gamma(n as f64 + 1.0);
    let terms: Vec<f64> = (successes..=n)
        .map(|k| ln_n_fact - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0) + ln_half_n)
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>()).min(1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Orthogonal matrix from the QR factorization of a Gaussian matrix with
/// the sign convention that makes the distribution Haar. Row-major `d x d`.
pub fn random_orthogonal(d: usize, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let a: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    // a is column-major d x d
    let qr = Qr::factor(a, d, d);
    // form Q by applying Q to the identity columns, then fix signs by R's diagonal
    let mut q = vec![vec![0.0; d]; d];
    for c in 0..d {
        let mut e = vec![0.0; d];
        e[c] = 1.0;
        // Q e = H_0 H_1 ... H_{d-1} e
        for j in (0..d).rev() {
            let col = j * d;
            let vnorm2: f64 = qr.a[col + j..col + d].iter().map(|v| v * v).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let dotv: f64 = (j..d).map(|i| qr.a[col + i] * e[i]).sum();
            let s = 2.0 * dotv / vnorm2;
            for i in j..d {
                e[i] -= s * qr.a[col + i];
            }
        }
        let sign = if qr.rdiag[c] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            q[r][c] = e[r] * sign;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_line() {
        let design: Vec<Vec<f64>> = (0..4).map(|x| vec![x as f64]).collect();
        let y: Vec<f64> = (0..4).map(|x| 2.0 * x as f64).collect();
        let fit = ols(&design, &y).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.dof, 2);
    }

    #[test]
    fn exact_parabola() {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let design: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x, x * x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let fit = ols(&design, &y).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-12);
        assert!((fit.coefficients[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_regressor_is_singular() {
        let design = vec![vec![0.0]; 12];
        let y: Vec<f64> = (0..12).map(f64::from).collect();
        assert!(matches!(ols(&design, &y), Err(TmudError::SingularDesign(_))));
    }

    #[test]
    fn too_few_observations() {
        assert!(matches!(
            ols(&[vec![1.0], vec![2.0]], &[1.0, 2.0]),
            Err(TmudError::Domain(_))
        ));
    }

    #[test]
    fn t_tail_basics() {
        assert_eq!(t_tail(0.0, 5.0).unwrap(), 1.0);
        assert!(t_tail(1.0, 0.5).is_err());
        assert_eq!(t_tail(f64::INFINITY, 3.0).unwrap(), 0.0);
        // Cauchy: P(|T| > 1) = 1/2
        assert!((t_tail(1.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
        // dof 2 has a closed form: p = 1 - t / sqrt(2 + t^2)
        for t in [0.3, 1.7, 4.2] {
            let exact = 1.0 - t / (2.0f64 + t * t).sqrt();
            assert!((t_tail(t, 2.0).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            fact *= n as f64;
            assert!((ln_gamma(n as f64 + 1.0) - fact.ln()).abs() < 1e-10);
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(TmudError::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn separable_clusters() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let j = (i % 8) as f64 * 0.1;
            pts.push(vec![1.0 + j, 0.3 * j]);
            labels.push(true);
            pts.push(vec![-1.0 - j, -0.2 * j]);
            labels.push(false);
        }
        let sep = linear_separator(&pts, &labels, &SeparatorConfig::default()).unwrap();
        assert_eq!(sep.train_accuracy, 1.0);
        let norm: f64 = sep.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(linear_separator(&pts, &[true, true], &SeparatorConfig::default()).is_err());
    }

    #[test]
    fn binomial_tail_values() {
        assert!((binomial_upper_tail_half(0, 10) - 1.0).abs() < 1e-15);
        // P(X >= 10 | n = 10) = 2^-10
        assert!((binomial_upper_tail_half(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        // P(X >= 8 | n = 10) = (45 + 10 + 1) / 1024
        assert!((binomial_upper_tail_half(8, 10) - 56.0 / 1024.0).abs() < 1e-13);
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let x = [0.1, 0.5, 0.2, 0.9, 0.7];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3)).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = rng::stream(3, "rot", 0);
        let q = random_orthogonal(16, &mut rng);
        for i in 0..16 {
            for j in 0..16 {
                let d: f64 = (0..16).map(|k| q[k][i] * q[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn t_tail_monotone_and_symmetric(a in 0.0f64..30.0, b in 0.0f64..30.0, dof in 1.0f64..200.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = t_tail(lo, dof).unwrap();
            let p_hi = t_tail(hi, dof).unwrap();
            prop_assert!(p_hi <= p_lo + 1e-14);
            prop_assert_eq!(t_tail(-a, dof).unwrap(), t_tail(a, dof).unwrap());
            prop_assert!((0.0..=1.0).contains(&p_lo));
        }

        #[test]
        fn pearson_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 5..30),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + (i as f64).sin()).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
                let r2 = pearson(&xt, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn residuals_orthogonal_to_design(
            rows in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 8..60)
        ) {
            let design: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let y: Vec<f64> = rows.iter().map(|r| 0.5 * r.0 - 2.0 * r.1 + r.2).collect();
            if let Ok(fit) = ols(&design, &y) {
                let b = &fit.coefficients;
                let resid: Vec<f64> = design.iter().zip(&y)
                    .map(|(x, yi)| yi - b[0] - b[1] * x[0] - b[2] * x[1]).collect();
                let g0: f64 = resid.iter().sum();
                let g1: f64 = resid.iter().zip(&design).map(|(r, x)| r * x[0]).sum();
                let g2: f64 = resid.iter().zip(&design).map(|(r, x)| r * x[1]).sum();
                prop_assert!(g0.abs().max(g1.abs()).max(g2.abs()) <= 1e-8);
                prop_assert!(fit.adj_r_squared <= fit.r_squared);
                prop_assert!(fit.p_values.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
