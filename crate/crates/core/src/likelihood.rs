//! Conditional densities of the progress vector and the pooled (partial)
//! log-likelihood with its analytic score.
//!
//! Both likelihood families share one mean model: the cumulative means
//! `m*_k = F(eta_k)` for categories `k = 2..=K`, with `m*_1 = 1`.
//!
//! * BCM (backward cumulative multinomial): category counts
//!   `N (y_k - y_{k+1})` are multinomial with probabilities
//!   `m*_k - m*_{k+1}`. Progress is deterministically nested across stages.
//! * MB (multivariate binomial): each `N y_k` is an independent
//!   `Binomial(N, m*_k)`; stages are only stochastically ordered.
//!
//! Probabilities inside the log-pmfs are clamped at [`PROB_EPS`].

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::ModelingTable;
use crate::estimation::ModelSpec;
use crate::link::Link;
use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;

/// Tolerance on `N y` being an integer.
pub const GRID_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family {
    Bcm { trials: u32 },
    Mb { trials: u32 },
}

impl Family {
    pub fn trials(self) -> u32 {
        match self {
            Family::Bcm { trials } | Family::Mb { trials } => trials,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Bcm { .. } => "BCM",
            Family::Mb { .. } => "MB",
        }
    }

    pub fn parse(name: &str, trials: u32) -> Result<Self> {
        if trials == 0 {
            return Err(Error::Invalid("trial count N must be at least 1".into()));
        }
        match name.trim().to_ascii_lowercase().as_str() {
            "bcm" | "multinomial" => Ok(Family::Bcm { trials }),
            "mb" | "binomial" => Ok(Family::Mb { trials }),
            other => Err(Error::Invalid(format!("unknown family `{other}` (expected bcm or mb)"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(N={})", self.name(), self.trials())
    }
}

/// Ordinal effects share one slope across stages; nominal effects get a
/// stage-specific coefficient per threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Ordinal,
    Nominal,
}

impl std::str::FromStr for Effect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ordinal" | "o" => Ok(Effect::Ordinal),
            "nominal" | "n" => Ok(Effect::Nominal),
            other => Err(Error::Invalid(format!("unknown effect `{other}` (expected ordinal or nominal)"))),
        }
    }
}

/// Linear predictors `eta_k = alpha_k + sum_nominal x_p gamma_{k,p} + sum_ordinal x_p beta_p`.
///
/// Parameter layout: the `K - 1` thresholds first, then for each covariate
/// in order either one ordinal slope or `K - 1` nominal coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanStructure {
    pub n_free: usize,
    pub effects: Vec<Effect>,
}

impl MeanStructure {
    pub fn new(k: usize, effects: Vec<Effect>) -> Self {
        Self {
            n_free: k - 1,
            effects,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_free
            + self
                .effects
                .iter()
                .map(|e| match e {
                    Effect::Ordinal => 1,
                    Effect::Nominal => self.n_free,
                })
                .sum::<usize>()
    }

    /// Scalar ordered thresholds apply when no covariate is nominal.
    pub fn ordered_thresholds(&self) -> bool {
        self.effects.iter().all(|&e| e == Effect::Ordinal)
    }

    /// First parameter index of each covariate.
    pub fn covariate_offsets(&self) -> Vec<usize> {
        let mut off = self.n_free;
        self.effects
            .iter()
            .map(|e| {
                let o = off;
                off += match e {
                    Effect::Ordinal => 1,
                    Effect::Nominal => self.n_free,
                };
                o
            })
            .collect()
    }

    /// Design matrix, `(K - 1) x n_params`, row-major.
    pub fn design(&self, x: &[f64]) -> Vec<f64> {
        let p = self.n_params();
        let mut d = vec![0.0; self.n_free * p];
        let offsets = self.covariate_offsets();
        for c in 0..self.n_free {
            let row = &mut d[c * p..(c + 1) * p];
            row[c] = 1.0;
            for (q, (&e, &o)) in self.effects.iter().zip(&offsets).enumerate() {
                match e {
                    Effect::Ordinal => row[o] = x[q],
                    Effect::Nominal => row[o + c] = x[q],
                }
            }
        }
        d
    }

    pub fn eta(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let offsets = self.covariate_offsets();
        (0..self.n_free)
            .map(|c| {
                let mut e = theta[c];
                for (q, (&eff, &o)) in self.effects.iter().zip(&offsets).enumerate() {
                    e += x[q]
                        * match eff {
                            Effect::Ordinal => theta[o],
                            Effect::Nominal => theta[o + c],
                        };
                }
                e
            })
            .collect()
    }
}

/// Cumulative means `(1, F(eta_2), ..., F(eta_K))`.
pub fn cum_means(structure: &MeanStructure, link: Link, theta: &[f64], x: &[f64]) -> Vec<f64> {
    means_from_eta(link, &structure.eta(theta, x))
}

pub fn means_from_eta(link: Link, eta: &[f64]) -> Vec<f64> {
    let mut m = Vec::with_capacity(eta.len() + 1);
    m.push(1.0);
    m.extend(eta.iter().map(|&e| link.cdf(e)));
    m
}

fn ln_factorial(n: f64) -> f64 {
    libm::lgamma(n + 1.0)
}

fn grid_counts(y: &[f64], n: u32) -> Result<Vec<f64>> {
    let nf = n as f64;
    y.iter()
        .map(|&v| {
            let c = nf * v;
            let r = c.round();
            if (c - r).abs() > GRID_TOL {
                Err(Error::Invalid(format!(
                    "N*y = {c} is not an integer for N = {n} (tolerance {GRID_TOL})"
                )))
            } else {
                Ok(r)
            }
        })
        .collect()
}

fn check_vectors(y: &[f64], m: &[f64]) -> Result<()> {
    if y.len() != m.len() || y.len() < 2 {
        return Err(Error::Invalid(format!(
            "progress ({}) and mean ({}) vectors must have equal length >= 2",
            y.len(),
            m.len()
        )));
    }
    if (y[0] - 1.0).abs() > 1e-12 || (m[0] - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid("first category must equal 1".into()));
    }
    if y.iter().chain(m).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("entries must lie in [0, 1]".into()));
    }
    Ok(())
}

/// BCM log-density of a progress vector under cumulative means `m`.
pub fn bcm_log_density(y: &[f64], m: &[f64], trials: u32) -> Result<f64> {
    check_vectors(y, m)?;
    if y.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidFamily(
            "BCM requires progress non-increasing across stages".into(),
        ));
    }
    if m.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidFamily(
            "BCM requires cumulative means non-increasing across stages".into(),
        ));
    }
    let r = grid_counts(y, trials)?;
    let k = y.len();
    let mut out = ln_factorial(trials as f64);
    for i in 0..k {
        let n_i = r[i] - if i + 1 < k { r[i + 1] } else { 0.0 };
        let p_i = (m[i] - if i + 1 < k { m[i + 1] } else { 0.0 }).max(PROB_EPS);
        out -= ln_factorial(n_i);
        if n_i > 0.0 {
            out += n_i * p_i.ln();
        }
    }
    Ok(out)
}

/// MB log-density: product of binomials over categories `2..=K`.
pub fn mb_log_density(y: &[f64], m: &[f64], trials: u32) -> Result<f64> {
    check_vectors(y, m)?;
    let s = grid_counts(&y[1..], trials)?;
    let nf = trials as f64;
    let mut out = 0.0;
    for (&s, &mk) in s.iter().zip(&m[1..]) {
        let p = mk.clamp(PROB_EPS, 1.0 - PROB_EPS);
        out += ln_factorial(nf) - ln_factorial(s) - ln_factorial(nf - s);
        if s > 0.0 {
            out += s * p.ln();
        }
        if s < nf {
            out += (nf - s) * (1.0 - p).ln();
        }
    }
    Ok(out)
}

/// Integer counts of one observation, laid out for its family.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Counts {
    /// BCM: category counts `n_1..n_K`; MB: successes `s_2..s_K`.
    pub values: Vec<f64>,
    pub log_const: f64,
}

/// Converts a progress vector to family counts. Returns the counts and
/// whether rounding to the `1/N` grid moved any entry by more than
/// [`GRID_TOL`].
pub(crate) fn counts_for(family: Family, y: &[f64]) -> Result<(Counts, bool)> {
    let nf = family.trials() as f64;
    let scaled: Vec<f64> = y.iter().map(|v| v * nf).collect();
    let rounded: Vec<f64> = scaled.iter().map(|v| v.round()).collect();
    let adjusted = scaled
        .iter()
        .zip(&rounded)
        .any(|(a, b)| (a - b).abs() > GRID_TOL);
    let k = y.len();
    match family {
        Family::Bcm { .. } => {
            if let Some(i) = (1..k).find(|&i| rounded[i] > rounded[i - 1]) {
                return Err(Error::InvalidFamily(format!(
                    "BCM requires progress non-increasing across stages (category {} exceeds {})",
                    i + 1,
                    i
                )));
            }
            let values: Vec<f64> = (0..k)
                .map(|i| rounded[i] - if i + 1 < k { rounded[i + 1] } else { 0.0 })
                .collect();
            let log_const = ln_factorial(nf) - values.iter().map(|&n| ln_factorial(n)).sum::<f64>();
            Ok((Counts { values, log_const }, adjusted))
        }
        Family::Mb { .. } => {
            let values = rounded[1..].to_vec();
            let log_const = values
                .iter()
                .map(|&s| ln_factorial(nf) - ln_factorial(s) - ln_factorial(nf - s))
                .sum();
            Ok((Counts { values, log_const }, adjusted))
        }
    }
}

/// Log-likelihood of one observation and its derivatives with respect to
/// the linear predictors.
#[derive(Debug, Clone, Default)]
pub(crate) struct EtaTerms {
    pub loglik: f64,
    pub grad: Vec<f64>,
    /// Expected information, `(K-1)^2` row-major.
    pub fisher: Vec<f64>,
    /// Observed Hessian of the log-likelihood, `(K-1)^2` row-major.
    pub hessian: Vec<f64>,
    /// Category probabilities that came out negative and were clamped.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Want {
    pub grad: bool,
    pub fisher: bool,
    pub hessian: bool,
}

impl Want {
    pub const VALUE: Want = Want { grad: false, fisher: false, hessian: false };
    pub const FISHER: Want = Want { grad: true, fisher: true, hessian: false };
    pub const HESSIAN: Want = Want { grad: true, fisher: true, hessian: true };
}

pub(crate) fn eta_terms(family: Family, link: Link, counts: &Counts, eta: &[f64], want: Want) -> EtaTerms {
    match family {
        Family::Mb { trials } => mb_terms(trials as f64, link, counts, eta, want),
        Family::Bcm { trials } => bcm_terms(trials as f64, link, counts, eta, want),
    }
}

fn mb_terms(nf: f64, link: Link, counts: &Counts, eta: &[f64], want: Want) -> EtaTerms {
    let q = eta.len();
    let mut t = EtaTerms {
        loglik: counts.log_const,
        ..Default::default()
    };
    if want.grad {
        t.grad = vec![0.0; q];
    }
    if want.fisher {
        t.fisher = vec![0.0; q * q];
    }
    if want.hessian {
        t.hessian = vec![0.0; q * q];
    }
    for c in 0..q {
        let s = counts.values[c];
        let fail = nf - s;
        let (mut m, mut up) = (link.cdf(eta[c]), link.sf(eta[c]));
        let live_m = m >= PROB_EPS;
        let live_up = up >= PROB_EPS;
        m = m.max(PROB_EPS);
        up = up.max(PROB_EPS);
        if s > 0.0 {
            t.loglik += s * m.ln();
        }
        if fail > 0.0 {
            t.loglik += fail * up.ln();
        }
        if !(want.grad || want.fisher || want.hessian) {
            continue;
        }
        let f = link.density(eta[c]);
        let a = if live_m { s / m } else { 0.0 };
        let b = if live_up { fail / up } else { 0.0 };
        if want.grad {
            t.grad[c] = f * (a - b);
        }
        if want.fisher {
            t.fisher[c * q + c] = nf * f * f / (m * up);
        }
        if want.hessian {
            let fp = link.density_deriv(eta[c]);
            let h_m = if live_m { s * (fp / m - f * f / (m * m)) } else { 0.0 };
            let h_up = if live_up { fail * (-fp / up - f * f / (up * up)) } else { 0.0 };
            t.hessian[c * q + c] = h_m + h_up;
        }
    }
    t
}

fn bcm_terms(nf: f64, link: Link, counts: &Counts, eta: &[f64], want: Want) -> EtaTerms {
    let q = eta.len();
    let k = q + 1;
    // category probabilities p_1..p_K
    let mut p = vec![0.0; k];
    p[0] = link.sf(eta[0]);
    for i in 1..k - 1 {
        let (a, b) = (eta[i - 1], eta[i]);
        p[i] = if a + b > 0.0 {
            link.sf(b) - link.sf(a)
        } else {
            link.cdf(a) - link.cdf(b)
        };
    }
    p[k - 1] = link.cdf(eta[q - 1]);

    let mut t = EtaTerms {
        loglik: counts.log_const,
        ..Default::default()
    };
    let mut live = vec![true; k];
    for i in 0..k {
        if p[i] < 0.0 {
            t.clamped += 1;
        }
        if p[i] < PROB_EPS {
            p[i] = PROB_EPS;
            live[i] = false;
        }
        let n = counts.values[i];
        if n > 0.0 {
            t.loglik += n * p[i].ln();
        }
    }
    if !(want.grad || want.fisher || want.hessian) {
        return t;
    }
    let ratio = |i: usize| if live[i] { counts.values[i] / p[i] } else { 0.0 };
    let f: Vec<f64> = eta.iter().map(|&e| link.density(e)).collect();
    let g_m: Vec<f64> = (0..q).map(|c| ratio(c + 1) - ratio(c)).collect();
    if want.grad {
        t.grad = (0..q).map(|c| g_m[c] * f[c]).collect();
    }
    if want.fisher {
        let inv = |i: usize| if live[i] { 1.0 / p[i] } else { 0.0 };
        t.fisher = vec![0.0; q * q];
        for c in 0..q {
            t.fisher[c * q + c] = nf * (inv(c) + inv(c + 1)) * f[c] * f[c];
            if c + 1 < q {
                let v = -nf * inv(c + 1) * f[c] * f[c + 1];
                t.fisher[c * q + c + 1] = v;
                t.fisher[(c + 1) * q + c] = v;
            }
        }
    }
    if want.hessian {
        let sq = |i: usize| if live[i] { counts.values[i] / (p[i] * p[i]) } else { 0.0 };
        t.hessian = vec![0.0; q * q];
        for c in 0..q {
            let fp = link.density_deriv(eta[c]);
            t.hessian[c * q + c] = -(sq(c) + sq(c + 1)) * f[c] * f[c] + g_m[c] * fp;
            if c + 1 < q {
                let v = sq(c + 1) * f[c] * f[c + 1];
                t.hessian[c * q + c + 1] = v;
                t.hessian[(c + 1) * q + c] = v;
            }
        }
    }
    t
}

/// One prepared observation: counts plus the fixed-effects design.
#[derive(Debug, Clone)]
pub(crate) struct PreparedObs {
    pub season: i32,
    pub x: Vec<f64>,
    pub design: Vec<f64>,
    pub counts: Counts,
}

/// Data and model bundled for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub family: Family,
    pub link: Link,
    pub structure: MeanStructure,
    pub obs: Vec<PreparedObs>,
    pub seasons: Vec<(i32, Range<usize>)>,
    /// Observations whose progress was moved onto the `1/N` grid.
    pub grid_adjusted: usize,
}

/// Likelihood and derivatives summed over the data at one parameter value.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub loglik: f64,
    pub score: DVector<f64>,
    /// Expected information summed over observations.
    pub fisher: DMatrix<f64>,
    /// Sum of per-observation score outer products.
    pub opg: DMatrix<f64>,
    /// Sum of per-season score outer products.
    pub clustered: DMatrix<f64>,
    pub clamped: usize,
    pub evaluations: usize,
}

impl Prepared {
    pub fn new(table: &ModelingTable, spec: &ModelSpec) -> Result<Self> {
        spec.check_table(table)?;
        let structure = spec.structure();
        let mut obs = Vec::with_capacity(table.rows.len());
        let mut adjusted = 0;
        for r in &table.rows {
            let (counts, adj) = counts_for(spec.family, &r.y).map_err(|e| match e {
                Error::InvalidFamily(m) => {
                    Error::InvalidFamily(format!("season {}, day {}: {m}", r.season, r.day))
                }
                other => other,
            })?;
            adjusted += adj as usize;
            obs.push(PreparedObs {
                season: r.season,
                x: r.x.clone(),
                design: structure.design(&r.x),
                counts,
            });
        }
        let mut seasons = Vec::new();
        let mut start = 0;
        for i in 1..=obs.len() {
            if i == obs.len() || obs[i].season != obs[start].season {
                seasons.push((obs[start].season, start..i));
                start = i;
            }
        }
        Ok(Self {
            family: spec.family,
            link: spec.link,
            structure,
            obs,
            seasons,
            grid_adjusted: adjusted,
        })
    }

    pub fn n_params(&self) -> usize {
        self.structure.n_params()
    }

    pub fn eta(&self, o: &PreparedObs, theta: &[f64]) -> Vec<f64> {
        let p = theta.len();
        (0..self.structure.n_free)
            .map(|c| {
                o.design[c * p..(c + 1) * p]
                    .iter()
                    .zip(theta)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Partial log-likelihood; non-finite values are mapped to `-inf`.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        let mut ll = 0.0;
        for o in &self.obs {
            let eta = self.eta(o, theta);
            ll += eta_terms(self.family, self.link, &o.counts, &eta, Want::VALUE).loglik;
        }
        if ll.is_finite() {
            ll
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn evaluate(&self, theta: &[f64]) -> Evaluation {
        let p = theta.len();
        let q = self.structure.n_free;
        let mut ev = Evaluation {
            loglik: 0.0,
            score: DVector::zeros(p),
            fisher: DMatrix::zeros(p, p),
            opg: DMatrix::zeros(p, p),
            clustered: DMatrix::zeros(p, p),
            clamped: 0,
            evaluations: 0,
        };
        let mut s_obs = DVector::zeros(p);
        for (_, range) in &self.seasons {
            let mut s_season = DVector::<f64>::zeros(p);
            for o in &self.obs[range.clone()] {
                let eta = self.eta(o, theta);
                let t = eta_terms(self.family, self.link, &o.counts, &eta, Want::FISHER);
                ev.loglik += t.loglik;
                ev.clamped += t.clamped;
                ev.evaluations += q + 1;
                let x = DMatrix::from_row_slice(q, p, &o.design);
                let g = DVector::from_column_slice(&t.grad);
                s_obs.copy_from(&(x.transpose() * &g));
                s_season += &s_obs;
                ev.opg += &s_obs * s_obs.transpose();
                let w = DMatrix::from_row_slice(q, q, &t.fisher);
                ev.fisher += x.transpose() * w * &x;
            }
            ev.score += &s_season;
            ev.clustered += &s_season * s_season.transpose();
        }
        if !ev.loglik.is_finite() {
            ev.loglik = f64::NEG_INFINITY;
        }
        ev
    }
}

/// Partial (pooled) log-likelihood of the data at `theta`.
pub fn partial_loglik(data: &ModelingTable, spec: &ModelSpec, theta: &[f64]) -> Result<f64> {
    let prep = Prepared::new(data, spec)?;
    check_theta(&prep, theta)?;
    Ok(prep.loglik(theta))
}

/// Analytic score (gradient of the partial log-likelihood).
pub fn score(data: &ModelingTable, spec: &ModelSpec, theta: &[f64]) -> Result<Vec<f64>> {
    let prep = Prepared::new(data, spec)?;
    check_theta(&prep, theta)?;
    Ok(prep.evaluate(theta).score.iter().copied().collect())
}

/// Information pair `(A, B)`: `A` sums per-observation score outer
/// products, `B` sums per-season score outer products.
pub fn information(
    data: &ModelingTable,
    spec: &ModelSpec,
    theta: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let prep = Prepared::new(data, spec)?;
    check_theta(&prep, theta)?;
    let ev = prep.evaluate(theta);
    Ok((ev.opg, ev.clustered))
}

fn check_theta(prep: &Prepared, theta: &[f64]) -> Result<()> {
    if theta.len() != prep.n_params() {
        return Err(Error::Invalid(format!(
            "parameter vector has length {}, model needs {}",
            theta.len(),
            prep.n_params()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_binom(n: u32, k: u32) -> f64 {
        (1..=n).map(|i| (i as f64).ln()).sum::<f64>()
            - (1..=k).map(|i| (i as f64).ln()).sum::<f64>()
            - (1..=n - k).map(|i| (i as f64).ln()).sum::<f64>()
    }

    #[test]
    fn mean_structure_examples() {
        let s = MeanStructure::new(3, vec![]);
        let m = cum_means(&s, Link::Logit, &[0.0, 0.0], &[]);
        assert_eq!(m, vec![1.0, 0.5, 0.5]);
        let m = cum_means(&s, Link::Logit, &[1.0, -1.0], &[]);
        assert!((m[1] - 0.7311).abs() < 1e-4 && (m[2] - 0.2689).abs() < 1e-4);
        let s = MeanStructure::new(2, vec![Effect::Ordinal]);
        assert_eq!(cum_means(&s, Link::Logit, &[-2.0, 2.0], &[1.0])[1], 0.5);
    }

    #[test]
    fn design_layout() {
        let s = MeanStructure::new(3, vec![Effect::Nominal, Effect::Ordinal]);
        assert_eq!(s.n_params(), 2 + 2 + 1);
        let d = s.design(&[2.0, 3.0]);
        assert_eq!(&d[0..5], &[1.0, 0.0, 2.0, 0.0, 3.0]);
        assert_eq!(&d[5..10], &[0.0, 1.0, 0.0, 2.0, 3.0]);
        let theta = [0.5, -0.5, 1.0, 2.0, 0.1];
        let eta = s.eta(&theta, &[2.0, 3.0]);
        assert!((eta[0] - (0.5 + 2.0 + 0.3)).abs() < 1e-15);
        assert!((eta[1] - (-0.5 + 4.0 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn bcm_examples() {
        let v = bcm_log_density(&[1.0, 0.5], &[1.0, 0.5], 2).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-14);
        let m = [1.0, 0.8, 0.5, 0.3];
        let v = bcm_log_density(&[1.0; 4], &m, 3).unwrap();
        assert!((v - 3.0 * 0.3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            bcm_log_density(&[1.0, 0.2, 0.5], &[1.0, 0.6, 0.4], 10),
            Err(Error::InvalidFamily(_))
        ));
        assert!(matches!(
            bcm_log_density(&[1.0, 0.5, 0.2], &[1.0, 0.4, 0.6], 10),
            Err(Error::InvalidFamily(_))
        ));
        assert!(bcm_log_density(&[1.0, 0.33], &[1.0, 0.5], 2).is_err());
    }

    #[test]
    fn mb_examples() {
        let v = mb_log_density(&[1.0, 1.0], &[1.0, 0.7], 1).unwrap();
        assert!((v - 0.7f64.ln()).abs() < 1e-14);
        // MB admits non-monotone progress
        let v = mb_log_density(&[1.0, 0.5, 1.0], &[1.0, 0.6, 0.4], 2).unwrap();
        let oracle = log_binom(2, 1) + 0.6f64.ln() + 0.4f64.ln() + 2.0 * 0.4f64.ln();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn mb_and_bcm_coincide_for_two_categories() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..=20u32);
            let s = rng.random_range(0..=n);
            let m2: f64 = rng.random_range(0.01..0.99);
            let y = [1.0, s as f64 / n as f64];
            let m = [1.0, m2];
            let a = bcm_log_density(&y, &m, n).unwrap();
            let b = mb_log_density(&y, &m, n).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Numerical second derivatives of the eta-level log-likelihood.
    fn check_eta_derivatives(family: Family, link: Link, y: &[f64], eta: &[f64]) {
        let (counts, _) = counts_for(family, y).unwrap();
        let t = eta_terms(family, link, &counts, eta, Want::HESSIAN);
        let q = eta.len();
        let h = 1e-6;
        for c in 0..q {
            let mut ep = eta.to_vec();
            let mut em = eta.to_vec();
            ep[c] += h;
            em[c] -= h;
            let lp = eta_terms(family, link, &counts, &ep, Want::FISHER);
            let lm = eta_terms(family, link, &counts, &em, Want::FISHER);
            let fd = (lp.loglik - lm.loglik) / (2.0 * h);
            assert!((fd - t.grad[c]).abs() < 1e-5 * (1.0 + fd.abs()), "{family} {link} grad {c}");
            for d in 0..q {
                let fd2 = (lp.grad[d] - lm.grad[d]) / (2.0 * h);
                let an = t.hessian[c * q + d];
                assert!((fd2 - an).abs() < 1e-5 * (1.0 + an.abs()), "{family} {link} hess {c},{d}: {fd2} vs {an}");
            }
        }
    }

    #[test]
    fn eta_level_derivatives() {
        let y = [1.0, 0.9, 0.6, 0.2];
        let eta = [1.1, 0.2, -0.9];
        for link in Link::ALL {
            check_eta_derivatives(Family::Bcm { trials: 10 }, link, &y, &eta);
            check_eta_derivatives(Family::Mb { trials: 10 }, link, &y, &eta);
        }
    }

    #[test]
    fn fisher_is_expected_negative_hessian() {
        // enumerate outcomes for a small case and average the observed Hessian
        let link = Link::Probit;
        let eta = [0.7, -0.4];
        let n = 3u32;
        for family in [Family::Bcm { trials: n }, Family::Mb { trials: n }] {
            let mut expected = [0.0; 4];
            let mut total = 0.0;
            let mut fisher = [0.0; 4];
            for a in 0..=n {
                for b in 0..=n {
                    let y = [1.0, a as f64 / n as f64, b as f64 / n as f64];
                    let Ok((counts, _)) = counts_for(family, &y) else { continue };
                    let t = eta_terms(family, link, &counts, &eta, Want::HESSIAN);
                    let w = t.loglik.exp();
                    total += w;
                    for i in 0..4 {
                        expected[i] -= w * t.hessian[i];
                    }
                    fisher.copy_from_slice(&t.fisher);
                }
            }
            assert!((total - 1.0).abs() < 1e-12);
            for i in 0..4 {
                assert!((expected[i] - fisher[i]).abs() < 1e-10, "{family}: {expected:?} vs {fisher:?}");
            }
        }
    }
}
