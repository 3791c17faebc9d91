//! Fixed-effects cumulative link model fitting by Fisher scoring on the
//! partial likelihood, with clustered sandwich covariance and Wald tests.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{format_percent, ModelingTable, StageScheme};
use crate::features::{Covariate, FeatureFrame, SettingSpec, StandardizationParams};
use crate::likelihood::{Effect, Evaluation, Family, MeanStructure, Prepared};
use crate::link::Link;
use crate::{Error, Result};

/// Largest tolerated share of BCM category probabilities that had to be
/// clamped from negative values.
pub const MAX_CLAMP_SHARE: f64 = 0.01;

/// A fit whose log-likelihood stops moving is accepted when the score norm
/// is below `STALL_TOL * (1 + |loglik|)`.
pub const STALL_TOL: f64 = 1e-3;

/// Consecutive accepted steps without measurable ascent that count as a stall.
const STALL_STEPS: usize = 5;

/// Parameters larger than this in magnitude signal separation.
pub const SEPARATION_BOUND: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub link: Link,
    pub family: Family,
    pub covariates: Vec<Covariate>,
    pub effects: Vec<Effect>,
    pub scheme: StageScheme,
}

impl ModelSpec {
    pub fn new(
        scheme: StageScheme,
        link: Link,
        family: Family,
        setting: SettingSpec,
        effects: Vec<Effect>,
    ) -> Result<Self> {
        Self::with_covariates(scheme, link, family, setting.covariates(), effects)
    }

    pub fn with_covariates(
        scheme: StageScheme,
        link: Link,
        family: Family,
        covariates: Vec<Covariate>,
        effects: Vec<Effect>,
    ) -> Result<Self> {
        if covariates.len() != effects.len() {
            return Err(Error::Invalid(format!(
                "{} covariates but {} effect flags",
                covariates.len(),
                effects.len()
            )));
        }
        if !covariates.contains(&Covariate::Calendar) {
            return Err(Error::Invalid("the calendar covariate is required".into()));
        }
        Ok(Self { link, family, covariates, effects, scheme })
    }

    /// Thresholds only; used for the closed-form check and as a baseline.
    pub fn intercept_only(scheme: StageScheme, link: Link, family: Family) -> Self {
        Self { link, family, covariates: Vec::new(), effects: Vec::new(), scheme }
    }

    pub fn structure(&self) -> MeanStructure {
        MeanStructure::new(self.scheme.k(), self.effects.clone())
    }

    pub fn n_params(&self) -> usize {
        self.structure().n_params()
    }

    /// Parameter names: thresholds by stage, then `Covariate` for ordinal
    /// slopes and `Covariate:Stage` for nominal coefficients.
    pub fn parameter_names(&self) -> Vec<String> {
        let stages = self.scheme.stages();
        let mut names: Vec<String> = stages.to_vec();
        for (c, e) in self.covariates.iter().zip(&self.effects) {
            match e {
                Effect::Ordinal => names.push(c.label().to_string()),
                Effect::Nominal => {
                    names.extend(stages.iter().map(|s| format!("{}:{s}", c.label())))
                }
            }
        }
        names
    }

    /// Structure code: link letter then one glyph per covariate.
    pub fn code(&self) -> String {
        let mut s = String::new();
        s.push(self.link.code());
        for (c, e) in self.covariates.iter().zip(&self.effects) {
            let (o, n) = c.glyphs();
            s.push(match e {
                Effect::Ordinal => o,
                Effect::Nominal => n,
            });
        }
        s
    }

    pub(crate) fn check_table(&self, table: &ModelingTable) -> Result<()> {
        if table.scheme.k() != self.scheme.k() {
            return Err(Error::Invalid(format!(
                "model has {} stages, data has {}",
                self.scheme.k(),
                table.scheme.k()
            )));
        }
        let idx = self.covariate_index(table)?;
        if idx.iter().enumerate().any(|(i, &j)| i != j) || table.covariates.len() != self.covariates.len() {
            return Err(Error::Invalid(format!(
                "data covariates {:?} do not match model covariates {:?}",
                table.covariates, self.covariates
            )));
        }
        Ok(())
    }

    fn covariate_index(&self, table: &ModelingTable) -> Result<Vec<usize>> {
        self.covariates
            .iter()
            .map(|c| {
                table
                    .covariates
                    .iter()
                    .position(|d| d == c)
                    .ok_or_else(|| Error::Invalid(format!("data lacks covariate `{}`", c.label())))
            })
            .collect()
    }

    /// Restricts a table to this model's covariates, in model order.
    pub fn select(&self, table: &ModelingTable) -> Result<ModelingTable> {
        let idx = self.covariate_index(table)?;
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let params = StandardizationParams {
            covariates: self.covariates.clone(),
            means: pick(&table.standardization.means),
            sds: pick(&table.standardization.sds),
            convention: table.standardization.convention.clone(),
        };
        let mut out = table.clone();
        for r in &mut out.rows {
            r.raw = pick(&r.raw);
            r.x = pick(&r.x);
        }
        out.covariates = self.covariates.clone();
        out.standardization = params;
        Ok(out)
    }
}

/// Maps between natural parameters and the unconstrained scale on which
/// ordered thresholds are optimized: `alpha_c = alpha_1 - sum_{l<=c} exp(phi_l)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Reparam {
    pub ordered: bool,
    pub n_free: usize,
}

impl Reparam {
    pub fn new(structure: &MeanStructure) -> Self {
        Self { ordered: structure.ordered_thresholds(), n_free: structure.n_free }
    }

    pub fn to_theta(&self, phi: &[f64]) -> Vec<f64> {
        let mut theta = phi.to_vec();
        if self.ordered {
            for c in 1..self.n_free {
                theta[c] = theta[c - 1] - phi[c].exp();
            }
        }
        theta
    }

    pub fn to_phi(&self, theta: &[f64]) -> Vec<f64> {
        let mut phi = theta.to_vec();
        if self.ordered {
            for c in 1..self.n_free {
                phi[c] = (theta[c - 1] - theta[c]).max(1e-8).ln();
            }
        }
        phi
    }

    /// `d theta / d phi`.
    pub fn jacobian(&self, phi: &[f64]) -> DMatrix<f64> {
        let p = phi.len();
        let mut j = DMatrix::identity(p, p);
        if self.ordered {
            for c in 1..self.n_free {
                j[(c, c)] = 0.0;
                j[(c, 0)] = 1.0;
                for l in 1..=c {
                    j[(c, l)] = -phi[l].exp();
                }
            }
        }
        j
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence when the score norm is below `tol * (1 + |loglik|)`.
    pub tol: f64,
    pub max_halvings: usize,
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8, max_halvings: 30, start: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub grad_norm: f64,
    pub loglik: f64,
    /// Log-likelihood after each accepted step, starting value first.
    pub trace: Vec<f64>,
    /// Iterations whose information matrix needed a ridge to factor.
    pub regularized: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

impl WaldRow {
    pub fn new(name: String, estimate: f64, se: f64) -> Self {
        let z = estimate / se;
        Self { name, estimate, se, z, p: two_sided_p(z) }
    }

    pub fn marker(&self) -> &'static str {
        significance_marker(self.p)
    }
}

pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// `⋆` below 0.001, `•` below 0.05.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.001 {
        "⋆"
    } else if p < 0.05 {
        "•"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    Sandwich,
    ModelBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// `A^-1 B A^-1` with season-clustered `B`.
    pub covariance: Vec<Vec<f64>>,
    /// `A^-1`.
    pub model_covariance: Vec<Vec<f64>>,
    pub wald: Vec<WaldRow>,
    pub convergence: Convergence,
    pub standardization: StandardizationParams,
    pub n_obs: usize,
    pub n_seasons: usize,
    /// Rows whose progress was rounded onto the `1/N` grid.
    pub grid_adjusted: usize,
}

impl FittedModel {
    pub fn loglik(&self) -> f64 {
        self.convergence.loglik
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.theta[..self.spec.scheme.k() - 1]
    }

    /// Coefficient of `cov` acting on threshold `c` (0-based free category).
    pub fn coefficient(&self, cov: Covariate, c: usize) -> Option<f64> {
        let structure = self.spec.structure();
        let offsets = structure.covariate_offsets();
        let q = self.spec.covariates.iter().position(|&d| d == cov)?;
        Some(match self.spec.effects[q] {
            Effect::Ordinal => self.theta[offsets[q]],
            Effect::Nominal => self.theta[offsets[q] + c],
        })
    }

    pub fn standard_errors(&self, kind: CovarianceKind) -> Vec<f64> {
        let cov = match kind {
            CovarianceKind::Sandwich => &self.covariance,
            CovarianceKind::ModelBased => &self.model_covariance,
        };
        (0..self.theta.len()).map(|i| cov[i][i].max(0.0).sqrt()).collect()
    }

    pub fn wald_table(&self, kind: CovarianceKind) -> Vec<WaldRow> {
        self.standard_errors(kind)
            .into_iter()
            .enumerate()
            .map(|(i, se)| WaldRow::new(self.names[i].clone(), self.theta[i], se))
            .collect()
    }

    /// Cumulative means at standardized covariates `x`.
    pub fn means(&self, x: &[f64]) -> Vec<f64> {
        crate::likelihood::cum_means(&self.spec.structure(), self.spec.link, &self.theta, x)
    }

    /// Cumulative means at every row of `table`.
    pub fn fitted(&self, table: &ModelingTable) -> PredictedProgress {
        PredictedProgress {
            stages: self.spec.scheme.stages().to_vec(),
            rows: table
                .rows
                .iter()
                .map(|r| PredictedRow { season: r.season, day: r.day, m: self.means(&r.x) })
                .collect(),
        }
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn check_finite_theta(names: &[String], theta: &[f64]) -> Result<()> {
    if let Some((i, v)) = theta
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || v.abs() > SEPARATION_BOUND)
    {
        return Err(Error::Separation { parameter: names[i].clone(), value: *v });
    }
    Ok(())
}

/// Starting thresholds `F^-1` of the pooled stage means, made strictly
/// decreasing when thresholds are ordered.
fn initial_theta(prep: &Prepared, data: &ModelingTable) -> Vec<f64> {
    let q = prep.structure.n_free;
    let mut theta = vec![0.0; prep.n_params()];
    let n = data.rows.len().max(1) as f64;
    for c in 0..q {
        let mean = data.rows.iter().map(|r| r.y[c + 1]).sum::<f64>() / n;
        theta[c] = prep.link.quantile(mean.clamp(1e-6, 1.0 - 1e-6));
    }
    if prep.structure.ordered_thresholds() {
        for c in 1..q {
            if theta[c] > theta[c - 1] - 1e-3 {
                theta[c] = theta[c - 1] - 1e-3;
            }
        }
    }
    theta
}

/// Solves `m d = g` by Cholesky, adding a ridge only if factorization fails.
fn solve_spd(m: DMatrix<f64>, g: &DVector<f64>, ridged: &mut bool) -> Option<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(g));
    }
    *ridged = true;
    let scale = m.diagonal().iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let mut ridge = 1e-10;
    while ridge <= 1e-2 * scale {
        let r = &m + DMatrix::identity(m.nrows(), m.ncols()) * ridge;
        if let Some(ch) = r.cholesky() {
            return Some(ch.solve(g));
        }
        ridge *= 100.0;
    }
    None
}

/// Fits a fixed-effects model by Fisher scoring with step-halving.
pub fn fit(data: &ModelingTable, spec: &ModelSpec) -> Result<FittedModel> {
    fit_with(data, spec, &FitOptions::default())
}

pub fn fit_with(data: &ModelingTable, spec: &ModelSpec, opts: &FitOptions) -> Result<FittedModel> {
    let seasons = data.seasons();
    if seasons.len() < 2 {
        return Err(Error::Invalid(format!(
            "fitting needs at least 2 seasons, got {}",
            seasons.len()
        )));
    }
    let prep = Prepared::new(data, spec)?;
    let names = spec.parameter_names();
    let rep = Reparam::new(&prep.structure);
    let theta0 = match &opts.start {
        Some(s) if s.len() == prep.n_params() => s.clone(),
        Some(s) => {
            return Err(Error::Invalid(format!(
                "start vector has length {}, model needs {}",
                s.len(),
                prep.n_params()
            )))
        }
        None => initial_theta(&prep, data),
    };
    let mut phi = rep.to_phi(&theta0);
    let mut theta = rep.to_theta(&phi);
    let mut ev = prep.evaluate(&theta);
    if !ev.loglik.is_finite() {
        return Err(Error::Numerical("log-likelihood is not finite at the starting value".into()));
    }
    let mut conv = Convergence {
        iterations: 0,
        grad_norm: f64::INFINITY,
        loglik: ev.loglik,
        trace: vec![ev.loglik],
        regularized: 0,
        diagnostics: Vec::new(),
    };
    let mut converged = false;
    let mut stalled = false;
    let mut flat_steps = 0;
    for iter in 0..=opts.max_iter {
        conv.grad_norm = ev.score.norm();
        conv.iterations = iter;
        if conv.grad_norm < opts.tol * (1.0 + ev.loglik.abs()) {
            converged = true;
            break;
        }
        if iter == opts.max_iter {
            break;
        }
        let jac = rep.jacobian(&phi);
        let g_phi = jac.transpose() * &ev.score;
        let info = jac.transpose() * &ev.fisher * &jac;
        let mut ridged = false;
        let Some(dir) = solve_spd(info, &g_phi, &mut ridged) else {
            return Err(Error::Singular(
                "information matrix cannot be factored; simplify the model".into(),
            ));
        };
        if ridged {
            conv.regularized += 1;
            conv.diagnostics.push(format!("iteration {iter}: information regularized"));
        }
        let noise = 1e-13 * (1.0 + ev.loglik.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = phi.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let cand_theta = rep.to_theta(&cand);
            let ll = prep.loglik(&cand_theta);
            if ll.is_finite() && ll >= ev.loglik - noise {
                accepted = Some((cand, cand_theta));
                break;
            }
            step *= 0.5;
        }
        let Some((new_phi, new_theta)) = accepted else {
            stalled = true;
            break;
        };
        check_finite_theta(&names, &new_theta)?;
        phi = new_phi;
        theta = new_theta;
        let prev = ev.loglik;
        ev = prep.evaluate(&theta);
        conv.trace.push(ev.loglik);
        flat_steps = if ev.loglik - prev <= noise { flat_steps + 1 } else { 0 };
        if flat_steps >= STALL_STEPS {
            conv.grad_norm = ev.score.norm();
            stalled = true;
            break;
        }
    }
    conv.loglik = ev.loglik;
    if !converged && stalled && conv.grad_norm < STALL_TOL * (1.0 + ev.loglik.abs()) {
        // clamped BCM terms leave kinks where the score cannot vanish
        converged = true;
        conv.diagnostics.push(format!(
            "log-likelihood stalled at the rounding floor with score norm {:.3e}",
            conv.grad_norm
        ));
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: conv.iterations,
            grad_norm: conv.grad_norm,
            best: theta,
            trace: conv.trace,
        });
    }
    check_finite_theta(&names, &theta)?;
    check_clamping(&prep, &ev)?;
    let (sandwich, model) = covariances(&ev)?;
    let cov_rows = to_rows(&sandwich);
    let mut fitted = FittedModel {
        spec: spec.clone(),
        names,
        theta,
        covariance: cov_rows,
        model_covariance: to_rows(&model),
        wald: Vec::new(),
        convergence: conv,
        standardization: data.standardization.clone(),
        n_obs: data.rows.len(),
        n_seasons: seasons.len(),
        grid_adjusted: prep.grid_adjusted,
    };
    if prep.grid_adjusted > 0 {
        fitted.convergence.diagnostics.push(format!(
            "{} rows rounded onto the 1/N grid (N = {})",
            prep.grid_adjusted,
            spec.family.trials()
        ));
    }
    fitted.wald = fitted.wald_table(CovarianceKind::Sandwich);
    Ok(fitted)
}

fn check_clamping(prep: &Prepared, ev: &Evaluation) -> Result<()> {
    if matches!(prep.family, Family::Bcm { .. })
        && ev.evaluations > 0
        && ev.clamped as f64 > MAX_CLAMP_SHARE * ev.evaluations as f64
    {
        return Err(Error::InvalidFamily(format!(
            "{} of {} BCM category probabilities were negative at the estimate \
             (crossing nominal thresholds); use the MB family for this structure",
            ev.clamped, ev.evaluations
        )));
    }
    Ok(())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn covariances(ev: &Evaluation) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a_inv = ev
        .opg
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| {
            Error::Singular(
                "score outer-product matrix is singular; simplify the model (fewer nominal effects or covariates)"
                    .into(),
            )
        })?;
    let a_inv = symmetrize(a_inv);
    let sandwich = symmetrize(&a_inv * &ev.clustered * &a_inv);
    Ok((sandwich, a_inv))
}

/// `(A^-1 B A^-1, A^-1)` at `theta`; both are sums over seasons, so they
/// already carry the `1/I` scaling of averaged information.
pub fn sandwich_covariance(
    data: &ModelingTable,
    spec: &ModelSpec,
    theta: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let prep = Prepared::new(data, spec)?;
    if theta.len() != prep.n_params() {
        return Err(Error::Invalid("parameter vector has the wrong length".into()));
    }
    covariances(&prep.evaluate(theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedRow {
    pub season: i32,
    pub day: u32,
    /// Cumulative means, `m[0] = 1`.
    pub m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedProgress {
    pub stages: Vec<String>,
    pub rows: Vec<PredictedRow>,
}

impl PredictedProgress {
    pub fn find(&self, season: i32, day: u32) -> Option<&PredictedRow> {
        self.rows
            .binary_search_by_key(&(season, day), |r| (r.season, r.day))
            .ok()
            .map(|i| &self.rows[i])
    }
}

/// Writes predictions as percentages, one column per stage.
pub fn write_predictions<W: Write>(pred: &PredictedProgress, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["season".to_string(), "day".to_string()];
    header.extend(pred.stages.iter().cloned());
    w.write_record(&header)?;
    for r in &pred.rows {
        let mut rec = vec![r.season.to_string(), r.day.to_string()];
        rec.extend(r.m[1..].iter().map(|&v| format_percent(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}

pub fn save_predictions(pred: &PredictedProgress, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(pred, std::io::BufWriter::new(f))
}

/// Every (season, day) key of a feature frame.
pub fn all_days(features: &FeatureFrame) -> Vec<(i32, u32)> {
    features.rows().iter().map(|r| (r.season, r.day)).collect()
}

/// Raw covariates for the requested keys, or the list of uncovered keys.
pub(crate) fn raw_covariates(
    features: &FeatureFrame,
    covariates: &[Covariate],
    days: &[(i32, u32)],
) -> Result<Vec<(i32, u32, Vec<f64>)>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(days.len());
    for &(s, d) in days {
        match features.find(s, d).map(|r| r.raw(covariates)) {
            Some(Ok(raw)) => out.push((s, d, raw)),
            _ => missing.push((s, d)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    out.sort_by_key(|r| (r.0, r.1));
    out.dedup_by_key(|r| (r.0, r.1));
    Ok(out)
}

/// Cumulative means at the requested days, standardizing the raw features
/// with the model's stored parameters.
pub fn predict(model: &FittedModel, features: &FeatureFrame, days: &[(i32, u32)]) -> Result<PredictedProgress> {
    let rows = raw_covariates(features, &model.spec.covariates, days)?
        .into_iter()
        .map(|(season, day, raw)| PredictedRow {
            season,
            day,
            m: model.means(&model.standardization.apply(&raw)),
        })
        .collect();
    Ok(PredictedProgress { stages: model.spec.scheme.stages().to_vec(), rows })
}

/// Expected information (Fisher) at `theta`, used by diagnostics and tests.
pub fn expected_information(data: &ModelingTable, spec: &ModelSpec, theta: &[f64]) -> Result<DMatrix<f64>> {
    let prep = Prepared::new(data, spec)?;
    Ok(prep.evaluate(theta).fisher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ModelingRow;

    fn scheme3() -> StageScheme {
        StageScheme::from_labels("corn", &["Emerged", "Silking"]).unwrap()
    }

    fn table(rows: Vec<(i32, u32, Vec<f64>, f64)>) -> ModelingTable {
        let params = StandardizationParams::identity(&[Covariate::Calendar]);
        let rows = rows
            .into_iter()
            .map(|(season, day, y, x)| ModelingRow { season, day, y, raw: vec![x], x: vec![x] })
            .collect();
        ModelingTable::new(scheme3(), params, rows).unwrap()
    }

    #[test]
    fn parameter_names_and_codes() {
        let spec = ModelSpec::new(
            scheme3(),
            Link::Probit,
            Family::Mb { trials: 100 },
            SettingSpec::Thermal,
            vec![Effect::Nominal, Effect::Ordinal],
        )
        .unwrap();
        assert_eq!(
            spec.parameter_names(),
            vec!["Emerged", "Silking", "Calendar:Emerged", "Calendar:Silking", "Thermal"]
        );
        assert_eq!(spec.code(), "p○■");
        assert!(ModelSpec::with_covariates(
            scheme3(),
            Link::Logit,
            Family::Mb { trials: 1 },
            vec![Covariate::Thermal],
            vec![Effect::Ordinal]
        )
        .is_err());
    }

    #[test]
    fn reparam_round_trip_and_jacobian() {
        let s = MeanStructure::new(4, vec![Effect::Ordinal]);
        let rep = Reparam::new(&s);
        let theta = [2.0, 0.5, -1.0, 0.3];
        let phi = rep.to_phi(&theta);
        let back = rep.to_theta(&phi);
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        let j = rep.jacobian(&phi);
        let h = 1e-7;
        for l in 0..4 {
            let mut p2 = phi.clone();
            p2[l] += h;
            let t2 = rep.to_theta(&p2);
            for c in 0..4 {
                let fd = (t2[c] - back[c]) / h;
                assert!((fd - j[(c, l)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn wald_markers() {
        let r = WaldRow::new("x".into(), 1.959_963_984_540_054, 1.0);
        assert!((r.p - 0.05).abs() < 1e-12);
        assert_eq!(significance_marker(0.04), "•");
        assert_eq!(significance_marker(0.0005), "⋆");
        assert_eq!(significance_marker(0.2), "");
    }

    #[test]
    fn single_season_is_rejected() {
        let t = table(vec![(1, 1, vec![1.0, 0.5, 0.2], 0.0), (1, 2, vec![1.0, 0.6, 0.3], 1.0)]);
        let spec = ModelSpec::new(
            scheme3(),
            Link::Logit,
            Family::Bcm { trials: 10 },
            SettingSpec::Calendar,
            vec![Effect::Ordinal],
        )
        .unwrap();
        assert!(matches!(fit(&t, &spec), Err(Error::Invalid(_))));
    }

    #[test]
    fn perfectly_separated_data_is_diagnosed() {
        let mut rows = Vec::new();
        for s in 0..4 {
            for d in 0..6u32 {
                let x = d as f64 - 2.5;
                let y = if x < 0.0 { vec![1.0, 0.0, 0.0] } else { vec![1.0, 1.0, 1.0] };
                rows.push((s, d + 1, y, x));
            }
        }
        let spec = ModelSpec::new(
            scheme3(),
            Link::Logit,
            Family::Bcm { trials: 10 },
            SettingSpec::Calendar,
            vec![Effect::Ordinal],
        )
        .unwrap();
        let err = fit(&table(rows), &spec).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }
}
