//! Cumulative link mixed models fitted by maximizing a Laplace-approximated
//! marginal likelihood.
//!
//! Random effects are standardized: a season intercept for free stage `c`
//! enters as `sigma_a[c] * u[i][c]` and a stage slope on covariate `p` as
//! `x_p * sigma_b[p] * v[c][p]`, with all `u`, `v` independent standard
//! normal. Stage slopes are shared by every season, so the joint integral
//! runs over all season intercepts and the slopes together. Its negative
//! Hessian is block-arrow shaped (one block per season plus a dense slope
//! border) and is factored through the Schur complement of the border.
//!
//! The outer problem optimizes fixed effects and log standard deviations by
//! BFGS on finite-difference gradients. Standard errors come from a
//! finite-difference Hessian of the Laplace objective.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::ModelingTable;
use crate::estimation::{self, Convergence, FittedModel, ModelSpec, PredictedProgress, PredictedRow, Reparam, WaldRow};
use crate::evaluation::within_sample_rmse;
use crate::features::{Covariate, FeatureFrame, StandardizationParams};
use crate::likelihood::{eta_terms, means_from_eta, Prepared, Want};
use crate::{Error, Result};

/// Standard deviations below this are dropped and the model refitted.
pub const MIN_SD: f64 = 1e-6;

const INNER_TOL: f64 = 1e-10;
const INNER_MAX_ITER: usize = 100;

/// Result of a Laplace approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplace {
    pub log_integral: f64,
    pub mode: Vec<f64>,
    /// `log det(-H)` at the mode.
    pub log_det: f64,
    pub iterations: usize,
}

/// Laplace approximation of `log ∫ exp(logf(u)) du`.
///
/// `logf` returns the value, gradient and Hessian at `u`. The mode is found
/// by Newton's method with step-halving from `start`.
pub fn laplace_logdensity<F>(logf: F, start: &[f64]) -> Result<Laplace>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>, DMatrix<f64>),
{
    let q = start.len();
    let mut u = start.to_vec();
    let (mut val, mut grad, mut hess) = logf(&u);
    let mut iterations = 0;
    loop {
        let gnorm = grad.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if gnorm < INNER_TOL {
            break;
        }
        if iterations >= INNER_MAX_ITER {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gnorm,
                best: u,
                trace: vec![val],
            });
        }
        iterations += 1;
        let neg = -hess.clone();
        let chol = neg.cholesky().ok_or(Error::IndefiniteHessian { season: None })?;
        let dir = chol.solve(&DVector::from_column_slice(&grad));
        let decrement: f64 = dir.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..=30 {
            let cand: Vec<f64> = u.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let (v, g, h) = logf(&cand);
            if v.is_finite() && v >= val - 1e-14 * (1.0 + val.abs()) {
                u = cand;
                val = v;
                grad = g;
                hess = h;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || decrement < 1e-22 {
            break;
        }
    }
    let neg = -hess;
    let chol = neg.cholesky().ok_or(Error::IndefiniteHessian { season: None })?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(Laplace {
        log_integral: 0.5 * q as f64 * (2.0 * PI).ln() - 0.5 * log_det + val,
        mode: u,
        log_det,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomEffectsSpec {
    /// One random intercept per season and free stage, with one SD per stage.
    pub seasonal_intercepts: bool,
    /// Covariates carrying stage-level random slopes, one SD per covariate.
    pub slopes: Vec<Covariate>,
}

impl RandomEffectsSpec {
    pub fn intercepts() -> Self {
        Self { seasonal_intercepts: true, slopes: Vec::new() }
    }

    pub fn n_components(&self, n_free: usize) -> usize {
        (if self.seasonal_intercepts { n_free } else { 0 }) + self.slopes.len()
    }

    pub fn component_names(&self, spec: &ModelSpec) -> Vec<String> {
        let mut out = Vec::new();
        if self.seasonal_intercepts {
            out.extend(spec.scheme.stages().iter().cloned());
        }
        out.extend(self.slopes.iter().map(|c| c.label().to_string()));
        out
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !self.seasonal_intercepts && self.slopes.is_empty() {
            return Err(Error::Invalid("a mixed model needs at least one random term".into()));
        }
        for c in &self.slopes {
            if !spec.covariates.contains(c) {
                return Err(Error::Invalid(format!(
                    "random slope on `{}`, which is not a model covariate",
                    c.label()
                )));
            }
        }
        let mut seen = self.slopes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.slopes.len() {
            return Err(Error::Invalid("duplicate random slope covariate".into()));
        }
        Ok(())
    }
}

/// Posterior modes of the random effects, on the linear-predictor scale.
#[derive(Debug, Clone, Default, PartialEq)]
struct Mode {
    u: Vec<f64>,
    v: Vec<f64>,
}

struct InnerEval {
    h: f64,
    grad_u: Vec<f64>,
    grad_v: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
    border: Vec<DMatrix<f64>>,
    corner: DMatrix<f64>,
}

/// The inner problem for one value of the fixed effects and SDs.
struct Inner<'a> {
    prep: &'a Prepared,
    q: usize,
    /// Intercept SDs per free stage (empty when intercepts are off).
    sa: Vec<f64>,
    /// Slope SDs with the covariate index they act on.
    sb: Vec<(usize, f64)>,
    eta_fixed: Vec<Vec<f64>>,
}

impl<'a> Inner<'a> {
    fn new(prep: &'a Prepared, theta: &[f64], sa: Vec<f64>, sb: Vec<(usize, f64)>) -> Self {
        let eta_fixed = prep.obs.iter().map(|o| prep.eta(o, theta)).collect();
        Self { prep, q: prep.structure.n_free, sa, sb, eta_fixed }
    }

    fn qa(&self) -> usize {
        self.sa.len()
    }

    fn r(&self) -> usize {
        self.q * self.sb.len()
    }

    fn zeros(&self) -> Mode {
        Mode { u: vec![0.0; self.prep.seasons.len() * self.qa()], v: vec![0.0; self.r()] }
    }

    fn eta(&self, obs: usize, season: usize, mode: &Mode) -> Vec<f64> {
        let o = &self.prep.obs[obs];
        let qa = self.qa();
        let ns = self.sb.len();
        let mut eta = self.eta_fixed[obs].clone();
        for c in 0..self.q {
            if qa > 0 {
                eta[c] += self.sa[c] * mode.u[season * qa + c];
            }
            for (k, &(p, s)) in self.sb.iter().enumerate() {
                eta[c] += o.x[p] * s * mode.v[c * ns + k];
            }
        }
        eta
    }

    fn value(&self, mode: &Mode) -> f64 {
        let mut h = -0.5 * (mode.u.iter().map(|x| x * x).sum::<f64>() + mode.v.iter().map(|x| x * x).sum::<f64>());
        for (i, (_, range)) in self.prep.seasons.iter().enumerate() {
            for j in range.clone() {
                let eta = self.eta(j, i, mode);
                h += eta_terms(self.prep.family, self.prep.link, &self.prep.obs[j].counts, &eta, Want::VALUE).loglik;
            }
        }
        if h.is_finite() {
            h
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Value, gradient and negative Hessian blocks; `fisher` swaps the
    /// observed curvature for the expected one.
    fn assemble(&self, mode: &Mode, fisher: bool) -> InnerEval {
        let (q, qa, ns, r) = (self.q, self.qa(), self.sb.len(), self.r());
        let n_seasons = self.prep.seasons.len();
        let mut ev = InnerEval {
            h: -0.5 * (mode.u.iter().map(|x| x * x).sum::<f64>() + mode.v.iter().map(|x| x * x).sum::<f64>()),
            grad_u: mode.u.iter().map(|x| -x).collect(),
            grad_v: mode.v.iter().map(|x| -x).collect(),
            blocks: vec![DMatrix::identity(qa, qa); n_seasons],
            border: vec![DMatrix::zeros(qa, r); n_seasons],
            corner: DMatrix::identity(r, r),
        };
        let want = if fisher { Want::FISHER } else { Want::HESSIAN };
        let mut zb = vec![0.0; ns];
        for (i, (_, range)) in self.prep.seasons.iter().enumerate() {
            for j in range.clone() {
                let o = &self.prep.obs[j];
                let eta = self.eta(j, i, mode);
                let t = eta_terms(self.prep.family, self.prep.link, &o.counts, &eta, want);
                ev.h += t.loglik;
                let w: Vec<f64> = if fisher { t.fisher.clone() } else { t.hessian.iter().map(|v| -v).collect() };
                for (k, &(p, s)) in self.sb.iter().enumerate() {
                    zb[k] = o.x[p] * s;
                }
                for c in 0..q {
                    if qa > 0 {
                        ev.grad_u[i * qa + c] += t.grad[c] * self.sa[c];
                    }
                    for k in 0..ns {
                        ev.grad_v[c * ns + k] += t.grad[c] * zb[k];
                    }
                    for d in 0..q {
                        let wcd = w[c * q + d];
                        if wcd == 0.0 {
                            continue;
                        }
                        if qa > 0 {
                            ev.blocks[i][(c, d)] += wcd * self.sa[c] * self.sa[d];
                            for k in 0..ns {
                                ev.border[i][(c, d * ns + k)] += wcd * self.sa[c] * zb[k];
                            }
                        }
                        for k in 0..ns {
                            for l in 0..ns {
                                ev.corner[(c * ns + k, d * ns + l)] += wcd * zb[k] * zb[l];
                            }
                        }
                    }
                }
            }
        }
        if !ev.h.is_finite() {
            ev.h = f64::NEG_INFINITY;
        }
        ev
    }

    /// Newton direction and `log det` of the negative Hessian.
    fn solve(&self, ev: &InnerEval) -> Result<(Mode, f64)> {
        let (qa, r) = (self.qa(), self.r());
        let mut log_det = 0.0;
        let mut chols = Vec::with_capacity(ev.blocks.len());
        let mut schur = ev.corner.clone();
        let mut rhs_v = DVector::from_column_slice(&ev.grad_v);
        for (i, block) in ev.blocks.iter().enumerate() {
            if qa == 0 {
                break;
            }
            let ch = block
                .clone()
                .cholesky()
                .ok_or(Error::IndefiniteHessian { season: Some(self.prep.seasons[i].0) })?;
            log_det += 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if r > 0 {
                let gi = DVector::from_column_slice(&ev.grad_u[i * qa..(i + 1) * qa]);
                let dinv_c = ch.solve(&ev.border[i]);
                schur -= ev.border[i].transpose() * &dinv_c;
                rhs_v -= ev.border[i].transpose() * ch.solve(&gi);
            }
            chols.push(ch);
        }
        let mut dv = DVector::zeros(r);
        if r > 0 {
            let ch = schur.cholesky().ok_or(Error::IndefiniteHessian { season: None })?;
            log_det += 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            dv = ch.solve(&rhs_v);
        }
        let mut du = vec![0.0; ev.grad_u.len()];
        for (i, ch) in chols.iter().enumerate() {
            let mut gi = DVector::from_column_slice(&ev.grad_u[i * qa..(i + 1) * qa]);
            if r > 0 {
                gi -= &ev.border[i] * &dv;
            }
            du[i * qa..(i + 1) * qa].copy_from_slice(ch.solve(&gi).as_slice());
        }
        Ok((Mode { u: du, v: dv.iter().copied().collect() }, log_det))
    }

    /// Maximizes the inner objective and returns `(laplace value, mode)`.
    fn optimize(&self, start: Option<&Mode>) -> Result<(f64, Mode)> {
        let mut mode = match start {
            Some(m) if m.u.len() == self.prep.seasons.len() * self.qa() && m.v.len() == self.r() => m.clone(),
            _ => self.zeros(),
        };
        let mut ev = self.assemble(&mode, false);
        if !ev.h.is_finite() {
            mode = self.zeros();
            ev = self.assemble(&mode, false);
        }
        for iter in 0..=INNER_MAX_ITER {
            let gnorm = ev.grad_u.iter().chain(&ev.grad_v).fold(0.0f64, |a, b| a.max(b.abs()));
            if gnorm < INNER_TOL {
                break;
            }
            let (dir, _) = match self.solve(&ev) {
                Ok(s) => s,
                Err(_) => self.solve(&self.assemble(&mode, true))?,
            };
            let decrement: f64 = dir
                .u
                .iter()
                .zip(&ev.grad_u)
                .chain(dir.v.iter().zip(&ev.grad_v))
                .map(|(a, b)| a * b)
                .sum();
            if decrement < 1e-22 {
                break;
            }
            if iter == INNER_MAX_ITER {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    grad_norm: gnorm,
                    best: mode.u.iter().chain(&mode.v).copied().collect(),
                    trace: vec![ev.h],
                });
            }
            let noise = 1e-14 * (1.0 + ev.h.abs());
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=30 {
                let cand = Mode {
                    u: mode.u.iter().zip(&dir.u).map(|(a, d)| a + step * d).collect(),
                    v: mode.v.iter().zip(&dir.v).map(|(a, d)| a + step * d).collect(),
                };
                let h = self.value(&cand);
                if h.is_finite() && h >= ev.h - noise {
                    accepted = Some(cand);
                    break;
                }
                step *= 0.5;
            }
            let Some(cand) = accepted else { break };
            mode = cand;
            ev = self.assemble(&mode, false);
        }
        let (_, log_det) = self.solve(&ev)?;
        Ok((ev.h - 0.5 * log_det, mode))
    }
}

/// Splits an SD vector into intercept and slope parts.
fn split_sds(spec: &ModelSpec, re: &RandomEffectsSpec, sds: &[f64]) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    let q = spec.scheme.k() - 1;
    if sds.len() != re.n_components(q) {
        return Err(Error::Invalid(format!(
            "expected {} standard deviations, got {}",
            re.n_components(q),
            sds.len()
        )));
    }
    if sds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Invalid("standard deviations must be finite and non-negative".into()));
    }
    let qa = if re.seasonal_intercepts { q } else { 0 };
    let sa = sds[..qa].to_vec();
    let sb = re
        .slopes
        .iter()
        .zip(&sds[qa..])
        .filter(|(_, &s)| s > 0.0)
        .map(|(c, &s)| (spec.covariates.iter().position(|d| d == c).unwrap(), s))
        .collect();
    // intercept blocks with every SD zero reduce to the prior alone
    let sa = if sa.iter().all(|&s| s == 0.0) { Vec::new() } else { sa };
    Ok((sa, sb))
}

/// Laplace-approximated marginal log-likelihood. Components with zero SD
/// are excluded, so all-zero SDs give the fixed partial log-likelihood.
pub fn laplace_objective(
    data: &ModelingTable,
    spec: &ModelSpec,
    re: &RandomEffectsSpec,
    theta: &[f64],
    sds: &[f64],
) -> Result<f64> {
    re.validate(spec)?;
    let prep = Prepared::new(data, spec)?;
    if theta.len() != prep.n_params() {
        return Err(Error::Invalid("parameter vector has the wrong length".into()));
    }
    let (sa, sb) = split_sds(spec, re, sds)?;
    Inner::new(&prep, theta, sa, sb).optimize(None).map(|(v, _)| v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub name: String,
    pub sd: f64,
    /// Delta-method SE from the log-SD scale.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonEffects {
    pub season: i32,
    /// Predicted intercept per free stage.
    pub intercepts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSlopes {
    pub covariate: Covariate,
    /// Predicted slope deviation per free stage.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMixedModel {
    pub spec: ModelSpec,
    /// Random terms actually retained.
    pub random: RandomEffectsSpec,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// Laplace model-based SEs.
    pub wald: Vec<WaldRow>,
    pub se_kind: String,
    pub components: Vec<VarianceComponent>,
    /// Terms whose SD collapsed below the floor and were removed.
    pub dropped: Vec<String>,
    pub seasons: Vec<SeasonEffects>,
    pub slopes: Vec<StageSlopes>,
    pub loglik: f64,
    /// Within-sample RMSE of the mixed fit.
    pub rmse: f64,
    /// Within-sample RMSE of the fixed-effects fit on the same data.
    pub fixed_rmse: f64,
    pub convergence: Convergence,
    pub standardization: StandardizationParams,
}

impl FittedMixedModel {
    pub fn thresholds(&self) -> &[f64] {
        &self.theta[..self.spec.scheme.k() - 1]
    }

    pub fn season_effects(&self, season: i32) -> Option<&SeasonEffects> {
        self.seasons.iter().find(|s| s.season == season)
    }

    pub fn coefficient(&self, cov: Covariate, c: usize) -> Option<f64> {
        let as_fixed = self.as_fixed_view();
        as_fixed.coefficient(cov, c)
    }

    fn as_fixed_view(&self) -> FittedModel {
        FittedModel {
            spec: self.spec.clone(),
            names: self.names.clone(),
            theta: self.theta.clone(),
            covariance: Vec::new(),
            model_covariance: Vec::new(),
            wald: Vec::new(),
            convergence: self.convergence.clone(),
            standardization: self.standardization.clone(),
            n_obs: 0,
            n_seasons: self.seasons.len(),
            grid_adjusted: 0,
        }
    }

    /// Cumulative means for `season` at standardized covariates `x`.
    pub fn means(&self, season: i32, x: &[f64]) -> Result<Vec<f64>> {
        let eff = self.season_effects(season).ok_or(Error::UnknownSeason(season))?;
        let structure = self.spec.structure();
        let mut eta = structure.eta(&self.theta, x);
        for (c, e) in eta.iter_mut().enumerate() {
            if let Some(a) = eff.intercepts.get(c) {
                *e += a;
            }
            for s in &self.slopes {
                let p = self.spec.covariates.iter().position(|d| *d == s.covariate).unwrap();
                *e += x[p] * s.values[c];
            }
        }
        Ok(means_from_eta(self.spec.link, &eta))
    }

    pub fn fitted(&self, table: &ModelingTable) -> Result<PredictedProgress> {
        let rows = table
            .rows
            .iter()
            .map(|r| Ok(PredictedRow { season: r.season, day: r.day, m: self.means(r.season, &r.x)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictedProgress { stages: self.spec.scheme.stages().to_vec(), rows })
    }
}

/// Daily cumulative means for every feature row, using each season's
/// predicted random effects.
pub fn interpolate(model: &FittedMixedModel, features: &FeatureFrame) -> Result<PredictedProgress> {
    for s in features.seasons() {
        if model.season_effects(s).is_none() {
            return Err(Error::UnknownSeason(s));
        }
    }
    let days = estimation::all_days(features);
    let rows = estimation::raw_covariates(features, &model.spec.covariates, &days)?
        .into_iter()
        .map(|(season, day, raw)| {
            Ok(PredictedRow { season, day, m: model.means(season, &model.standardization.apply(&raw))? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictedProgress { stages: model.spec.scheme.stages().to_vec(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedOptions {
    pub max_iter: usize,
    /// Outer convergence when the gradient norm is below `tol * (1 + |L|)`.
    pub tol: f64,
    /// Starting SD for every variance component.
    pub start_sd: f64,
}

impl Default for MixedOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-6, start_sd: 0.5 }
    }
}

pub fn fit_mixed(data: &ModelingTable, spec: &ModelSpec, re: &RandomEffectsSpec) -> Result<FittedMixedModel> {
    fit_mixed_with(data, spec, re, &MixedOptions::default())
}

/// Which components are still free, as indices into the full SD vector.
fn active_components(n: usize, dropped: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !dropped.contains(i)).collect()
}

struct Outer<'a> {
    prep: &'a Prepared,
    spec: &'a ModelSpec,
    re: &'a RandomEffectsSpec,
    rep: Reparam,
    n_sd: usize,
    active: Vec<usize>,
    p: usize,
}

impl Outer<'_> {
    fn sds(&self, log_sd: &[f64]) -> Vec<f64> {
        let mut sds = vec![0.0; self.n_sd];
        for (&i, &l) in self.active.iter().zip(log_sd) {
            sds[i] = l.exp();
        }
        sds
    }

    /// Laplace objective at natural fixed effects and log SDs.
    fn eval_theta(&self, theta: &[f64], log_sd: &[f64], start: Option<&Mode>) -> Result<(f64, Mode)> {
        let (sa, sb) = split_sds(self.spec, self.re, &self.sds(log_sd))?;
        Inner::new(self.prep, theta, sa, sb).optimize(start)
    }

    fn eval_psi(&self, psi: &[f64], start: Option<&Mode>) -> f64 {
        let theta = self.rep.to_theta(&psi[..self.p]);
        if theta.iter().any(|t| !t.is_finite() || t.abs() > estimation::SEPARATION_BOUND) {
            return f64::NEG_INFINITY;
        }
        match self.eval_theta(&theta, &psi[self.p..], start) {
            Ok((v, _)) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Central finite-difference Hessian.
fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], f0: f64) -> DMatrix<f64> {
    let n = x.len();
    let hs: Vec<f64> = x.iter().map(|&v| 1e-4 * v.abs().max(1.0)).collect();
    let mut h = DMatrix::zeros(n, n);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in pairs {
            y[i] += d;
        }
        f(&y)
    };
    for i in 0..n {
        let hi = hs[i];
        h[(i, i)] = (shifted(&[(i, 2.0 * hi)]) - 2.0 * f0 + shifted(&[(i, -2.0 * hi)])) / (4.0 * hi * hi);
        for j in 0..i {
            let hj = hs[j];
            let v = (shifted(&[(i, hi), (j, hj)]) - shifted(&[(i, hi), (j, -hj)]) - shifted(&[(i, -hi), (j, hj)])
                + shifted(&[(i, -hi), (j, -hj)]))
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

struct Bfgs {
    x: Vec<f64>,
    fx: f64,
    grad_norm: f64,
    iterations: usize,
    trace: Vec<f64>,
    converged: bool,
    diagnostics: Vec<String>,
}

/// Maximizes `f` by BFGS with backtracking and finite-difference gradients.
fn bfgs_max(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>, h0: DMatrix<f64>, tol: f64, max_iter: usize) -> Bfgs {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = DVector::from_vec(fd_gradient(f, &x));
    let mut hinv = h0;
    let mut out = Bfgs {
        x: Vec::new(),
        fx,
        grad_norm: f64::INFINITY,
        iterations: 0,
        trace: vec![fx],
        converged: false,
        diagnostics: Vec::new(),
    };
    for iter in 0..=max_iter {
        out.iterations = iter;
        out.grad_norm = g.norm();
        if out.grad_norm < tol * (1.0 + fx.abs()) {
            out.converged = true;
            break;
        }
        if iter == max_iter {
            break;
        }
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(n, n) * (1.0 / (1.0 + g.norm()));
            dir = &hinv * &g;
            out.diagnostics.push(format!("iteration {iter}: BFGS metric reset"));
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let fc = f(&cand);
            if fc.is_finite() && fc >= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            out.diagnostics.push(format!("iteration {iter}: line search stalled"));
            break;
        };
        let gn = DVector::from_vec(fd_gradient(f, &xn));
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        // ascent on f is descent on -f: y = -(gn - g)
        let y = -(&gn - &g);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fxn;
        g = gn;
        out.trace.push(fx);
    }
    out.x = x;
    out.fx = fx;
    out
}

fn initial_metric(f: &dyn Fn(&[f64]) -> f64, x: &[f64], fx: f64) -> DMatrix<f64> {
    let n = x.len();
    let neg = -fd_hessian(f, x, fx);
    if let Some(ch) = neg.clone().cholesky() {
        return ch.inverse();
    }
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            let d = neg[(i, i)];
            if d > 0.0 { 1.0 / d } else { 1.0 }
        } else {
            0.0
        }
    })
}

pub fn fit_mixed_with(
    data: &ModelingTable,
    spec: &ModelSpec,
    re: &RandomEffectsSpec,
    opts: &MixedOptions,
) -> Result<FittedMixedModel> {
    re.validate(spec)?;
    let seasons = data.seasons();
    if re.seasonal_intercepts && seasons.len() < 3 {
        return Err(Error::Invalid(format!(
            "seasonal intercepts need at least 3 seasons, got {}",
            seasons.len()
        )));
    }
    let fixed = estimation::fit(data, spec)?;
    let prep = Prepared::new(data, spec)?;
    let q = spec.scheme.k() - 1;
    let n_sd = re.n_components(q);
    let names_sd = re.component_names(spec);
    let rep = Reparam::new(&prep.structure);
    let p = prep.n_params();

    let mut dropped: Vec<usize> = Vec::new();
    let mut theta = fixed.theta.clone();
    let mut log_sd_full = vec![opts.start_sd.ln(); n_sd];
    let mut diagnostics = Vec::new();
    let mut total_iter = 0;
    let (bf, active) = loop {
        let active = active_components(n_sd, &dropped);
        let outer = Outer { prep: &prep, spec, re, rep, n_sd, active: active.clone(), p };
        let mut psi = rep.to_phi(&theta);
        psi.extend(active.iter().map(|&i| log_sd_full[i]));
        let f = |x: &[f64]| outer.eval_psi(x, None);
        let f0 = f(&psi);
        if !f0.is_finite() {
            return Err(Error::Numerical("Laplace objective is not finite at the starting value".into()));
        }
        let h0 = initial_metric(&f, &psi, f0);
        let bf = bfgs_max(&f, psi, h0, opts.tol, opts.max_iter);
        total_iter += bf.iterations;
        diagnostics.extend(bf.diagnostics.iter().cloned());
        theta = rep.to_theta(&bf.x[..p]);
        for (k, &i) in active.iter().enumerate() {
            log_sd_full[i] = bf.x[p + k];
        }
        let collapsed: Vec<usize> = active.iter().copied().filter(|&i| log_sd_full[i].exp() < MIN_SD).collect();
        if collapsed.is_empty() || active.is_empty() {
            break (bf, active);
        }
        for &i in &collapsed {
            diagnostics.push(format!(
                "variance component `{}` collapsed below {MIN_SD:e}; dropped and refitted",
                names_sd[i]
            ));
        }
        dropped.extend(collapsed);
    };
    let loose = 1e-3 * (1.0 + bf.fx.abs());
    if !bf.converged && !(bf.grad_norm < loose) {
        return Err(Error::NonConvergence {
            iterations: total_iter,
            grad_norm: bf.grad_norm,
            best: bf.x,
            trace: bf.trace,
        });
    }
    if !bf.converged {
        diagnostics.push(format!(
            "outer gradient norm {:.3e} above the tolerance; accepted at the finite-difference noise floor",
            bf.grad_norm
        ));
    }
    let names = spec.parameter_names();
    if let Some((i, v)) = theta.iter().enumerate().find(|(_, v)| v.abs() > estimation::SEPARATION_BOUND) {
        return Err(Error::Separation { parameter: names[i].clone(), value: *v });
    }

    let outer = Outer { prep: &prep, spec, re, rep, n_sd, active: active.clone(), p };
    let log_sd: Vec<f64> = active.iter().map(|&i| log_sd_full[i]).collect();
    let (loglik, mode) = outer.eval_theta(&theta, &log_sd, None)?;

    // curvature over natural fixed effects and log SDs
    let mut point = theta.clone();
    point.extend(&log_sd);
    let g = |x: &[f64]| match outer.eval_theta(&x[..p], &x[p..], Some(&mode)) {
        Ok((v, _)) => v,
        Err(_) => f64::NAN,
    };
    let hess = -fd_hessian(&g, &point, loglik);
    let cov = symmetric_inverse(&hess).ok_or_else(|| {
        Error::Singular("Laplace Hessian is singular; simplify the fixed or random structure".into())
    })?;
    let se: Vec<f64> = (0..point.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let wald = (0..p).map(|i| WaldRow::new(names[i].clone(), theta[i], se[i])).collect();

    let sds = outer.sds(&log_sd);
    let components = active
        .iter()
        .enumerate()
        .map(|(k, &i)| VarianceComponent { name: names_sd[i].clone(), sd: sds[i], se: sds[i] * se[p + k] })
        .collect();

    let (sa, sb) = split_sds(spec, re, &sds)?;
    let qa = sa.len();
    let season_effects = prep
        .seasons
        .iter()
        .enumerate()
        .map(|(i, (s, _))| SeasonEffects {
            season: *s,
            intercepts: (0..qa).map(|c| sa[c] * mode.u[i * qa + c]).collect(),
        })
        .collect();
    let ns = sb.len();
    let slopes = sb
        .iter()
        .enumerate()
        .map(|(k, &(pi, s))| StageSlopes {
            covariate: spec.covariates[pi],
            values: (0..q).map(|c| s * mode.v[c * ns + k]).collect(),
        })
        .collect();
    let mut retained = re.clone();
    if re.seasonal_intercepts && qa == 0 {
        retained.seasonal_intercepts = false;
    }
    retained.slopes = sb.iter().map(|&(pi, _)| spec.covariates[pi]).collect();

    let mut model = FittedMixedModel {
        spec: spec.clone(),
        random: retained,
        names,
        theta,
        wald,
        se_kind: "laplace-model-based".into(),
        components,
        dropped: dropped.iter().map(|&i| names_sd[i].clone()).collect(),
        seasons: season_effects,
        slopes,
        loglik,
        rmse: 0.0,
        fixed_rmse: 0.0,
        convergence: Convergence {
            iterations: total_iter,
            grad_norm: bf.grad_norm,
            loglik,
            trace: bf.trace,
            regularized: 0,
            diagnostics,
        },
        standardization: data.standardization.clone(),
    };
    let observed = data.observed();
    model.rmse = within_sample_rmse(&observed, &model.fitted(data)?)?;
    model.fixed_rmse = within_sample_rmse(&observed, &fixed.fitted(data))?;
    Ok(model)
}

fn symmetric_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky().map(|c| c.inverse()).or_else(|| m.clone().try_inverse())?;
    Some((&inv + inv.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson quadrature.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn scalar(f: impl Fn(f64) -> (f64, f64, f64)) -> impl Fn(&[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        move |u: &[f64]| {
            let (v, g, h) = f(u[0]);
            (v, vec![g], DMatrix::from_element(1, 1, h))
        }
    }

    #[test]
    fn gaussian_integrands_are_exact() {
        let r = laplace_logdensity(scalar(|u| (-0.5 * u * u, -u, -1.0)), &[1.3]).unwrap();
        assert!((r.log_integral - (2.0 * PI).sqrt().ln()).abs() < 1e-12);
        let r = laplace_logdensity(scalar(|u| (-(u - 3.0).powi(2) / 8.0, -(u - 3.0) / 4.0, -0.25)), &[0.0]).unwrap();
        let exact = (8.0 * PI).sqrt().ln();
        assert!(((r.log_integral - exact) / exact).abs() < 1e-12);
        assert!((r.mode[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn quartic_tilt_is_close_to_quadrature() {
        let f = |u: f64| -0.5 * u * u - 0.01 * u.powi(4);
        let r = laplace_logdensity(
            scalar(|u| (f(u), -u - 0.04 * u.powi(3), -1.0 - 0.12 * u * u)),
            &[0.5],
        )
        .unwrap();
        let oracle = simpson(&|u| f(u).exp(), -12.0, 12.0, 1e-12).ln();
        let rel = (r.log_integral.exp() - oracle.exp()) / oracle.exp();
        // first-order Laplace leaves an O(3c) relative error for the c u^4 tilt
        assert!(rel > 0.0 && rel < 0.03, "relative error {rel}");
        assert!((r.log_integral - 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn starting_point_does_not_change_the_value() {
        // two-dimensional convex log-concave integrand
        let logf = |u: &[f64]| {
            let (a, b) = (u[0], u[1]);
            let v = -0.5 * (a * a + 2.0 * b * b + a * b) - (a + b).exp() * 0.1;
            let e = 0.1 * (a + b).exp();
            let g = vec![-(a + 0.5 * b) - e, -(2.0 * b + 0.5 * a) - e];
            let h = DMatrix::from_row_slice(2, 2, &[-1.0 - e, -0.5 - e, -0.5 - e, -2.0 - e]);
            (v, g, h)
        };
        let a = laplace_logdensity(logf, &[0.0, 0.0]).unwrap();
        let b = laplace_logdensity(logf, &[2.0, -3.0]).unwrap();
        assert!((a.log_integral - b.log_integral).abs() < 1e-10);
    }

    #[test]
    fn indefinite_curvature_is_reported() {
        let r = laplace_logdensity(scalar(|u| (0.5 * u * u, u, 1.0)), &[0.0]);
        assert!(matches!(r, Err(Error::IndefiniteHessian { .. })));
    }

    #[test]
    fn finite_difference_hessian_of_a_quadratic() {
        let f = |x: &[f64]| -(x[0] * x[0] + 3.0 * x[0] * x[1] + 5.0 * x[1] * x[1]);
        let x = [0.3, -0.7];
        let h = fd_hessian(&f, &x, f(&x));
        assert!((h[(0, 0)] + 2.0).abs() < 1e-5);
        assert!((h[(0, 1)] + 3.0).abs() < 1e-5);
        assert!((h[(1, 1)] + 10.0).abs() < 1e-5);
    }

    #[test]
    fn bfgs_finds_a_quadratic_maximum() {
        let f = |x: &[f64]| -((x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2));
        let r = bfgs_max(&f, vec![0.0, 0.0], DMatrix::identity(2, 2) * 0.05, 1e-9, 200);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] + 2.0).abs() < 1e-6);
    }
}
