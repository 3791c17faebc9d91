//! Stage-completion requirements and transition times.
//!
//! The requirement of stage `k` is the threshold gap `delta_k = alpha_k -
//! alpha_{k-1}` on the link scale. Time to close that gap follows from the
//! per-day development rate `beta_cal + g * beta_gdd`, with both slopes
//! converted from the standardized scale to raw units (per day and per GDD).

use serde::{Deserialize, Serialize};

use crate::dataset::{StageScheme, WeatherSeries};
use crate::estimation::FittedModel;
use crate::features::{gdd, CardinalTemperatures, Covariate, StandardizationParams};
use crate::mixed::FittedMixedModel;
use crate::{Error, Result};

/// Read access to the fitted quantities the requirement calculus needs.
pub trait StageModel {
    fn scheme(&self) -> &StageScheme;
    fn thresholds(&self) -> &[f64];
    /// Standardized-scale coefficient of `cov` on free category `c`.
    fn coefficient(&self, cov: Covariate, c: usize) -> Option<f64>;
    fn standardization(&self) -> &StandardizationParams;

    /// Predicted season intercepts per free category.
    fn season_intercepts(&self, season: i32) -> Result<Vec<f64>> {
        let _ = season;
        Err(Error::Invalid("season-specific values need a mixed model".into()))
    }

    /// Predicted stage-slope deviation of `cov` on free category `c`.
    fn slope_deviation(&self, cov: Covariate, c: usize) -> f64 {
        let _ = (cov, c);
        0.0
    }
}

impl StageModel for FittedModel {
    fn scheme(&self) -> &StageScheme {
        &self.spec.scheme
    }
    fn thresholds(&self) -> &[f64] {
        FittedModel::thresholds(self)
    }
    fn coefficient(&self, cov: Covariate, c: usize) -> Option<f64> {
        FittedModel::coefficient(self, cov, c)
    }
    fn standardization(&self) -> &StandardizationParams {
        &self.standardization
    }
}

impl StageModel for FittedMixedModel {
    fn scheme(&self) -> &StageScheme {
        &self.spec.scheme
    }
    fn thresholds(&self) -> &[f64] {
        FittedMixedModel::thresholds(self)
    }
    fn coefficient(&self, cov: Covariate, c: usize) -> Option<f64> {
        FittedMixedModel::coefficient(self, cov, c)
    }
    fn standardization(&self) -> &StandardizationParams {
        &self.standardization
    }
    fn season_intercepts(&self, season: i32) -> Result<Vec<f64>> {
        let e = self.season_effects(season).ok_or(Error::UnknownSeason(season))?;
        let q = self.spec.scheme.k() - 1;
        Ok((0..q).map(|c| e.intercepts.get(c).copied().unwrap_or(0.0)).collect())
    }
    fn slope_deviation(&self, cov: Covariate, c: usize) -> f64 {
        self.slopes
            .iter()
            .find(|s| s.covariate == cov)
            .map_or(0.0, |s| s.values[c])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub from: String,
    pub to: String,
    /// Index of the target stage in [`StageScheme::stages`].
    pub stage: usize,
    /// `alpha_k - alpha_{k-1}`, link scale.
    pub delta: f64,
    pub magnitude: f64,
    pub season: Option<i32>,
}

/// Thresholds, shifted by a season's predicted intercepts when given.
fn effective_thresholds(model: &dyn StageModel, season: Option<i32>) -> Result<Vec<f64>> {
    let mut a = model.thresholds().to_vec();
    if let Some(s) = season {
        for (x, d) in a.iter_mut().zip(model.season_intercepts(s)?) {
            *x += d;
        }
    }
    Ok(a)
}

/// Requirements of every stage after the first free one.
pub fn requirements(model: &dyn StageModel, season: Option<i32>) -> Result<Vec<Requirement>> {
    let a = effective_thresholds(model, season)?;
    let stages = model.scheme().stages();
    Ok((1..a.len())
        .map(|c| {
            let delta = a[c] - a[c - 1];
            Requirement {
                from: stages[c - 1].clone(),
                to: stages[c].clone(),
                stage: c,
                delta,
                magnitude: delta.abs(),
                season,
            }
        })
        .collect())
}

/// Index of a stage by label (case-insensitive).
pub fn stage_index(scheme: &StageScheme, label: &str) -> Result<usize> {
    scheme
        .stages()
        .iter()
        .position(|s| s.eq_ignore_ascii_case(label.trim()))
        .ok_or_else(|| Error::Invalid(format!("unknown stage `{label}`")))
}

/// Raw-unit development rates of the calendar and thermal covariates for
/// the transition into `stage`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawRates {
    /// Link-scale units per day.
    pub calendar: f64,
    /// Link-scale units per GDD.
    pub thermal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTime {
    pub stage: String,
    pub days: f64,
    pub magnitude: f64,
    pub rates: RawRates,
    /// Constant daily GDD assumed over the interval, when applicable.
    pub gdd_rate: Option<f64>,
    pub unit: String,
}

fn requirement_for(model: &dyn StageModel, stage: usize, season: Option<i32>) -> Result<f64> {
    let q = model.scheme().stages().len();
    if stage < 1 || stage >= q {
        return Err(Error::Invalid(format!(
            "stage index {stage} has no requirement; valid range is 1..{}",
            q - 1
        )));
    }
    let a = effective_thresholds(model, season)?;
    Ok((a[stage] - a[stage - 1]).abs())
}

/// Slopes per raw unit. Refuses when the model carries no scale for a
/// covariate, since day counts would then be meaningless.
pub fn raw_rates(model: &dyn StageModel, stage: usize, season: Option<i32>) -> Result<RawRates> {
    let c = stage;
    let params = model.standardization();
    let per_unit = |cov: Covariate| -> Result<f64> {
        let Some(beta) = model.coefficient(cov, c) else { return Ok(0.0) };
        let beta = beta + if season.is_some() { model.slope_deviation(cov, c) } else { 0.0 };
        let sd = params.sd_of(cov).ok_or_else(|| {
            Error::Invalid(format!(
                "model stores no scale for `{}`; day units are unavailable",
                cov.label()
            ))
        })?;
        Ok(beta / sd)
    };
    let calendar = match model.coefficient(Covariate::Calendar, c) {
        Some(_) => per_unit(Covariate::Calendar)?,
        None => return Err(Error::Invalid("model has no calendar coefficient".into())),
    };
    Ok(RawRates { calendar, thermal: per_unit(Covariate::Thermal)? })
}

/// Days to complete `stage` at a constant daily GDD `gdd_rate` in `[0, 1]`.
pub fn transition_time(
    model: &dyn StageModel,
    stage: usize,
    gdd_rate: f64,
    season: Option<i32>,
) -> Result<TransitionTime> {
    if !(0.0..=1.0).contains(&gdd_rate) {
        return Err(Error::Invalid(format!("GDD rate {gdd_rate} outside [0, 1]")));
    }
    let magnitude = requirement_for(model, stage, season)?;
    let rates = raw_rates(model, stage, season)?;
    let denom = rates.calendar + gdd_rate * rates.thermal;
    if !(denom > 0.0) {
        return Err(Error::Infeasible("development rate non-positive under given conditions".into()));
    }
    Ok(TransitionTime {
        stage: model.scheme().stages()[stage].clone(),
        days: magnitude / denom,
        magnitude,
        rates,
        gdd_rate: Some(gdd_rate),
        unit: "days (constant GDD rate)".into(),
    })
}

/// Constant daily GDD needed to complete `stage` in `target_days`.
pub fn required_gdd_rate(model: &dyn StageModel, stage: usize, target_days: f64, season: Option<i32>) -> Result<f64> {
    if !(target_days > 0.0) {
        return Err(Error::Invalid("target days must be positive".into()));
    }
    let magnitude = requirement_for(model, stage, season)?;
    let rates = raw_rates(model, stage, season)?;
    if rates.thermal == 0.0 {
        return Err(Error::Infeasible("thermal slope is zero; the GDD rate cannot influence timing".into()));
    }
    let g = (magnitude / target_days - rates.calendar) / rates.thermal;
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Infeasible(format!(
            "required GDD rate {g:.6} lies outside [0, 1]"
        )));
    }
    Ok(g)
}

/// Days to complete `stage` starting at `start_day` of a weather season,
/// accumulating the actual daily GDD. The final day is interpolated.
pub fn transition_time_weather(
    model: &dyn StageModel,
    stage: usize,
    weather: &WeatherSeries,
    weather_season: i32,
    start_day: u32,
    cardinal: &CardinalTemperatures,
    season: Option<i32>,
) -> Result<TransitionTime> {
    let magnitude = requirement_for(model, stage, season)?;
    let rates = raw_rates(model, stage, season)?;
    let mut progress = 0.0;
    let mut days = 0.0;
    let mut seen = false;
    for w in weather.season(weather_season).filter(|w| w.day >= start_day) {
        seen = true;
        let step = rates.calendar + gdd(w.t_min, w.t_max, cardinal) * rates.thermal;
        if progress + step >= magnitude && step > 0.0 {
            return Ok(TransitionTime {
                stage: model.scheme().stages()[stage].clone(),
                days: days + (magnitude - progress) / step,
                magnitude,
                rates,
                gdd_rate: None,
                unit: "days (observed weather)".into(),
            });
        }
        progress += step;
        days += 1.0;
    }
    if !seen {
        return Err(Error::Invalid(format!(
            "no weather for season {weather_season} from day {start_day}"
        )));
    }
    Err(Error::Infeasible(format!(
        "requirement not reached within the weather record ({days} days, {progress:.4} of {magnitude:.4})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{Convergence, ModelSpec};
    use crate::likelihood::{Effect, Family};
    use crate::link::Link;

    fn model(theta: Vec<f64>, sds: [f64; 2]) -> FittedModel {
        let scheme = StageScheme::from_labels("corn", &["Planted", "Emerged", "Silking"]).unwrap();
        let spec = ModelSpec::with_covariates(
            scheme,
            Link::Logit,
            Family::Bcm { trials: 100 },
            vec![Covariate::Calendar, Covariate::Thermal],
            vec![Effect::Ordinal, Effect::Ordinal],
        )
        .unwrap();
        let mut params = StandardizationParams::identity(&spec.covariates);
        params.sds = sds.to_vec();
        FittedModel {
            names: spec.parameter_names(),
            spec,
            theta,
            covariance: Vec::new(),
            model_covariance: Vec::new(),
            wald: Vec::new(),
            convergence: Convergence {
                iterations: 0,
                grad_norm: 0.0,
                loglik: 0.0,
                trace: Vec::new(),
                regularized: 0,
                diagnostics: Vec::new(),
            },
            standardization: params,
            n_obs: 0,
            n_seasons: 0,
            grid_adjusted: 0,
        }
    }

    #[test]
    fn corn_requirement_and_transition() {
        let m = model(vec![9.728, -1.387, -5.0, 5.400, 1.357], [1.0, 1.0]);
        let req = requirements(&m, None).unwrap();
        assert!((req[0].magnitude - 11.115).abs() < 1e-12);
        assert_eq!(req[0].to, "Emerged");
        let t = transition_time(&m, 1, 0.75, None).unwrap();
        assert!((t.days - 11.115 / 6.417_75).abs() < 1e-12);
        assert!((t.days - 1.7319).abs() < 1e-4);
    }

    #[test]
    fn telescoping_and_zero_gap() {
        let m = model(vec![3.0, 1.25, -2.5, 1.0, 0.5], [2.0, 3.0]);
        let sum: f64 = requirements(&m, None).unwrap().iter().map(|r| r.delta).sum();
        assert_eq!(sum, -2.5 - 3.0);
        let flat = model(vec![1.0, 1.0, 1.0, 1.0, 0.5], [1.0, 1.0]);
        assert!(requirements(&flat, None).unwrap().iter().all(|r| r.delta == 0.0));
    }

    #[test]
    fn round_trip_and_special_cases() {
        let m = model(vec![4.0, 1.0, -3.0, 2.0, 1.5], [3.0, 0.5]);
        let t = transition_time(&m, 2, 0.75, None).unwrap();
        let g = required_gdd_rate(&m, 2, t.days, None).unwrap();
        assert!((g - 0.75).abs() < 1e-10);
        let no_thermal = model(vec![4.0, 1.0, -3.0, 2.0, 0.0], [3.0, 0.5]);
        let t = transition_time(&no_thermal, 2, 0.4, None).unwrap();
        assert!((t.days - 4.0 / (2.0 / 3.0)).abs() < 1e-12);
        assert!(matches!(required_gdd_rate(&no_thermal, 2, 5.0, None), Err(Error::Infeasible(_))));
        let no_calendar = model(vec![4.0, 1.0, -3.0, 0.0, 1.0], [1.0, 1.0]);
        let a = transition_time(&no_calendar, 2, 0.25, None).unwrap().days;
        let b = transition_time(&no_calendar, 2, 0.5, None).unwrap().days;
        assert!((a - 2.0 * b).abs() < 1e-12);
        let negative = model(vec![4.0, 1.0, -3.0, -1.0, 0.1], [1.0, 1.0]);
        assert!(matches!(transition_time(&negative, 2, 0.5, None), Err(Error::Infeasible(_))));
        assert!(requirements(&m, Some(2001)).is_err());
    }

    #[test]
    fn large_target_follows_the_direct_formula() {
        let m = model(vec![4.0, 1.0, -3.0, 0.01, 1.5], [2.0, 0.5]);
        let target = 1e4;
        let g = required_gdd_rate(&m, 1, 5.0, None).unwrap();
        let direct = (3.0 / 5.0 - 0.01 / 2.0) / 3.0;
        assert!((g - direct).abs() < 1e-12);
        assert!(required_gdd_rate(&m, 1, target, None).is_err());
    }
}
