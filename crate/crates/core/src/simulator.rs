//! Synthetic crop-progress panels from the latent development model.
//!
//! Weather comes from a logistic seasonal temperature curve with a season
//! offset and daily noise, and runs through the real feature pipeline. The
//! true coefficients act on covariates standardized over the whole daily
//! frame.
//!
//! In BCM mode each plant of a season draws one latent error `eps` from the
//! link distribution by inverse CDF and has reached stage `k` on a day when
//! `eps <= min_{l<=k} eta_l`; stage vectors are therefore nested. In MB mode
//! each plant draws an independent error per stage, so stage indicators are
//! conditionally independent Bernoulli(`F(eta_k)`). Errors are fixed for the
//! season and `eta` enters as its running maximum over days, so progress
//! never regresses. Season `i` draws from stream `i` of the seeded generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ProgressPanel, ProgressRecord, ReflectanceRecord, ReflectanceSeries, StageScheme, WeatherRecord, WeatherSeries,
};
use crate::features::{
    build_features, standardize_covariates, CardinalTemperatures, Covariate, FeatureFrame, FeatureOptions,
    StandardizationParams,
};
use crate::likelihood::{Effect, Family, MeanStructure};
use crate::link::Link;
use crate::{Error, Result};

/// Parameters of the synthetic daily temperature process (degrees C).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherModel {
    pub base: f64,
    pub amplitude: f64,
    pub midpoint: f64,
    pub scale: f64,
    /// Diurnal range, `t_max - t_min`.
    pub range: f64,
    pub season_sd: f64,
    pub noise_sd: f64,
}

impl Default for WeatherModel {
    fn default() -> Self {
        Self {
            base: 6.0,
            amplitude: 20.0,
            midpoint: 120.0,
            scale: 18.0,
            range: 10.0,
            season_sd: 1.5,
            noise_sd: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scheme: StageScheme,
    pub link: Link,
    pub family: Family,
    pub covariates: Vec<Covariate>,
    pub effects: Vec<Effect>,
    /// True parameters on the standardized scale, in model order.
    pub theta: Vec<f64>,
    pub seasons: usize,
    pub first_season: i32,
    /// Observation days per season.
    pub days: usize,
    pub first_day: u32,
    pub spacing: u32,
    /// SD of the seasonal intercepts, one per free stage.
    pub intercept_sd: Vec<f64>,
    /// SDs of the stage-level random slopes.
    pub slope_sd: Vec<(Covariate, f64)>,
    pub weather: WeatherModel,
    pub cardinal: CardinalTemperatures,
    /// Share of reflectance days lost to cloud.
    pub cloud_fraction: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl SimConfig {
    /// A weekly survey with calendar and thermal covariates.
    pub fn new(scheme: StageScheme, link: Link, family: Family, theta: Vec<f64>) -> Self {
        Self {
            scheme,
            link,
            family,
            covariates: vec![Covariate::Calendar, Covariate::Thermal],
            effects: vec![Effect::Ordinal, Effect::Ordinal],
            theta,
            seasons: 20,
            first_season: 2000,
            days: 20,
            first_day: 100,
            spacing: 7,
            intercept_sd: Vec::new(),
            slope_sd: Vec::new(),
            weather: WeatherModel::default(),
            cardinal: CardinalTemperatures::new(8.0, 30.0, 36.0).expect("valid cardinal temperatures"),
            cloud_fraction: 0.3,
            lambda: 100.0,
            seed: 0,
        }
    }

    pub fn structure(&self) -> MeanStructure {
        MeanStructure::new(self.scheme.k(), self.effects.clone())
    }

    pub fn last_day(&self) -> u32 {
        self.first_day + self.spacing * (self.days.saturating_sub(1)) as u32
    }

    fn needs_reflectance(&self) -> bool {
        self.covariates.iter().any(|c| matches!(c, Covariate::Ndvi | Covariate::Greenup))
    }

    pub fn validate(&self) -> Result<()> {
        let structure = self.structure();
        if self.covariates.len() != self.effects.len() {
            return Err(Error::Invalid("covariates and effects differ in length".into()));
        }
        if self.theta.len() != structure.n_params() {
            return Err(Error::Invalid(format!(
                "theta has length {}, structure needs {}",
                self.theta.len(),
                structure.n_params()
            )));
        }
        if self.family.trials() == 0 {
            return Err(Error::Invalid("N must be at least 1".into()));
        }
        if self.seasons == 0 || self.days == 0 || self.spacing == 0 || self.first_day == 0 {
            return Err(Error::Invalid("seasons, days, spacing and first day must be positive".into()));
        }
        if self.last_day() > 366 {
            return Err(Error::Invalid(format!("last observation day {} exceeds 366", self.last_day())));
        }
        if structure.ordered_thresholds() && self.theta[..structure.n_free].windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("thresholds must be strictly decreasing across stages".into()));
        }
        if !self.intercept_sd.is_empty() && self.intercept_sd.len() != structure.n_free {
            return Err(Error::Invalid("one intercept SD per free stage is required".into()));
        }
        if self.intercept_sd.iter().chain(self.slope_sd.iter().map(|(_, s)| s)).any(|s| !(*s >= 0.0)) {
            return Err(Error::Invalid("random-effect SDs must be non-negative".into()));
        }
        for (c, _) in &self.slope_sd {
            if !self.covariates.contains(c) {
                return Err(Error::Invalid(format!("random slope on absent covariate `{}`", c.label())));
            }
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return Err(Error::Invalid("cloud fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// What the simulation used as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub theta: Vec<f64>,
    pub standardization: StandardizationParams,
    /// Realized seasonal intercepts per free stage.
    pub intercepts: Vec<(i32, Vec<f64>)>,
    /// Realized stage slopes per random-slope covariate.
    pub slopes: Vec<(Covariate, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub panel: ProgressPanel,
    pub features: FeatureFrame,
    pub weather: WeatherSeries,
    pub reflectance: Option<ReflectanceSeries>,
    pub truth: SimTruth,
}

fn season_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative SD")
}

fn synth_weather(cfg: &SimConfig, season: i32, rng: &mut ChaCha8Rng) -> Vec<WeatherRecord> {
    let w = &cfg.weather;
    let offset = normal(w.season_sd).sample(rng);
    let noise = normal(w.noise_sd);
    (1..=cfg.last_day())
        .map(|d| {
            let mean = w.base + w.amplitude / (1.0 + (-(d as f64 - w.midpoint) / w.scale).exp()) + offset + noise.sample(rng);
            WeatherRecord { season, day: d, t_min: mean - 0.5 * w.range, t_max: mean + 0.5 * w.range }
        })
        .collect()
}

fn synth_reflectance(cfg: &SimConfig, season: i32, rng: &mut ChaCha8Rng) -> Vec<ReflectanceRecord> {
    let shift = normal(5.0).sample(rng);
    let noise = normal(0.02);
    (1..=cfg.last_day())
        .map(|d| {
            let v: f64 = 0.15 + 0.6 / (1.0 + (-(d as f64 - 150.0 - shift) / 12.0).exp()) + noise.sample(rng);
            let v = v.clamp(0.01, 0.95);
            let red = 0.08;
            let nir = red * (1.0 + v) / (1.0 - v);
            let cloudy = rng.random::<f64>() < cfg.cloud_fraction && d > 1 && d < cfg.last_day();
            ReflectanceRecord {
                season,
                day: d,
                red: (!cloudy).then_some(red),
                nir: (!cloudy).then_some(nir),
            }
        })
        .collect()
}

/// Linear predictors of one observation including random effects.
fn eta_with_effects(
    cfg: &SimConfig,
    structure: &MeanStructure,
    x: &[f64],
    intercepts: &[f64],
    slopes: &[(usize, Vec<f64>)],
) -> Vec<f64> {
    let mut eta = structure.eta(&cfg.theta, x);
    for (c, e) in eta.iter_mut().enumerate() {
        if let Some(a) = intercepts.get(c) {
            *e += a;
        }
        for (p, b) in slopes {
            *e += x[*p] * b[c];
        }
    }
    eta
}

/// Generates a panel, its daily features and the truth record.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let structure = cfg.structure();
    let q = structure.n_free;
    let seasons: Vec<i32> = (0..cfg.seasons).map(|i| cfg.first_season + i as i32).collect();

    let mut weather = Vec::new();
    let mut reflectance = Vec::new();
    let mut rngs = Vec::with_capacity(cfg.seasons);
    for (i, &s) in seasons.iter().enumerate() {
        let mut rng = season_rng(cfg.seed, i as u64);
        weather.extend(synth_weather(cfg, s, &mut rng));
        if cfg.needs_reflectance() {
            reflectance.extend(synth_reflectance(cfg, s, &mut rng));
        }
        rngs.push(rng);
    }
    let weather = WeatherSeries::new(weather)?;
    let reflectance = if cfg.needs_reflectance() { Some(ReflectanceSeries::new(reflectance)?) } else { None };
    let opts = FeatureOptions { cardinal: cfg.cardinal, lambda: cfg.lambda, raw_ndvi: false };
    let frame = build_features(&weather, reflectance.as_ref(), &opts)?;
    let (features, params) = standardize_covariates(&frame, &cfg.covariates)?;

    // shared stage slopes come from a stream no season uses
    let mut shared = season_rng(cfg.seed, u64::MAX);
    let slopes: Vec<(usize, Vec<f64>)> = cfg
        .slope_sd
        .iter()
        .map(|(c, sd)| {
            let p = cfg.covariates.iter().position(|d| d == c).expect("validated");
            (p, (0..q).map(|_| normal(*sd).sample(&mut shared)).collect())
        })
        .collect();

    let n = cfg.family.trials();
    let nf = n as f64;
    let mut records = Vec::with_capacity(cfg.seasons * cfg.days);
    let mut intercepts_out = Vec::new();
    for (i, &s) in seasons.iter().enumerate() {
        let rng = &mut rngs[i];
        let intercepts: Vec<f64> = cfg.intercept_sd.iter().map(|&sd| normal(sd).sample(rng)).collect();
        // plant thresholds are fixed for the season so progress never regresses;
        // BCM shares one per plant across stages, MB draws one per plant and stage
        let per_plant = match cfg.family {
            Family::Bcm { .. } => 1,
            Family::Mb { .. } => q,
        };
        let latent: Vec<Vec<f64>> = (0..per_plant)
            .map(|_| {
                let mut v: Vec<f64> = (0..n).map(|_| cfg.link.quantile(rng.random::<f64>())).collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        let mut reached_eta = vec![f64::NEG_INFINITY; q];
        for j in 0..cfg.days {
            let day = cfg.first_day + cfg.spacing * j as u32;
            let idx = features
                .rows()
                .binary_search_by_key(&(s, day), |r| (r.season, r.day))
                .expect("features cover every observation day");
            let x = &features.scaled()[idx];
            let eta = eta_with_effects(cfg, &structure, x, &intercepts, &slopes);
            for (r, e) in reached_eta.iter_mut().zip(&eta) {
                *r = r.max(*e);
            }
            let mut y = Vec::with_capacity(q + 1);
            y.push(1.0);
            let mut bound = f64::INFINITY;
            for (k, &e) in reached_eta.iter().enumerate() {
                let (plants, limit) = match cfg.family {
                    Family::Bcm { .. } => {
                        bound = bound.min(e);
                        (&latent[0], bound)
                    }
                    Family::Mb { .. } => (&latent[k], e),
                };
                y.push(plants.partition_point(|&v| v <= limit) as f64 / nf);
            }
            records.push(ProgressRecord { season: s, day, y });
        }
        intercepts_out.push((s, intercepts));
    }
    let panel = ProgressPanel::new(cfg.scheme.clone(), records)?;
    Ok(SimOutput {
        panel,
        features,
        weather,
        reflectance,
        truth: SimTruth {
            theta: cfg.theta.clone(),
            standardization: params,
            intercepts: intercepts_out,
            slopes: slopes.into_iter().map(|(p, b)| (cfg.covariates[p], b)).collect(),
        },
    })
}
