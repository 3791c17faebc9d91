//! Run configuration: a JSON file, overridden field by field by flags, then
//! completed with defaults. The completed form is what artifacts echo.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cropclm::dataset::StageScheme;
use cropclm::estimation::ModelSpec;
use cropclm::evaluation::CvPlan;
use cropclm::features::{CardinalTemperatures, Covariate, FeatureOptions, SettingSpec};
use cropclm::likelihood::{Effect, Family};
use cropclm::link::Link;
use cropclm::mixed::RandomEffectsSpec;

pub const DEFAULT_CROP: &str = "corn";
pub const DEFAULT_SIM_STAGES: [&str; 3] = ["Emerged", "Silking", "Mature"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<String>,
    /// Base, optimum and ceiling temperatures; overrides the crop preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cardinal: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    /// Explicit covariate list; defaults to the setting's covariates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<Covariate>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effects: Option<Vec<Effect>>,
    /// Iteration cap of the fixed and mixed optimizers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_ndvi: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_intercepts: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_slopes: Option<Vec<Covariate>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimSettings>,
    pub query: Query,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seasons: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_season: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub days: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_day: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spacing: Option<u32>,
    /// True parameters on the standardized scale, in model order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept_sd: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud_fraction: Option<f64>,
}

/// Command-specific inputs that are not model settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Query {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub season: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gdd_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_days: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weather_season: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_day: Option<u32>,
    /// Predict at the progress keys instead of every feature day.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at_observed: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub progress: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weather: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflectance: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Reads a config file. An artifact envelope is accepted too, in which case
/// its embedded config is used.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if value.get("format_version").is_some() {
        value = value.get_mut("config").map(Value::take).unwrap_or(Value::Null);
    }
    serde_json::from_value(value).with_context(|| format!("config {}", path.display()))
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// `flags` wins wherever it sets a value.
pub fn merge(file: RunConfig, flags: RunConfig) -> Result<RunConfig> {
    let mut base = serde_json::to_value(file)?;
    overlay(&mut base, serde_json::to_value(flags)?);
    Ok(serde_json::from_value(base)?)
}

/// Stage labels of a progress CSV: every header column except the keys.
pub fn stages_from_header(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let stages: Vec<String> = rdr
        .headers()?
        .iter()
        .filter(|h| *h != "season" && *h != "day")
        .map(str::to_string)
        .collect();
    if stages.is_empty() {
        bail!("{}: no stage columns in header", path.display());
    }
    Ok(stages)
}

impl RunConfig {
    /// Fills every model-level default. Stage labels come from the progress
    /// header when not configured.
    pub fn complete(mut self) -> Result<Self> {
        self.crop.get_or_insert_with(|| DEFAULT_CROP.to_string());
        if self.cardinal.is_none() {
            let crop = self.crop.as_deref().unwrap_or(DEFAULT_CROP);
            let c = CardinalTemperatures::preset(crop).with_context(|| {
                format!(
                    "no cardinal temperatures for crop `{crop}`; set `cardinal` (presets: {})",
                    CardinalTemperatures::PRESET_CROPS.join(", ")
                )
            })?;
            self.cardinal = Some([c.base(), c.optimum(), c.ceiling()]);
        }
        if self.stages.is_none() {
            if let Some(p) = &self.paths.progress {
                self.stages = Some(stages_from_header(p)?);
            }
        }
        self.setting.get_or_insert_with(|| "thermal".into());
        let setting: SettingSpec = self.setting.as_deref().unwrap().parse()?;
        self.covariates.get_or_insert_with(|| setting.covariates());
        let n = self.covariates.as_ref().unwrap().len();
        self.effects.get_or_insert_with(|| vec![Effect::Ordinal; n]);
        self.link.get_or_insert_with(|| "logit".into());
        self.family.get_or_insert_with(|| "bcm".into());
        self.trials.get_or_insert(100);
        self.max_iter.get_or_insert(200);
        self.lambda.get_or_insert(100.0);
        self.raw_ndvi.get_or_insert(false);
        self.random_intercepts.get_or_insert(true);
        self.random_slopes.get_or_insert_with(Vec::new);
        self.seed.get_or_insert(0);
        let cv = self.cv.get_or_insert_with(CvConfig::default);
        cv.replicates.get_or_insert(500);
        cv.train_fraction.get_or_insert(0.75);
        cv.grid.get_or_insert(false);
        Ok(self)
    }

    /// Simulation defaults on top of [`RunConfig::complete`].
    pub fn complete_simulation(mut self) -> Result<Self> {
        if self.stages.is_none() {
            self.stages = Some(DEFAULT_SIM_STAGES.iter().map(|s| s.to_string()).collect());
        }
        let mut cfg = self.complete()?;
        let spec = cfg.model_spec()?;
        let sim = cfg.simulation.get_or_insert_with(SimSettings::default);
        sim.seasons.get_or_insert(20);
        sim.first_season.get_or_insert(2000);
        sim.days.get_or_insert(20);
        sim.first_day.get_or_insert(100);
        sim.spacing.get_or_insert(7);
        sim.intercept_sd.get_or_insert_with(Vec::new);
        sim.cloud_fraction.get_or_insert(0.3);
        if sim.theta.is_none() {
            sim.theta = Some(default_theta(&spec));
        }
        Ok(cfg)
    }

    pub fn scheme(&self) -> Result<StageScheme> {
        let stages = self
            .stages
            .clone()
            .context("stage labels unknown: pass --stages or a progress file")?;
        Ok(StageScheme::new(self.crop.clone().unwrap_or_default(), stages)?)
    }

    pub fn cardinal_temperatures(&self) -> Result<CardinalTemperatures> {
        let [b, o, c] = self.cardinal.context("cardinal temperatures unresolved")?;
        Ok(CardinalTemperatures::new(b, o, c)?)
    }

    pub fn feature_options(&self) -> Result<FeatureOptions> {
        Ok(FeatureOptions {
            cardinal: self.cardinal_temperatures()?,
            lambda: self.lambda.unwrap_or(100.0),
            raw_ndvi: self.raw_ndvi.unwrap_or(false),
        })
    }

    pub fn setting(&self) -> Result<SettingSpec> {
        Ok(self.setting.as_deref().unwrap_or("thermal").parse()?)
    }

    pub fn link(&self) -> Result<Link> {
        Ok(self.link.as_deref().unwrap_or("logit").parse()?)
    }

    pub fn family(&self) -> Result<Family> {
        Ok(Family::parse(self.family.as_deref().unwrap_or("bcm"), self.trials.unwrap_or(100))?)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::with_covariates(
            self.scheme()?,
            self.link()?,
            self.family()?,
            self.covariates.clone().unwrap_or_default(),
            self.effects.clone().unwrap_or_default(),
        )?)
    }

    pub fn random_effects(&self) -> RandomEffectsSpec {
        RandomEffectsSpec {
            seasonal_intercepts: self.random_intercepts.unwrap_or(true),
            slopes: self.random_slopes.clone().unwrap_or_default(),
        }
    }

    pub fn cv_plan(&self) -> CvPlan {
        let cv = self.cv.clone().unwrap_or_default();
        CvPlan {
            replicates: cv.replicates.unwrap_or(500),
            train_fraction: cv.train_fraction.unwrap_or(0.75),
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn grid(&self) -> bool {
        self.cv.as_ref().and_then(|c| c.grid).unwrap_or(false)
    }
}

/// Evenly spaced decreasing thresholds from 1.5 to -1.5 and unit slopes.
pub fn default_theta(spec: &ModelSpec) -> Vec<f64> {
    let q = spec.scheme.k() - 1;
    let mut theta: Vec<f64> = (0..q)
        .map(|c| if q == 1 { 0.0 } else { 1.5 - 3.0 * c as f64 / (q - 1) as f64 })
        .collect();
    theta.resize(spec.n_params(), 1.0);
    theta
}

pub fn require<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref().with_context(|| format!("{what} path required (--{flag} or paths.{} in the config)", flag.replace('-', "_")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values_only_where_set() {
        let file = RunConfig {
            link: Some("probit".into()),
            trials: Some(50),
            cv: Some(CvConfig { replicates: Some(10), ..Default::default() }),
            ..Default::default()
        };
        let flags = RunConfig {
            trials: Some(80),
            cv: Some(CvConfig { train_fraction: Some(0.5), ..Default::default() }),
            ..Default::default()
        };
        let m = merge(file, flags).unwrap();
        assert_eq!(m.link.as_deref(), Some("probit"));
        assert_eq!(m.trials, Some(80));
        let cv = m.cv.unwrap();
        assert_eq!((cv.replicates, cv.train_fraction), (Some(10), Some(0.5)));
    }

    #[test]
    fn completion_is_idempotent() {
        let mut cfg = RunConfig { stages: Some(vec!["A".into(), "B".into()]), ..Default::default() };
        cfg = cfg.complete().unwrap();
        assert_eq!(cfg.cardinal, Some([8.0, 30.0, 36.0]));
        assert_eq!(cfg.clone().complete().unwrap(), cfg);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn default_theta_matches_the_structure() {
        let cfg = RunConfig::default().complete_simulation().unwrap();
        assert_eq!(cfg.simulation.unwrap().theta.unwrap(), vec![1.5, 0.0, -1.5, 1.0, 1.0]);
    }

    #[test]
    fn unknown_crop_without_cardinal_is_rejected() {
        let cfg = RunConfig { crop: Some("kale".into()), ..Default::default() };
        assert!(cfg.complete().is_err());
    }
}
