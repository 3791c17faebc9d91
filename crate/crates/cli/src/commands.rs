use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cropclm::agronomy::{
    required_gdd_rate, requirements, stage_index, transition_time, transition_time_weather, StageModel,
};
use cropclm::dataset::{
    join_panel, load_progress, load_reflectance, load_weather, save_progress, write_reflectance, write_weather,
    ModelingTable, ProgressPanel,
};
use cropclm::estimation::{all_days, fit_with, predict, save_predictions, FitOptions, ModelSpec, PredictedProgress, WaldRow};
use cropclm::evaluation::{monte_carlo_cv, selection_grid, CvReport};
use cropclm::features::{
    build_features, load_features, ndvi, save_features, standardize_covariates, CardinalTemperatures, Covariate,
    FeatureFrame,
};
use cropclm::likelihood::Effect;
use cropclm::link::Link;
use cropclm::mixed::{fit_mixed_with, interpolate, MixedOptions};
use cropclm::simulator::{simulate, SimConfig};

use crate::artifact::{
    count_rows, ensure_parent, read_envelope, sidecar, write_json, Envelope, FileEntry, Manifest, ModelArtifact,
};
use crate::config::{require, RunConfig};
use crate::report;

/// What a command produced: human text for stdout and the JSON shown under
/// `--json`.
pub struct Outcome {
    pub text: String,
    pub json: Value,
}

fn entry(path: &Path, schema: &str) -> Result<FileEntry> {
    Ok(FileEntry { path: path.to_path_buf(), schema: schema.into(), rows: count_rows(path)? })
}

/// Writes the sidecar envelope of a CSV output.
fn write_sidecar(command: &str, cfg: &RunConfig, files: Vec<FileEntry>, extra: Value) -> Result<Value> {
    let first = files[0].path.clone();
    let env = Envelope::new(command, cfg, Manifest { files, extra });
    write_json(&sidecar(&first), &env)?;
    Ok(serde_json::to_value(env)?)
}

fn load_table(cfg: &RunConfig, scheme_from: &ModelSpec, covariates: &[Covariate]) -> Result<(ProgressPanel, FeatureFrame, ModelingTable)> {
    let progress = require(&cfg.paths.progress, "progress CSV", "progress")?;
    let features = require(&cfg.paths.features, "feature CSV", "features")?;
    let panel = load_progress(progress, &scheme_from.scheme)?;
    let (frame, _) = standardize_covariates(&load_features(features)?, covariates)?;
    let table = join_panel(&panel, &frame)?;
    Ok((panel, frame, table))
}

pub fn load_model(cfg: &RunConfig) -> Result<Envelope<ModelArtifact>> {
    read_envelope(require(&cfg.paths.model, "model artifact", "model")?)
}

pub fn features(cfg: RunConfig) -> Result<Outcome> {
    let cfg = cfg.complete()?;
    let weather = load_weather(require(&cfg.paths.weather, "weather CSV", "weather")?)?;
    let refl = cfg.paths.reflectance.as_ref().map(load_reflectance).transpose()?;
    let frame = build_features(&weather, refl.as_ref(), &cfg.feature_options()?)?;
    let covs: Vec<Covariate> = cfg
        .covariates
        .clone()
        .unwrap_or_default()
        .into_iter()
        .filter(|c| frame.rows().iter().all(|r| r.get(*c).is_some()))
        .collect();
    let frame = if covs.is_empty() { frame } else { standardize_covariates(&frame, &covs)?.0 };
    let out = require(&cfg.paths.out, "output", "out")?;
    ensure_parent(out)?;
    save_features(&frame, out)?;
    let json = write_sidecar("features", &cfg, vec![entry(out, "features")?], json!({ "standardized": covs }))?;
    Ok(Outcome {
        text: format!(
            "wrote {} feature rows over {} seasons to {}\n",
            frame.rows().len(),
            frame.seasons().len(),
            out.display()
        ),
        json,
    })
}

pub fn smooth(cfg: RunConfig) -> Result<Outcome> {
    let mut cfg = cfg;
    cfg.lambda.get_or_insert(100.0);
    let lambda = cfg.lambda.unwrap();
    let refl = load_reflectance(require(&cfg.paths.reflectance, "reflectance CSV", "reflectance")?)?;
    let mut by_season: BTreeMap<i32, BTreeMap<u32, Option<f64>>> = BTreeMap::new();
    for r in refl.records() {
        let v = match (r.red, r.nir) {
            (Some(red), Some(nir)) => Some(ndvi(red, nir)),
            _ => None,
        };
        by_season.entry(r.season).or_default().insert(r.day, v.filter(|x| x.is_finite()));
    }
    let out = require(&cfg.paths.out, "output", "out")?;
    ensure_parent(out)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record(["season", "day", "ndvi_observed", "ndvi_smoothed"])?;
    let mut rows = 0;
    for (season, days) in &by_season {
        let first = *days.keys().next().unwrap();
        let last = *days.keys().next_back().unwrap();
        let series: Vec<Option<f64>> = (first..=last).map(|d| days.get(&d).copied().flatten()).collect();
        let smoothed = cropclm::features::whittaker_smooth(&series, lambda)
            .with_context(|| format!("season {season}"))?;
        for (i, s) in smoothed.iter().enumerate() {
            let obs = series[i].map(|v| v.to_string()).unwrap_or_default();
            w.write_record([season.to_string(), (first + i as u32).to_string(), obs, s.to_string()])?;
            rows += 1;
        }
    }
    w.flush()?;
    drop(w);
    let json = write_sidecar("smooth", &cfg, vec![entry(out, "smoothed-ndvi")?], Value::Null)?;
    Ok(Outcome { text: format!("wrote {rows} smoothed NDVI rows to {}\n", out.display()), json })
}

pub fn sim_config(cfg: &RunConfig) -> Result<SimConfig> {
    let spec = cfg.model_spec()?;
    let sim = cfg.simulation.clone().unwrap_or_default();
    let mut s = SimConfig::new(spec.scheme, spec.link, spec.family, sim.theta.unwrap_or_default());
    s.covariates = spec.covariates;
    s.effects = spec.effects;
    s.seasons = sim.seasons.unwrap_or(s.seasons);
    s.first_season = sim.first_season.unwrap_or(s.first_season);
    s.days = sim.days.unwrap_or(s.days);
    s.first_day = sim.first_day.unwrap_or(s.first_day);
    s.spacing = sim.spacing.unwrap_or(s.spacing);
    s.intercept_sd = sim.intercept_sd.unwrap_or_default();
    s.cloud_fraction = sim.cloud_fraction.unwrap_or(s.cloud_fraction);
    s.cardinal = cfg.cardinal_temperatures()?;
    s.lambda = cfg.lambda.unwrap_or(s.lambda);
    s.seed = cfg.seed.unwrap_or(0);
    Ok(s)
}

pub fn simulate_cmd(cfg: RunConfig) -> Result<Outcome> {
    let cfg = cfg.complete_simulation()?;
    let sc = sim_config(&cfg)?;
    let out = simulate(&sc)?;
    let dir = require(&cfg.paths.out_dir, "output directory", "out-dir")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let progress = dir.join("progress.csv");
    let weather = dir.join("weather.csv");
    let features = dir.join("features.csv");
    save_progress(&out.panel, &progress)?;
    write_weather(&out.weather, BufWriter::new(create(&weather)?))?;
    save_features(&out.features, &features)?;
    let mut files = vec![entry(&progress, "progress")?, entry(&weather, "weather")?, entry(&features, "features")?];
    if let Some(refl) = &out.reflectance {
        let p = dir.join("reflectance.csv");
        write_reflectance(refl, BufWriter::new(create(&p)?))?;
        files.push(entry(&p, "reflectance")?);
    }
    let env = Envelope::new("simulate", &cfg, Manifest { files, extra: json!({ "truth": out.truth }) });
    write_json(&dir.join("manifest.json"), &env)?;
    Ok(Outcome {
        text: format!(
            "simulated {} seasons, {} progress rows into {}\n",
            sc.seasons,
            out.panel.records().len(),
            dir.display()
        ),
        json: serde_json::to_value(env)?,
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_model(cfg: &RunConfig, command: &str, model: ModelArtifact) -> Result<Value> {
    let env = Envelope::new(command, cfg, model);
    if let Some(out) = &cfg.paths.out {
        write_json(out, &env)?;
    }
    Ok(serde_json::to_value(env)?)
}

fn write_fitted(cfg: &RunConfig, command: &str, fitted: &PredictedProgress) -> Result<()> {
    if let Some(p) = &cfg.paths.fitted {
        ensure_parent(p)?;
        save_predictions(fitted, p)?;
        write_sidecar(command, cfg, vec![entry(p, "predictions")?], Value::Null)?;
    }
    Ok(())
}

pub fn fit_cmd(cfg: RunConfig) -> Result<Outcome> {
    let cfg = cfg.complete()?;
    let spec = cfg.model_spec()?;
    let (_, _, table) = load_table(&cfg, &spec, &spec.covariates)?;
    let opts = FitOptions { max_iter: cfg.max_iter.unwrap_or(200), ..FitOptions::default() };
    let model = fit_with(&table, &spec, &opts)?;
    write_fitted(&cfg, "fit", &model.fitted(&table))?;
    let text = report::fixed_summary(&model);
    let json = write_model(&cfg, "fit", ModelArtifact::Fixed(Box::new(model)))?;
    Ok(Outcome { text, json })
}

pub fn fit_mixed_cmd(cfg: RunConfig) -> Result<Outcome> {
    let cfg = cfg.complete()?;
    let spec = cfg.model_spec()?;
    let (_, _, table) = load_table(&cfg, &spec, &spec.covariates)?;
    let opts = MixedOptions { max_iter: cfg.max_iter.unwrap_or(200), ..MixedOptions::default() };
    let model = fit_mixed_with(&table, &spec, &cfg.random_effects(), &opts)?;
    write_fitted(&cfg, "fit-mixed", &model.fitted(&table)?)?;
    let text = report::mixed_summary(&model);
    let json = write_model(&cfg, "fit-mixed", ModelArtifact::Mixed(Box::new(model)))?;
    Ok(Outcome { text, json })
}

pub fn predict_cmd(cfg: RunConfig) -> Result<Outcome> {
    let env = load_model(&cfg)?;
    let features = load_features(require(&cfg.paths.features, "feature CSV", "features")?)?;
    let at_observed = cfg.query.at_observed.unwrap_or(false);
    let scheme = match &env.payload {
        ModelArtifact::Fixed(m) => m.spec.scheme.clone(),
        ModelArtifact::Mixed(m) => m.spec.scheme.clone(),
    };
    let keys = if at_observed {
        let panel = load_progress(require(&cfg.paths.progress, "progress CSV", "progress")?, &scheme)?;
        panel.records().iter().map(|r| (r.season, r.day)).collect()
    } else {
        all_days(&features)
    };
    let pred = match &env.payload {
        ModelArtifact::Fixed(m) => predict(m, &features, &keys)?,
        ModelArtifact::Mixed(m) => {
            let mut seasons: Vec<i32> = keys.iter().map(|k| k.0).collect();
            seasons.sort_unstable();
            seasons.dedup();
            let mut all = interpolate(m, &features.filter_seasons(&seasons))?;
            let have: BTreeSet<(i32, u32)> = all.rows.iter().map(|r| (r.season, r.day)).collect();
            let missing: Vec<(i32, u32)> = keys.iter().copied().filter(|k| !have.contains(k)).collect();
            if !missing.is_empty() {
                return Err(cropclm::Error::MissingKeys(missing).into());
            }
            let wanted: BTreeSet<(i32, u32)> = keys.iter().copied().collect();
            all.rows.retain(|r| wanted.contains(&(r.season, r.day)));
            all
        }
    };
    let out = require(&cfg.paths.out, "output", "out")?;
    ensure_parent(out)?;
    save_predictions(&pred, out)?;
    let json = write_sidecar("predict", &cfg, vec![entry(out, "predictions")?], Value::Null)?;
    Ok(Outcome { text: format!("wrote {} predicted rows to {}\n", pred.rows.len(), out.display()), json })
}

/// One selection-grid cell; failed cells carry no average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub code: String,
    pub link: Link,
    pub effects: Vec<Effect>,
    pub average: Option<f64>,
    pub report: Option<CvReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CvArtifact {
    Single { report: CvReport },
    Grid { setting: String, rows: Vec<GridEntry> },
}

pub fn cv_cmd(cfg: RunConfig) -> Result<Outcome> {
    let cfg = cfg.complete()?;
    let plan = cfg.cv_plan();
    let artifact = if cfg.grid() {
        let setting = cfg.setting()?;
        let spec = ModelSpec::new(cfg.scheme()?, cfg.link()?, cfg.family()?, setting, {
            vec![Effect::Ordinal; setting.covariates().len()]
        })?;
        let (_, _, table) = load_table(&cfg, &spec, &setting.covariates())?;
        let rows = selection_grid(&table, cfg.family()?, setting, &plan)?
            .into_iter()
            .map(|r| GridEntry {
                code: r.code,
                link: r.link,
                effects: r.effects,
                average: r.average.is_finite().then_some(r.average),
                report: r.report,
                error: r.error,
            })
            .collect();
        CvArtifact::Grid { setting: setting.name().into(), rows }
    } else {
        let spec = cfg.model_spec()?;
        let (_, _, table) = load_table(&cfg, &spec, &spec.covariates)?;
        CvArtifact::Single { report: monte_carlo_cv(&table, &spec, &plan)? }
    };
    let text = report::cv_text(&artifact);
    let env = Envelope::new("cv", &cfg, artifact);
    if let Some(out) = &cfg.paths.out {
        write_json(out, &env)?;
    }
    Ok(Outcome { text, json: serde_json::to_value(env)? })
}

fn stage_model(env: &Envelope<ModelArtifact>) -> &dyn StageModel {
    match &env.payload {
        ModelArtifact::Fixed(m) => m.as_ref(),
        ModelArtifact::Mixed(m) => m.as_ref(),
    }
}

fn write_query_result<T: Serialize>(cfg: &RunConfig, command: &str, payload: T) -> Result<Value> {
    let env = Envelope::new(command, cfg, payload);
    if let Some(out) = &cfg.paths.out {
        write_json(out, &env)?;
    }
    Ok(serde_json::to_value(env)?)
}

pub fn requirements_cmd(cfg: RunConfig) -> Result<Outcome> {
    let env = load_model(&cfg)?;
    let reqs = requirements(stage_model(&env), cfg.query.season)?;
    let text = report::requirements_text(&reqs);
    let json = write_query_result(&cfg, "requirements", &reqs)?;
    Ok(Outcome { text, json })
}

/// Cardinal temperatures: flags or config first, then the model's own run
/// config, then the crop preset.
fn cardinal_for(cfg: &RunConfig, env: &Envelope<ModelArtifact>) -> Result<CardinalTemperatures> {
    if let Some([b, o, c]) = cfg.cardinal.or(env.config.cardinal) {
        return Ok(CardinalTemperatures::new(b, o, c)?);
    }
    let crop = cfg.crop.clone().or(env.config.crop.clone()).unwrap_or_else(|| stage_model(env).scheme().crop().into());
    CardinalTemperatures::preset(&crop).with_context(|| format!("no cardinal temperatures for crop `{crop}`"))
}

pub fn transition_cmd(mut cfg: RunConfig) -> Result<Outcome> {
    let env = load_model(&cfg)?;
    let model = stage_model(&env);
    let label = cfg.query.stage.clone().context("--stage is required")?;
    let stage = stage_index(model.scheme(), &label)?;
    let season = cfg.query.season;
    let q = &cfg.query;
    let modes = [q.gdd_rate.is_some(), q.target_days.is_some(), cfg.paths.weather.is_some()];
    if modes.iter().filter(|m| **m).count() != 1 {
        bail!("give exactly one of --gdd-rate, --target-days or --weather");
    }
    let (text, payload) = if let Some(g) = q.gdd_rate {
        let t = transition_time(model, stage, g, season)?;
        (report::transition_text(&t), serde_json::to_value(&t)?)
    } else if let Some(days) = q.target_days {
        let g = required_gdd_rate(model, stage, days, season)?;
        (
            format!("stage {label}: completing in {days} days needs a constant daily GDD of {g:.6}\n"),
            json!({ "stage": label, "target_days": days, "gdd_rate": g }),
        )
    } else {
        let weather = load_weather(cfg.paths.weather.as_ref().unwrap())?;
        let cardinal = cardinal_for(&cfg, &env)?;
        cfg.cardinal = Some([cardinal.base(), cardinal.optimum(), cardinal.ceiling()]);
        let ws = match cfg.query.weather_season {
            Some(s) => s,
            None => weather.records().first().context("weather file is empty")?.season,
        };
        cfg.query.weather_season = Some(ws);
        let start = *cfg.query.start_day.get_or_insert(1);
        let t = transition_time_weather(model, stage, &weather, ws, start, &cardinal, season)?;
        (report::transition_text(&t), serde_json::to_value(&t)?)
    };
    let json = write_query_result(&cfg, "transition-time", payload)?;
    Ok(Outcome { text, json })
}

pub fn report_cmd(cfg: RunConfig) -> Result<Outcome> {
    let env = load_model(&cfg)?;
    let cv = cfg
        .paths
        .cv
        .as_deref()
        .map(read_envelope::<CvArtifact>)
        .transpose()?
        .map(|e| e.payload);
    let mut text = report::model_text(&env.payload)?;
    if let Some(cv) = &cv {
        text.push('\n');
        text.push_str(&report::cv_text(cv));
    }
    let Some(dir) = cfg.paths.out_dir.clone() else {
        return Ok(Outcome { json: json!({ "report": text }), text });
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, &text).with_context(|| format!("writing {}", txt.display()))?;
    let mut files = Vec::new();
    let est = dir.join("estimates.csv");
    report::write_estimates(&est, wald_rows(&env.payload))?;
    files.push(entry(&est, "estimates")?);
    let req = dir.join("requirements.csv");
    report::write_requirements(&req, &requirements(stage_model(&env), None)?)?;
    files.push(entry(&req, "requirements")?);
    if let Some(cv) = &cv {
        let p = dir.join("cv_error.csv");
        report::write_cv_series(&p, cv)?;
        files.push(entry(&p, "cv-error")?);
        if let CvArtifact::Grid { .. } = cv {
            let p = dir.join("grid.csv");
            report::write_grid(&p, cv)?;
            files.push(entry(&p, "grid")?);
        }
    }
    if let Some(fp) = &cfg.paths.features {
        let features = load_features(fp)?;
        let scheme = stage_model(&env).scheme().clone();
        let observed = cfg.paths.progress.as_ref().map(|p| load_progress(p, &scheme)).transpose()?;
        let pred = match &env.payload {
            ModelArtifact::Fixed(m) => predict(m, &features, &all_days(&features))?,
            ModelArtifact::Mixed(m) => interpolate(m, &features)?,
        };
        let p = dir.join("curves.csv");
        report::write_curves(&p, &pred, observed.as_ref())?;
        files.push(entry(&p, "curves")?);
    }
    let env = Envelope::new("report", &cfg, Manifest { files, extra: Value::Null });
    write_json(&dir.join("manifest.json"), &env)?;
    Ok(Outcome { text, json: serde_json::to_value(env)? })
}

fn wald_rows(model: &ModelArtifact) -> &[WaldRow] {
    match model {
        ModelArtifact::Fixed(m) => &m.wald,
        ModelArtifact::Mixed(m) => &m.wald,
    }
}
