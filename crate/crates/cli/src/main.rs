//! `cropclm`: crop progress modelling from the command line.
//!
//! Exit status is 0 on success, 1 for invalid input or usage and 2 when the
//! numerical machinery fails (non-convergence, separation, singular
//! information).

mod artifact;
mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cropclm::features::Covariate;
use cropclm::likelihood::Effect;

use config::{CvConfig, RunConfig, SimSettings};

const SCHEMAS: &str = "\
CSV schemas (full descriptions in SCHEMAS.md):
  progress     season,day,<stage 1>,...,<stage K-1>   cumulative percent reached, 0-100
  weather      season,day,tmin,tmax                   daily temperatures, degrees C
  reflectance  season,day,red,nir                     blank cells mark cloud-masked days
  features     season,day,calendar,thermal,ndvi,greenup[,z_<covariate>...]
  predictions  season,day,<stage 1>,...               predicted cumulative percent
Every output is a versioned JSON artifact or a CSV with a <file>.meta.json
sidecar; both embed the resolved run configuration.";

#[derive(Parser, Debug)]
#[command(name = "cropclm", version, about = "Cumulative link models for crop progress", after_help = SCHEMAS)]
struct Cli {
    /// JSON run configuration; an earlier output artifact works too.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print results and errors as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Upper bound on worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build daily thermal-time, NDVI and greenup features.
    Features {
        #[command(flatten)]
        crop: CropArgs,
        #[command(flatten)]
        cov: CovariateArgs,
        #[arg(long)]
        weather: Option<PathBuf>,
        #[arg(long)]
        reflectance: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute NDVI from reflectance and smooth it per season.
    Smooth {
        #[arg(long)]
        reflectance: Option<PathBuf>,
        /// Whittaker penalty.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic survey from known parameters.
    Simulate {
        #[command(flatten)]
        crop: CropArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit a fixed-effects model.
    Fit {
        #[command(flatten)]
        crop: CropArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Also write fitted values at the observed days.
        #[arg(long)]
        fitted: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model with seasonal random effects.
    FitMixed {
        #[command(flatten)]
        crop: CropArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Drop the seasonal random intercepts.
        #[arg(long)]
        no_intercepts: bool,
        /// Covariates with stage-level random slopes.
        #[arg(long, value_delimiter = ',')]
        random_slopes: Option<Vec<Covariate>>,
        #[arg(long)]
        fitted: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict cumulative progress from a model artifact.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Predict only at the days in --progress.
        #[arg(long)]
        at_observed: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo cross-validated prediction error.
    Cv {
        #[command(flatten)]
        crop: CropArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Cross-validate every link and effect pattern of the setting.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Link-scale requirements between consecutive stages.
    Requirements {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Season-specific values (mixed models only).
        #[arg(long)]
        season: Option<i32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Days needed to complete a stage.
    TransitionTime {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        stage: Option<String>,
        /// Constant daily GDD in [0, 1].
        #[arg(long)]
        gdd_rate: Option<f64>,
        /// Solve for the constant GDD that completes the stage in this many days.
        #[arg(long)]
        target_days: Option<f64>,
        /// Accumulate observed daily GDD from this weather file.
        #[arg(long)]
        weather: Option<PathBuf>,
        #[arg(long)]
        weather_season: Option<i32>,
        #[arg(long)]
        start_day: Option<u32>,
        #[arg(long)]
        season: Option<i32>,
        #[command(flatten)]
        crop: CropArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate and selection tables plus figure data.
    Report {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Cross-validation artifact to tabulate.
        #[arg(long)]
        cv: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct CropArgs {
    /// Crop preset for cardinal temperatures.
    #[arg(long)]
    crop: Option<String>,
    /// Base, optimum and ceiling temperatures.
    #[arg(long, value_delimiter = ',', num_args = 3, allow_negative_numbers = true)]
    cardinal: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct CovariateArgs {
    /// calendar, thermal, greenup or combined.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<Covariate>>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Accumulate gap-filled raw NDVI instead of the smoothed series.
    #[arg(long)]
    raw_ndvi: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    cov: CovariateArgs,
    /// Stage labels, first free stage first.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// logit, probit or cauchit.
    #[arg(long)]
    link: Option<String>,
    /// bcm or mb.
    #[arg(long)]
    family: Option<String>,
    /// Plants per survey unit, N.
    #[arg(long)]
    trials: Option<u32>,
    /// One of ordinal or nominal per covariate.
    #[arg(long, value_delimiter = ',')]
    effects: Option<Vec<Effect>>,
    /// Optimizer iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    progress: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    seasons: Option<usize>,
    #[arg(long)]
    first_season: Option<i32>,
    /// Survey days per season.
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    first_day: Option<u32>,
    #[arg(long)]
    spacing: Option<u32>,
    /// True parameters, standardized scale, model order.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Option<Vec<f64>>,
    /// Seasonal intercept SD per free stage.
    #[arg(long, value_delimiter = ',')]
    intercept_sd: Option<Vec<f64>>,
    #[arg(long)]
    cloud_fraction: Option<f64>,
}

impl CropArgs {
    fn apply(self, c: &mut RunConfig) {
        c.crop = self.crop;
        c.cardinal = self.cardinal.map(|v| [v[0], v[1], v[2]]);
    }
}

impl CovariateArgs {
    fn apply(self, c: &mut RunConfig) {
        c.setting = self.setting;
        c.covariates = self.covariates;
        c.lambda = self.lambda;
        c.raw_ndvi = self.raw_ndvi.then_some(true);
    }
}

impl ModelArgs {
    fn apply(self, c: &mut RunConfig) {
        self.cov.apply(c);
        c.stages = self.stages;
        c.link = self.link;
        c.family = self.family;
        c.trials = self.trials;
        c.effects = self.effects;
        c.max_iter = self.max_iter;
    }
}

impl DataArgs {
    fn apply(self, c: &mut RunConfig) {
        c.paths.progress = self.progress;
        c.paths.features = self.features;
    }
}

/// Flag values as a sparse config; unset flags stay `None`.
fn flags_config(cmd: Command) -> (&'static str, RunConfig) {
    let mut c = RunConfig::default();
    let name = match cmd {
        Command::Features { crop, cov, weather, reflectance, out } => {
            crop.apply(&mut c);
            cov.apply(&mut c);
            c.paths.weather = weather;
            c.paths.reflectance = reflectance;
            c.paths.out = out;
            "features"
        }
        Command::Smooth { reflectance, lambda, out } => {
            c.paths.reflectance = reflectance;
            c.lambda = lambda;
            c.paths.out = out;
            "smooth"
        }
        Command::Simulate { crop, model, sim, seed, out_dir } => {
            crop.apply(&mut c);
            model.apply(&mut c);
            c.seed = seed;
            c.paths.out_dir = out_dir;
            c.simulation = Some(SimSettings {
                seasons: sim.seasons,
                first_season: sim.first_season,
                days: sim.days,
                first_day: sim.first_day,
                spacing: sim.spacing,
                theta: sim.theta,
                intercept_sd: sim.intercept_sd,
                cloud_fraction: sim.cloud_fraction,
            });
            "simulate"
        }
        Command::Fit { crop, model, data, fitted, out } => {
            crop.apply(&mut c);
            model.apply(&mut c);
            data.apply(&mut c);
            c.paths.fitted = fitted;
            c.paths.out = out;
            "fit"
        }
        Command::FitMixed { crop, model, data, no_intercepts, random_slopes, fitted, out } => {
            crop.apply(&mut c);
            model.apply(&mut c);
            data.apply(&mut c);
            c.random_intercepts = no_intercepts.then_some(false);
            c.random_slopes = random_slopes;
            c.paths.fitted = fitted;
            c.paths.out = out;
            "fit-mixed"
        }
        Command::Predict { model, data, at_observed, out } => {
            c.paths.model = model;
            data.apply(&mut c);
            c.query.at_observed = at_observed.then_some(true);
            c.paths.out = out;
            "predict"
        }
        Command::Cv { crop, model, data, replicates, train_fraction, grid, seed, out } => {
            crop.apply(&mut c);
            model.apply(&mut c);
            data.apply(&mut c);
            c.cv = Some(CvConfig { replicates, train_fraction, grid: grid.then_some(true) });
            c.seed = seed;
            c.paths.out = out;
            "cv"
        }
        Command::Requirements { model, season, out } => {
            c.paths.model = model;
            c.query.season = season;
            c.paths.out = out;
            "requirements"
        }
        Command::TransitionTime {
            model,
            stage,
            gdd_rate,
            target_days,
            weather,
            weather_season,
            start_day,
            season,
            crop,
            out,
        } => {
            c.paths.model = model;
            c.query.stage = stage;
            c.query.gdd_rate = gdd_rate;
            c.query.target_days = target_days;
            c.paths.weather = weather;
            c.query.weather_season = weather_season;
            c.query.start_day = start_day;
            c.query.season = season;
            crop.apply(&mut c);
            c.paths.out = out;
            "transition-time"
        }
        Command::Report { model, cv, data, out_dir } => {
            c.paths.model = model;
            c.paths.cv = cv;
            data.apply(&mut c);
            c.paths.out_dir = out_dir;
            "report"
        }
    };
    (name, c)
}

fn run(cli: Cli) -> Result<commands::Outcome> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = cli.config.as_deref().map(config::load).transpose()?.unwrap_or_default();
    let (name, flags) = flags_config(cli.command);
    let cfg = config::merge(file, flags)?;
    match name {
        "features" => commands::features(cfg),
        "smooth" => commands::smooth(cfg),
        "simulate" => commands::simulate_cmd(cfg),
        "fit" => commands::fit_cmd(cfg),
        "fit-mixed" => commands::fit_mixed_cmd(cfg),
        "predict" => commands::predict_cmd(cfg),
        "cv" => commands::cv_cmd(cfg),
        "requirements" => commands::requirements_cmd(cfg),
        "transition-time" => commands::transition_cmd(cfg),
        "report" => commands::report_cmd(cfg),
        _ => unreachable!("every subcommand is dispatched"),
    }
}

fn core_error(err: &anyhow::Error) -> Option<&cropclm::Error> {
    err.chain().find_map(|e| e.downcast_ref::<cropclm::Error>())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use cropclm::Error as E;
    match core_error(err) {
        Some(E::Io { .. }) => "io",
        Some(E::Csv(_) | E::Row { .. } | E::MissingColumn(_)) => "malformed_input",
        Some(E::MissingKeys(_)) => "missing_keys",
        Some(E::ZeroVariance(_)) => "zero_variance",
        Some(E::Invalid(_)) => "invalid_input",
        Some(E::InvalidFamily(_)) => "invalid_family",
        Some(E::UnknownSeason(_)) => "unknown_season",
        Some(E::Infeasible(_)) => "infeasible",
        Some(E::NonConvergence { .. }) => "non_convergence",
        Some(E::Separation { .. }) => "separation",
        Some(E::Singular(_)) => "singular",
        Some(E::IndefiniteHessian { .. }) => "indefinite_hessian",
        Some(E::Numerical(_)) => "numerical",
        None if err.chain().any(|e| e.is::<std::io::Error>()) => "io",
        None => "invalid_input",
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    if core_error(err).is_some_and(cropclm::Error::is_numerical) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let json_mode = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if json_mode && code != 0 {
                let msg = json!({ "error": { "kind": "usage", "message": e.render().to_string(), "exit_code": 1 } });
                eprintln!("{msg}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(outcome) => {
            if json {
                println!("{}", outcome.json);
            } else {
                print!("{}", outcome.text);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_status(&err);
            if json {
                let msg = json!({
                    "error": { "kind": error_kind(&err), "message": format!("{err:#}"), "exit_code": code }
                });
                eprintln!("{msg}");
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(code)
        }
    }
}
