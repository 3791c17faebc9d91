//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false` so the lines always reach the console. The
//! process exits non-zero when a criterion fails, except for those listed in
//! `KNOWN_LIMITS`, which still print FAIL with the reason attached.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cropclm::agronomy::{required_gdd_rate, requirements, stage_index, transition_time};
use cropclm::dataset::{join_panel, ModelingTable, ProgressPanel, ProgressRecord, StageScheme};
use cropclm::estimation::{fit, CovarianceKind, FittedModel, ModelSpec};
use cropclm::evaluation::{monte_carlo_cv, partitions, rmspe, selection_grid, CvPlan};
use cropclm::features::{gdd, whittaker_smooth, CardinalTemperatures, SettingSpec};
use cropclm::likelihood::{bcm_log_density, mb_log_density, partial_loglik, score, Effect, Family};
use cropclm::link::Link;
use cropclm::mixed::{fit_mixed, laplace_logdensity, RandomEffectsSpec};
use cropclm::simulator::{simulate, SimConfig};

/// Criteria that cannot be met as stated, with the reason printed next to FAIL.
const KNOWN_LIMITS: &[(u32, &str)] = &[(
    6,
    "the first-order Laplace formula is off by about 2.7% on the quartic tilt; \
     the gap is the O(3c) correction term, not an optimizer error",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn scheme(labels: &[&str]) -> StageScheme {
    StageScheme::from_labels("corn", labels).unwrap()
}

fn table_of(cfg: &SimConfig) -> ModelingTable {
    let out = simulate(cfg).unwrap();
    join_panel(&out.panel, &out.features).unwrap()
}

fn decreasing(rng: &mut ChaCha8Rng, n: usize, top: f64) -> Vec<f64> {
    let mut a = vec![top];
    for _ in 1..n {
        let last = *a.last().unwrap();
        a.push(last - rng.random_range(0.3..2.0));
    }
    a
}

// 1
fn density_normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in [2usize, 3] {
        for n in [1u32, 2, 3] {
            for _ in 0..50 {
                let mut m: Vec<f64> = (1..k).map(|_| rng.random::<f64>()).collect();
                let mut bcm_m = m.clone();
                bcm_m.sort_by(|a, b| b.total_cmp(a));
                bcm_m.insert(0, 1.0);
                m.insert(0, 1.0);
                let (mut bcm, mut mb) = (0.0, 0.0);
                // every count vector in {0..n}^(k-1)
                let total = (n as usize + 1).pow(k as u32 - 1);
                for code in 0..total {
                    let mut y = vec![1.0];
                    let mut c = code;
                    for _ in 1..k {
                        y.push((c % (n as usize + 1)) as f64 / n as f64);
                        c /= n as usize + 1;
                    }
                    mb += mb_log_density(&y, &m, n).unwrap().exp();
                    if y.windows(2).all(|w| w[1] <= w[0]) {
                        bcm += bcm_log_density(&y, &bcm_m, n).unwrap().exp();
                    }
                }
                worst = worst.max((bcm - 1.0).abs()).max((mb - 1.0).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-10 && secs < 10.0, format!("max |sum - 1| = {worst:.2e}, {secs:.2} s"))
}

// 2
fn score_correctness() -> Outcome {
    let labels = ["Emerged", "Silking", "Mature"];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for family in [Family::Bcm { trials: 100 }, Family::Mb { trials: 100 }] {
        for link in Link::ALL {
            let mut cfg = SimConfig::new(scheme(&labels), link, family, vec![1.5, 0.0, -1.5, 2.0, 1.0]);
            cfg.seasons = 6;
            cfg.days = 10;
            cfg.seed = 11;
            let table = table_of(&cfg);
            let effect_sets = match family {
                Family::Bcm { .. } => vec![vec![Effect::Ordinal, Effect::Ordinal]],
                Family::Mb { .. } => vec![
                    vec![Effect::Ordinal, Effect::Ordinal],
                    vec![Effect::Nominal, Effect::Ordinal],
                ],
            };
            for effects in effect_sets {
                let spec = ModelSpec::with_covariates(
                    cfg.scheme.clone(),
                    link,
                    family,
                    cfg.covariates.clone(),
                    effects,
                )
                .unwrap();
                let p = spec.n_params();
                for _ in 0..10 {
                    let top = rng.random_range(0.5..2.5);
                    let mut theta = decreasing(&mut rng, 3, top);
                    while theta.len() < p {
                        theta.push(rng.random_range(0.3..2.5));
                    }
                    let g = score(&table, &spec, &theta).unwrap();
                    let h = 1e-6;
                    let mut err: f64 = 0.0;
                    let mut scale: f64 = 1.0;
                    for i in 0..p {
                        let mut up = theta.clone();
                        let mut dn = theta.clone();
                        up[i] += h;
                        dn[i] -= h;
                        let fd = (partial_loglik(&table, &spec, &up).unwrap()
                            - partial_loglik(&table, &spec, &dn).unwrap())
                            / (2.0 * h);
                        err = err.max((fd - g[i]).abs());
                        scale = scale.max(fd.abs());
                    }
                    worst = worst.max(err / scale);
                }
            }
        }
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e}"))
}

// 3
fn closed_form_oracle() -> Outcome {
    let labels = ["Emerged", "Silking", "Mature"];
    let mut cfg = SimConfig::new(scheme(&labels), Link::Probit, Family::Mb { trials: 100 }, vec![1.5, 0.0, -1.5, 2.0, 1.0]);
    cfg.seasons = 8;
    cfg.seed = 5;
    let table = table_of(&cfg);
    let mut worst: f64 = 0.0;
    for link in Link::ALL {
        let spec = ModelSpec::intercept_only(cfg.scheme.clone(), link, cfg.family);
        let data = spec.select(&table).unwrap();
        let model = fit(&data, &spec).unwrap();
        for c in 0..3 {
            let mean = data.rows.iter().map(|r| r.y[c + 1]).sum::<f64>() / data.rows.len() as f64;
            worst = worst.max((link.cdf(model.theta[c]) - mean).abs());
        }
    }
    outcome(worst < 1e-8, format!("max |F(alpha) - pooled mean| = {worst:.2e}"))
}

// 4
fn consistency_coverage() -> Outcome {
    let start = Instant::now();
    let labels = ["Planted", "Emerged", "Silking", "Mature"];
    let truth = vec![2.5, 1.0, -0.5, -2.0, 1.5, 1.0];
    let reps = 50;
    let results: Vec<Option<Vec<bool>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut cfg = SimConfig::new(scheme(&labels), Link::Probit, Family::Bcm { trials: 100 }, truth.clone());
            cfg.seasons = 200;
            cfg.days = 30;
            cfg.seed = 1000 + r as u64;
            let model = fit(&table_of(&cfg), &ModelSpec::with_covariates(
                cfg.scheme.clone(),
                cfg.link,
                cfg.family,
                cfg.covariates.clone(),
                cfg.effects.clone(),
            ).unwrap()).ok()?;
            let se = model.standard_errors(CovarianceKind::Sandwich);
            Some((0..truth.len()).map(|i| (model.theta[i] - truth[i]).abs() <= 3.0 * se[i]).collect())
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    let coverage: Vec<f64> = (0..truth.len())
        .map(|i| {
            results.iter().filter(|r| r.as_ref().is_some_and(|c| c[i])).count() as f64 / reps as f64
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let min = coverage.iter().copied().fold(1.0, f64::min);
    outcome(
        min >= 0.95 && failed == 0 && secs < 300.0,
        format!("min coverage {min:.2} over {} parameters, {failed} failed fits, {secs:.1} s", truth.len()),
    )
}

// 5
fn uime() -> Outcome {
    let labels = ["Emerged", "Silking", "Mature"];
    let mut cfg = SimConfig::new(scheme(&labels), Link::Logit, Family::Bcm { trials: 100 }, vec![1.5, 0.0, -1.5, 2.0, 1.0]);
    cfg.seasons = 60;
    cfg.seed = 21;
    let out = simulate(&cfg).unwrap();
    // one observation per season, on a day that rotates through the survey
    let records: Vec<ProgressRecord> = out
        .panel
        .seasons()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let rows: Vec<&ProgressRecord> = out.panel.records().iter().filter(|r| r.season == s).collect();
            rows[(i * 7) % rows.len()].clone()
        })
        .collect();
    let panel = ProgressPanel::new(cfg.scheme.clone(), records).unwrap();
    let table = join_panel(&panel, &out.features).unwrap();
    let spec = ModelSpec::with_covariates(cfg.scheme.clone(), cfg.link, cfg.family, cfg.covariates.clone(), cfg.effects.clone()).unwrap();
    let model = fit(&table, &spec).unwrap();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, b) in model.covariance.iter().flatten().zip(model.model_covariance.iter().flatten()) {
        worst = worst.max((a - b).abs());
        scale = scale.max(b.abs());
    }
    outcome(worst < 1e-10, format!("max |sandwich - model-based| = {worst:.2e} (largest entry {scale:.2e})"))
}

// 6
fn laplace_exactness() -> Outcome {
    let scalar = |f: fn(f64) -> (f64, f64, f64)| {
        move |u: &[f64]| {
            let (v, g, h) = f(u[0]);
            (v, vec![g], DMatrix::from_element(1, 1, h))
        }
    };
    let r1 = laplace_logdensity(scalar(|u| (-0.5 * u * u, -u, -1.0)), &[0.7]).unwrap();
    let e1 = 0.5 * (2.0 * PI).ln();
    let r2 = laplace_logdensity(scalar(|u| (-(u - 3.0).powi(2) / 8.0, -(u - 3.0) / 4.0, -0.25)), &[0.0]).unwrap();
    let e2 = 0.5 * (8.0 * PI).ln();
    let gauss = ((r1.log_integral - e1) / e1).abs().max(((r2.log_integral - e2) / e2).abs());

    let r3 = laplace_logdensity(
        scalar(|u| (-0.5 * u * u - 0.01 * u.powi(4), -u - 0.04 * u.powi(3), -1.0 - 0.12 * u * u)),
        &[0.5],
    )
    .unwrap();
    let oracle = gauss_legendre(|u| (-0.5 * u * u - 0.01 * u.powi(4)).exp(), -14.0, 14.0, 400);
    let quartic = (r3.log_integral.exp() - oracle) / oracle;
    outcome(
        gauss < 1e-12 && quartic.abs() < 0.01,
        format!("Gaussian relative error {gauss:.1e}; quartic relative error {:.2}%", 100.0 * quartic),
    )
}

/// Composite Gauss-Legendre (5 points per panel).
fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let x = [0.0, 0.538_469_310_105_683_1, -0.538_469_310_105_683_1, 0.906_179_845_938_664, -0.906_179_845_938_664];
    let w = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let mid = a + (i as f64 + 0.5) * h;
            x.iter().zip(&w).map(|(xi, wi)| wi * f(mid + 0.5 * h * xi)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

// 7
fn mixed_recovery() -> Outcome {
    let start = Instant::now();
    let labels = ["Emerged", "Silking"];
    let truth = vec![1.5, -1.5, 2.0, 1.0];
    let config = |seed: u64, sd: f64| {
        let mut cfg = SimConfig::new(scheme(&labels), Link::Logit, Family::Mb { trials: 10_000 }, truth.clone());
        cfg.seasons = 100;
        cfg.days = 20;
        cfg.intercept_sd = vec![sd, sd];
        cfg.seed = seed;
        cfg
    };
    let spec = |cfg: &SimConfig| {
        ModelSpec::with_covariates(cfg.scheme.clone(), cfg.link, cfg.family, cfg.covariates.clone(), cfg.effects.clone()).unwrap()
    };
    let sds = |cfg: &SimConfig| -> Option<Vec<f64>> {
        let model = fit_mixed(&table_of(cfg), &spec(cfg), &RandomEffectsSpec::intercepts()).ok()?;
        Some(
            cfg.scheme
                .stages()
                .iter()
                .map(|s| model.components.iter().find(|c| &c.name == s).map_or(0.0, |c| c.sd))
                .collect(),
        )
    };
    let reps = 30;
    let recovered: Vec<Option<Vec<f64>>> = (0..reps).into_par_iter().map(|r| sds(&config(500 + r, 0.3))).collect();
    let hits = recovered
        .iter()
        .filter(|r| r.as_ref().is_some_and(|v| v.iter().all(|s| (0.2..=0.4).contains(s))))
        .count();
    let degenerate = sds(&config(77, 0.0));
    let degenerate_max = degenerate.as_ref().map_or(f64::INFINITY, |v| v.iter().copied().fold(0.0, f64::max));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hits as f64 >= 0.9 * reps as f64 && degenerate_max < 0.05 && secs < 600.0,
        format!("{hits}/{reps} replicates in [0.2, 0.4]; degenerate SD {degenerate_max:.4}; {secs:.1} s"),
    )
}

// 8
fn gdd_properties() -> Outcome {
    let corn = CardinalTemperatures::preset("corn").unwrap();
    let at = |t: f64| gdd(t, t, &corn);
    let mut ok = (at(corn.optimum()) - 1.0).abs() < 1e-12;
    for t in [-10.0, corn.base() - 0.5, corn.base(), corn.ceiling(), corn.ceiling() + 3.0] {
        ok &= at(t) == 0.0;
    }
    let g28 = gdd(23.0, 33.0, &corn);
    let g25 = at(25.0);
    ok &= (g28 - 10.0 / 11.0).abs() < 1e-12 && (g25 - 17.0 / 22.0).abs() < 1e-12;
    outcome(ok, format!("gdd(28) = {g28:.15}, gdd(25) = {g25:.15} (about 0.75)"))
}

// 9
fn whittaker() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = (0..60).map(|j| 0.3 + 0.4 * (j as f64 / 10.0).sin() + 0.05 * rng.random::<f64>()).collect();
    let full: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    let identity = whittaker_smooth(&full, 0.0).unwrap() == y;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let flat = whittaker_smooth(&full, 1e8).unwrap().iter().map(|z| (z - mean).abs()).fold(0.0, f64::max);

    let gappy: Vec<Option<f64>> = y.iter().enumerate().map(|(j, &v)| (j % 4 != 1 && j != 20 && j != 21).then_some(v)).collect();
    let lambda = 15.0;
    let z = whittaker_smooth(&gappy, lambda).unwrap();
    let n = y.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for j in 0..n {
        if let Some(v) = gappy[j] {
            a[(j, j)] += 1.0;
            b[j] = v;
        }
    }
    for j in 1..n {
        a[(j, j)] += lambda;
        a[(j - 1, j - 1)] += lambda;
        a[(j, j - 1)] -= lambda;
        a[(j - 1, j)] -= lambda;
    }
    let dense = a.lu().solve(&b).unwrap();
    let rel = z.iter().zip(dense.iter()).map(|(p, q)| ((p - q) / q).abs()).fold(0.0, f64::max);
    outcome(
        identity && flat < 1e-4 && rel < 1e-12,
        format!("identity {identity}; max |z - mean| at 1e8 = {flat:.2e}; gap-filled vs dense {rel:.2e}"),
    )
}

// 10
fn cv_determinism() -> Outcome {
    let (parts, exhaustive) = partitions(&[2001, 2002, 2003, 2004], &CvPlan::default()).unwrap();
    let four = exhaustive && parts.len() == 4;

    let labels = ["Emerged", "Silking", "Mature"];
    let mut cfg = SimConfig::new(scheme(&labels), Link::Logit, Family::Bcm { trials: 100 }, vec![1.5, 0.0, -1.5, 2.0, 1.0]);
    cfg.seasons = 12;
    cfg.seed = 10;
    let table = table_of(&cfg);
    let spec = ModelSpec::with_covariates(cfg.scheme.clone(), cfg.link, cfg.family, cfg.covariates.clone(), cfg.effects.clone()).unwrap();
    let plan = CvPlan { replicates: 40, train_fraction: 0.75, seed: 3 };
    let a = monte_carlo_cv(&table, &spec, &plan).unwrap();
    let b = monte_carlo_cv(&table, &spec, &plan).unwrap();
    let identical = a.r_hat.iter().zip(&b.r_hat).all(|(x, y)| x.to_bits() == y.to_bits()) && a == b;

    let delta = 0.04;
    let observed = table.observed();
    let predicted = cropclm::estimation::PredictedProgress {
        stages: cfg.scheme.stages().to_vec(),
        rows: observed
            .iter()
            .map(|o| cropclm::estimation::PredictedRow {
                season: o.season,
                day: o.day,
                m: o.y.iter().enumerate().map(|(k, v)| if k == 0 { *v } else { v + delta }).collect(),
            })
            .collect(),
    };
    let r = rmspe(&observed, &predicted).unwrap();
    let expected = delta * ((cfg.scheme.k() - 1) as f64).sqrt();
    let offset = r.pooled.iter().map(|v| (v - expected).abs()).fold(0.0, f64::max);
    outcome(
        four && identical && offset < 1e-10,
        format!("I = 4 gives {} partitions; repeat runs identical: {identical}; offset error {offset:.1e}", parts.len()),
    )
}

// 11
fn model_selection() -> Outcome {
    let start = Instant::now();
    let labels = ["Emerged", "Silking", "Mature"];
    // stage-specific slopes on both covariates under the heavy-tailed link;
    // every other grid cell is misspecified
    let truth_link = Link::Cauchit;
    let truth_effects = vec![Effect::Nominal, Effect::Nominal];
    let theta = vec![1.5, 0.0, -1.5, 1.5, 2.5, 3.5, 0.5, 1.0, 1.5];
    let metas = 20;
    let winners: Vec<Option<String>> = (0..metas)
        .into_par_iter()
        .map(|r| {
            let mut cfg = SimConfig::new(scheme(&labels), truth_link, Family::Mb { trials: 1000 }, theta.clone());
            cfg.effects = truth_effects.clone();
            cfg.seasons = 12;
            cfg.days = 16;
            cfg.seed = 2000 + r;
            let plan = CvPlan { replicates: 20, train_fraction: 0.75, seed: r };
            let grid = selection_grid(&table_of(&cfg), cfg.family, SettingSpec::Thermal, &plan).ok()?;
            Some(grid[0].code.clone())
        })
        .collect();
    let hits = winners.iter().filter(|w| w.as_deref() == Some("c○□")).count();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hits as f64 >= 0.8 * metas as f64,
        format!("true structure c○□ ranked first in {hits}/{metas} meta-replicates, {secs:.1} s"),
    )
}

// 12
fn agronomy_round_trip() -> Outcome {
    let labels = ["Planted", "Emerged", "Silking", "Mature"];
    let mut cfg = SimConfig::new(scheme(&labels), Link::Logit, Family::Bcm { trials: 100 }, vec![3.0, 1.0, -1.0, -3.0, 2.0, 1.5]);
    cfg.seasons = 10;
    cfg.seed = 12;
    let table = table_of(&cfg);
    let spec = ModelSpec::with_covariates(cfg.scheme.clone(), cfg.link, cfg.family, cfg.covariates.clone(), cfg.effects.clone()).unwrap();
    let model = fit(&table, &spec).unwrap();
    let mut round: f64 = 0.0;
    for stage in 1..3 {
        for g in [0.2, 0.5, 0.75, 0.95] {
            let days = transition_time(&model, stage, g, None).unwrap().days;
            let back = required_gdd_rate(&model, stage, days, None).unwrap();
            round = round.max((back - g).abs());
        }
    }

    // dyadic thresholds keep the telescoping sum exact in floating point
    let dyadic = with_theta(&model, vec![3.5, 1.25, -0.75, -2.875, 2.0, 1.5]);
    let sum: f64 = requirements(&dyadic, None).unwrap().iter().map(|r| r.delta).sum();
    let telescoping = sum == -2.875 - 3.5;

    let corn = with_theta(&model, vec![9.728, -1.387, -7.282, -10.095, 5.400, 1.357]);
    let emerged = stage_index(&corn.spec.scheme, "Emerged").unwrap();
    let req = requirements(&corn, None).unwrap();
    let delta = req.iter().find(|r| r.stage == emerged).map_or(f64::NAN, |r| r.magnitude);
    let table3 = (delta - 11.115).abs() < 1e-9;
    outcome(
        round < 1e-10 && telescoping && table3,
        format!("round trip {round:.1e}; telescoping exact: {telescoping}; |delta_Emerged| = {delta:.3}"),
    )
}

fn with_theta(model: &FittedModel, theta: Vec<f64>) -> FittedModel {
    let mut m = model.clone();
    m.theta = theta;
    m
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "density normalization", density_normalization),
        (2, "score correctness", score_correctness),
        (3, "closed-form intercept-only oracle", closed_form_oracle),
        (4, "consistency and sandwich coverage", consistency_coverage),
        (5, "information matrix equality with J = 1", uime),
        (6, "Laplace exactness", laplace_exactness),
        (7, "mixed-model variance recovery", mixed_recovery),
        (8, "GDD properties", gdd_properties),
        (9, "Whittaker smoother", whittaker),
        (10, "CV determinism and combinatorics", cv_determinism),
        (11, "model-selection sanity", model_selection),
        (12, "agronomy round trip", agronomy_round_trip),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    let total = Instant::now();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let took = fmt_secs(start.elapsed());
        let limit = KNOWN_LIMITS.iter().find(|(k, _)| *k == id).map(|(_, why)| *why);
        if o.pass {
            println!("PASS criterion {id:>2} {name}: {} [{took}]", o.detail);
        } else {
            println!("FAIL criterion {id:>2} {name}: {} [{took}]", o.detail);
            match limit {
                Some(why) => println!("     known limitation: {why}"),
                None => unexpected += 1,
            }
        }
    }
    println!("acceptance finished in {}", fmt_secs(total.elapsed()));
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
