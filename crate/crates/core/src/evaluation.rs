//! Prediction-error time series, Monte-Carlo cross-validation over season
//! partitions and the link/effect-structure selection grid.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ModelingTable, ProgressRecord};
use crate::estimation::{fit, ModelSpec, PredictedProgress};
use crate::features::SettingSpec;
use crate::likelihood::{Effect, Family};
use crate::link::Link;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub replicates: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { replicates: 500, train_fraction: 0.75, seed: 0 }
    }
}

impl CvPlan {
    pub fn train_size(&self, n_seasons: usize) -> usize {
        ((self.train_fraction * n_seasons as f64).ceil() as usize).clamp(1, n_seasons.saturating_sub(1).max(1))
    }

    fn validate(&self, n_seasons: usize) -> Result<()> {
        if n_seasons < 4 {
            return Err(Error::Invalid(format!(
                "cross-validation needs at least 4 seasons, got {n_seasons}"
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Invalid("train fraction must lie in (0, 1)".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Invalid("at least one replicate is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<i32>,
    pub test: Vec<i32>,
}

/// `C(n, k)`, or `None` when it exceeds `u64`.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// The `rank`-th `k`-subset of `0..n` in lexicographic order.
fn unrank_combination(n: usize, k: usize, mut rank: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut left = k;
    for i in 0..n {
        if left == 0 {
            break;
        }
        let c = binomial((n - i - 1) as u64, (left - 1) as u64).unwrap_or(u64::MAX);
        if rank < c {
            out.push(i);
            left -= 1;
        } else {
            rank -= c;
        }
    }
    out
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed bijection of `0..domain` (Feistel network with cycle walking).
fn permute_index(x: u64, domain: u64, seed: u64) -> u64 {
    if domain <= 1 {
        return 0;
    }
    let bits = 64 - (domain - 1).leading_zeros();
    let half = bits.div_ceil(2);
    let mask = (1u64 << half) - 1;
    let mut v = x;
    loop {
        let (mut l, mut r) = (v >> half, v & mask);
        for round in 0..6u64 {
            let f = mix64(r ^ mix64(seed ^ round.wrapping_mul(0x9e37_79b9_7f4a_7c15))) & mask;
            (l, r) = (r, l ^ f);
        }
        v = (l << half) | r;
        if v < domain {
            return v;
        }
    }
}

/// Train/test partitions of `seasons`. Returns all partitions when their
/// count is at most the replicate budget, otherwise a seeded sample in
/// which replicate `n` depends only on `(seed, n)`.
pub fn partitions(seasons: &[i32], plan: &CvPlan) -> Result<(Vec<Partition>, bool)> {
    let mut seasons = seasons.to_vec();
    seasons.sort_unstable();
    seasons.dedup();
    let n = seasons.len();
    plan.validate(n)?;
    let n_test = n - plan.train_size(n);
    let build = |test_idx: Vec<usize>| {
        let test: Vec<i32> = test_idx.iter().map(|&i| seasons[i]).collect();
        let train = seasons.iter().copied().filter(|s| !test.contains(s)).collect();
        Partition { train, test }
    };
    let count = binomial(n as u64, n_test as u64);
    match count {
        Some(c) if c <= plan.replicates as u64 => {
            Ok(((0..c).map(|r| build(unrank_combination(n, n_test, r))).collect(), true))
        }
        Some(c) => Ok((
            (0..plan.replicates as u64)
                .map(|r| build(unrank_combination(n, n_test, permute_index(r, c, plan.seed))))
                .collect(),
            false,
        )),
        None => Ok((
            (0..plan.replicates as u64)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
                    rng.set_stream(r);
                    let mut idx = index::sample(&mut rng, n, n_test).into_vec();
                    idx.sort_unstable();
                    build(idx)
                })
                .collect(),
            false,
        )),
    }
}

/// Per-day prediction errors of one set of seasons (fractions, not percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmspeSeries {
    pub days: Vec<u32>,
    /// Root mean over seasons of the squared Euclidean error over the free
    /// categories.
    pub pooled: Vec<f64>,
    /// `per_stage[c][j]`: root mean squared error of free category `c`.
    pub per_stage: Vec<Vec<f64>>,
    /// Seasons contributing at each day.
    pub counts: Vec<usize>,
    pub average: f64,
    /// Observations without a matching prediction.
    pub unmatched: usize,
}

/// Prediction-error series of predictions against observations, aligned by
/// (season, day). Category 1 is excluded from the norm.
pub fn rmspe(observed: &[ProgressRecord], predicted: &PredictedProgress) -> Result<RmspeSeries> {
    let mut by_day: BTreeMap<u32, (usize, f64, Vec<f64>)> = BTreeMap::new();
    let mut unmatched = 0;
    let mut q = None;
    for o in observed {
        let Some(p) = predicted.find(o.season, o.day) else {
            unmatched += 1;
            continue;
        };
        if p.m.len() != o.y.len() {
            return Err(Error::Invalid("observed and predicted stage counts differ".into()));
        }
        let free = o.y.len() - 1;
        q = Some(free);
        let e = by_day.entry(o.day).or_insert_with(|| (0, 0.0, vec![0.0; free]));
        e.0 += 1;
        for c in 1..o.y.len() {
            let d = o.y[c] - p.m[c];
            e.1 += d * d;
            e.2[c - 1] += d * d;
        }
    }
    let Some(q) = q else {
        return Err(Error::Invalid("no (season, day) keys shared by observations and predictions".into()));
    };
    let days: Vec<u32> = by_day.keys().copied().collect();
    let counts: Vec<usize> = by_day.values().map(|v| v.0).collect();
    let pooled: Vec<f64> = by_day.values().map(|v| (v.1 / v.0 as f64).sqrt()).collect();
    let per_stage = (0..q)
        .map(|c| by_day.values().map(|v| (v.2[c] / v.0 as f64).sqrt()).collect())
        .collect();
    let average = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(RmspeSeries { days, pooled, per_stage, counts, average, unmatched })
}

/// Within-sample RMSE: the error series over all seasons, averaged over days.
pub fn within_sample_rmse(observed: &[ProgressRecord], predicted: &PredictedProgress) -> Result<f64> {
    Ok(rmspe(observed, predicted)?.average)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub code: String,
    pub days: Vec<u32>,
    /// Mean error per day over the replicates testing that day, in percent.
    pub r_hat: Vec<f64>,
    /// Per free stage, in percent.
    pub per_stage: Vec<Vec<f64>>,
    pub stages: Vec<String>,
    /// Mean of `r_hat`, in percent.
    pub average: f64,
    pub replicates: usize,
    pub failures: usize,
    pub flagged: bool,
    pub exhaustive: bool,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Observations without predictions, summed over replicates.
    pub unmatched: usize,
    pub warnings: Vec<String>,
    pub norm: String,
}

fn replicate(data: &ModelingTable, spec: &ModelSpec, part: &Partition) -> Result<RmspeSeries> {
    let train = data.subset(&part.train).restandardized()?;
    let model = fit(&train, spec)?;
    let test = data.subset(&part.test).with_standardization(&train.standardization);
    rmspe(&test.observed(), &model.fitted(&test))
}

/// Monte-Carlo cross-validated prediction error of one model structure.
pub fn monte_carlo_cv(data: &ModelingTable, spec: &ModelSpec, plan: &CvPlan) -> Result<CvReport> {
    let data = spec.select(data)?;
    let seasons = data.seasons();
    let (parts, exhaustive) = partitions(&seasons, plan)?;
    let results: Vec<Result<RmspeSeries>> = parts.par_iter().map(|p| replicate(&data, spec, p)).collect();

    let q = spec.scheme.k() - 1;
    let mut acc: BTreeMap<u32, (usize, f64, Vec<f64>)> = BTreeMap::new();
    let mut failures = 0;
    let mut unmatched = 0;
    let mut warnings = Vec::new();
    for (n, r) in results.iter().enumerate() {
        match r {
            Ok(s) => {
                unmatched += s.unmatched;
                for (i, &d) in s.days.iter().enumerate() {
                    let e = acc.entry(d).or_insert_with(|| (0, 0.0, vec![0.0; q]));
                    e.0 += 1;
                    e.1 += s.pooled[i];
                    for c in 0..q {
                        e.2[c] += s.per_stage[c][i];
                    }
                }
            }
            Err(e) => {
                failures += 1;
                if warnings.len() < 10 {
                    warnings.push(format!("replicate {n} dropped: {e}"));
                }
            }
        }
    }
    if acc.is_empty() {
        return Err(Error::Numerical(format!(
            "all {} cross-validation replicates failed{}",
            parts.len(),
            warnings.first().map(|w| format!(" ({w})")).unwrap_or_default()
        )));
    }
    let flagged = failures as f64 > 0.1 * parts.len() as f64;
    if flagged {
        warnings.push(format!("{failures} of {} replicates failed", parts.len()));
    }
    let days: Vec<u32> = acc.keys().copied().collect();
    let r_hat: Vec<f64> = acc.values().map(|v| 100.0 * v.1 / v.0 as f64).collect();
    let per_stage = (0..q)
        .map(|c| acc.values().map(|v| 100.0 * v.2[c] / v.0 as f64).collect())
        .collect();
    let average = r_hat.iter().sum::<f64>() / r_hat.len() as f64;
    let n = seasons.len();
    Ok(CvReport {
        code: spec.code(),
        days,
        r_hat,
        per_stage,
        stages: spec.scheme.stages().to_vec(),
        average,
        replicates: parts.len(),
        failures,
        flagged,
        exhaustive,
        train_size: plan.train_size(n),
        test_size: n - plan.train_size(n),
        seed: plan.seed,
        unmatched,
        warnings,
        norm: "euclidean over free categories; category 1 excluded".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub code: String,
    pub link: Link,
    pub effects: Vec<Effect>,
    /// Average cross-validated error in percent; infinite when the cell failed.
    pub average: f64,
    pub report: Option<CvReport>,
    pub error: Option<String>,
}

/// Every (link, effect pattern) combination for `n_covariates` covariates,
/// ordinal before nominal.
pub fn grid_cells(n_covariates: usize) -> Vec<(Link, Vec<Effect>)> {
    let mut out = Vec::new();
    for link in Link::ALL {
        for mask in 0..(1usize << n_covariates) {
            let effects = (0..n_covariates)
                .map(|i| if mask >> (n_covariates - 1 - i) & 1 == 1 { Effect::Nominal } else { Effect::Ordinal })
                .collect();
            out.push((link, effects));
        }
    }
    out
}

/// Cross-validates every grid cell and ranks them by average error.
pub fn selection_grid(
    data: &ModelingTable,
    family: Family,
    setting: SettingSpec,
    plan: &CvPlan,
) -> Result<Vec<GridRow>> {
    let covariates = setting.covariates();
    let mut rows = Vec::new();
    for (link, effects) in grid_cells(covariates.len()) {
        let spec = ModelSpec::with_covariates(data.scheme.clone(), link, family, covariates.clone(), effects.clone())?;
        let code = spec.code();
        match monte_carlo_cv(data, &spec, plan) {
            Ok(report) => rows.push(GridRow { code, link, effects, average: report.average, report: Some(report), error: None }),
            Err(e @ (Error::Invalid(_) | Error::MissingKeys(_))) => return Err(e),
            Err(e) => rows.push(GridRow {
                code,
                link,
                effects,
                average: f64::INFINITY,
                report: None,
                error: Some(e.to_string()),
            }),
        }
    }
    rows.sort_by(|a, b| a.average.total_cmp(&b.average));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::PredictedRow;

    fn rec(season: i32, day: u32, y: Vec<f64>) -> ProgressRecord {
        ProgressRecord { season, day, y }
    }

    fn pred(rows: Vec<(i32, u32, Vec<f64>)>) -> PredictedProgress {
        PredictedProgress {
            stages: vec!["a".into(), "b".into(), "c".into()],
            rows: rows.into_iter().map(|(season, day, m)| PredictedRow { season, day, m }).collect(),
        }
    }

    #[test]
    fn rmspe_examples() {
        let obs = vec![rec(1, 5, vec![1.0, 0.6, 0.3]), rec(2, 5, vec![1.0, 0.5, 0.2])];
        let same = pred(vec![(1, 5, vec![1.0, 0.6, 0.3]), (2, 5, vec![1.0, 0.5, 0.2])]);
        assert_eq!(rmspe(&obs, &same).unwrap().pooled, vec![0.0]);
        let off = pred(vec![(1, 5, vec![1.0, 0.7, 0.4]), (2, 5, vec![1.0, 0.6, 0.3])]);
        let r = rmspe(&obs, &off).unwrap();
        assert!((r.pooled[0] - 0.1 * 2f64.sqrt()).abs() < 1e-12);
        // squared norms 0.01 and 0.03
        let p = pred(vec![(1, 5, vec![1.0, 0.7, 0.3]), (2, 5, vec![1.0, 0.5 + 0.03f64.sqrt(), 0.2])]);
        let r = rmspe(&obs, &p).unwrap();
        assert!((r.pooled[0] - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(rmspe(&obs, &pred(vec![(9, 9, vec![1.0, 0.0, 0.0])])).is_err());
    }

    #[test]
    fn binomial_and_unranking() {
        assert_eq!(binomial(4, 1), Some(4));
        assert_eq!(binomial(19, 4), Some(3876));
        assert_eq!(binomial(200, 50), None);
        let all: Vec<Vec<usize>> = (0..10).map(|r| unrank_combination(5, 2, r)).collect();
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[9], vec![3, 4]);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn keyed_permutation_is_a_bijection() {
        for domain in [1u64, 2, 7, 100, 3876] {
            let mut seen: Vec<u64> = (0..domain).map(|x| permute_index(x, domain, 42)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..domain).collect::<Vec<_>>());
        }
    }

    #[test]
    fn exhaustive_partitions_for_four_seasons() {
        let (parts, exhaustive) = partitions(&[4, 1, 3, 2], &CvPlan::default()).unwrap();
        assert!(exhaustive);
        assert_eq!(parts.len(), 4);
        let mut tested: Vec<i32> = parts.iter().flat_map(|p| p.test.clone()).collect();
        tested.sort();
        assert_eq!(tested, vec![1, 2, 3, 4]);
        assert!(parts.iter().all(|p| p.train.len() == 3));
    }

    #[test]
    fn sampled_partitions_are_distinct_and_seeded() {
        let seasons: Vec<i32> = (2000..2019).collect();
        let plan = CvPlan { replicates: 50, train_fraction: 0.75, seed: 9 };
        let (a, exhaustive) = partitions(&seasons, &plan).unwrap();
        assert!(!exhaustive);
        assert_eq!(a[0].train.len(), 15);
        let (b, _) = partitions(&seasons, &plan).unwrap();
        assert_eq!(a, b);
        let mut tests: Vec<Vec<i32>> = a.iter().map(|p| p.test.clone()).collect();
        tests.sort();
        tests.dedup();
        assert_eq!(tests.len(), 50);
        // a larger budget extends the same sequence
        let (c, _) = partitions(&seasons, &CvPlan { replicates: 80, ..plan }).unwrap();
        assert_eq!(&c[..50], &a[..]);
    }

    #[test]
    fn grid_enumeration() {
        assert_eq!(grid_cells(1).len(), 6);
        assert_eq!(grid_cells(3).len(), 24);
        assert_eq!(grid_cells(2)[1].1, vec![Effect::Ordinal, Effect::Nominal]);
    }

    #[test]
    fn small_plans_are_rejected() {
        assert!(partitions(&[1, 2, 3], &CvPlan::default()).is_err());
    }
}
