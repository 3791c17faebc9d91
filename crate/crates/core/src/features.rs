//! Predictive features: growing degree days and thermal time, NDVI and
//! greenup, first-order Whittaker smoothing, and covariate standardization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ReflectanceSeries, WeatherSeries};
use crate::{Error, Result};

/// Base, optimal and ceiling temperatures of a crop, in °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardinalTemperatures {
    base: f64,
    optimum: f64,
    ceiling: f64,
}

impl CardinalTemperatures {
    pub fn new(base: f64, optimum: f64, ceiling: f64) -> Result<Self> {
        if !(base.is_finite() && optimum.is_finite() && ceiling.is_finite())
            || !(base < optimum && optimum < ceiling)
        {
            return Err(Error::Invalid(format!(
                "cardinal temperatures must satisfy base < optimum < ceiling, got ({base}, {optimum}, {ceiling})"
            )));
        }
        Ok(Self {
            base,
            optimum,
            ceiling,
        })
    }

    /// Cardinal temperatures of common field crops.
    pub fn preset(crop: &str) -> Option<Self> {
        let (b, o, c) = match crop.trim().to_ascii_lowercase().replace(['_', '-'], " ").as_str() {
            "corn" => (8.0, 30.0, 36.0),
            "sorghum" => (12.0, 30.0, 36.0),
            "soybeans" | "soybean" => (10.0, 28.0, 34.0),
            "wheat" | "winter wheat" => (2.0, 26.0, 32.0),
            "oats" => (2.0, 26.0, 32.0),
            "beans" | "dry beans" => (10.0, 30.0, 36.0),
            "alfalfa" => (8.0, 26.0, 36.0),
            "millet" => (11.0, 33.0, 46.0),
            _ => return None,
        };
        Some(Self {
            base: b,
            optimum: o,
            ceiling: c,
        })
    }

    pub const PRESET_CROPS: [&'static str; 8] = [
        "corn", "sorghum", "soybeans", "wheat", "oats", "beans", "alfalfa", "millet",
    ];

    pub fn base(&self) -> f64 {
        self.base
    }
    pub fn optimum(&self) -> f64 {
        self.optimum
    }
    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }
}

/// Triangular density with lower limit `l`, mode `m` and upper limit `u`.
pub fn triangular_density(x: f64, l: f64, m: f64, u: f64) -> f64 {
    if x < l || x > u {
        0.0
    } else if x <= m {
        2.0 * (x - l) / ((u - l) * (m - l))
    } else {
        2.0 * (u - x) / ((u - l) * (u - m))
    }
}

/// Daily growing degree day: the normalized triangular density evaluated at
/// the truncated average temperature. Always in `[0, 1]`.
pub fn gdd(t_min: f64, t_max: f64, c: &CardinalTemperatures) -> f64 {
    let t_av = 0.5 * (t_min.max(c.base) + t_max.min(c.ceiling));
    let peak = triangular_density(c.optimum, c.base, c.optimum, c.ceiling);
    triangular_density(t_av, c.base, c.optimum, c.ceiling) / peak
}

/// Per-season cumulative thermal time. Days must run contiguously from day 1.
pub fn thermal_time(
    weather: &WeatherSeries,
    c: &CardinalTemperatures,
) -> Result<BTreeMap<i32, Vec<f64>>> {
    let mut daily: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for r in weather.records() {
        let series = daily.entry(r.season).or_default();
        let expected = series.len() as u32 + 1;
        if r.day != expected {
            return Err(Error::Invalid(format!(
                "weather for season {} is not contiguous from day 1: expected day {expected}, found day {}",
                r.season, r.day
            )));
        }
        series.push(gdd(r.t_min, r.t_max, c));
    }
    Ok(daily
        .into_iter()
        .map(|(s, v)| (s, cumulative_sum(&v)))
        .collect())
}

/// NDVI from red and near-infrared reflectances.
pub fn ndvi(red: f64, nir: f64) -> f64 {
    (nir - red) / (nir + red)
}

/// First-order Whittaker smoother.
///
/// Minimizes `sum_j w_j (y_j - z_j)^2 + lambda * sum_j (z_j - z_{j-1})^2`
/// with zero weight on missing entries, through the tridiagonal normal
/// equations. Leading and trailing gaps are filled with the nearest smoothed
/// value, so padding a series with missing entries leaves the interior
/// solution unchanged.
pub fn whittaker_smooth(series: &[Option<f64>], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!("smoothing penalty must be >= 0, got {lambda}")));
    }
    let observed = series.iter().filter(|v| v.is_some()).count();
    if observed < 2 {
        return Err(Error::Invalid(format!(
            "Whittaker smoothing needs at least 2 observed points, got {observed}"
        )));
    }
    if let Some(v) = series.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite value {v} in series")));
    }
    let n = series.len();
    if lambda == 0.0 {
        if observed < n {
            return Err(Error::Invalid(
                "gaps cannot be filled with a zero smoothing penalty".into(),
            ));
        }
        return Ok(series.iter().map(|v| v.unwrap()).collect());
    }

    let mut diag = vec![0.0; n];
    let off = -lambda; // sub/super diagonal
    let mut rhs = vec![0.0; n];
    for (j, v) in series.iter().enumerate() {
        let w = if v.is_some() { 1.0 } else { 0.0 };
        let neighbours = (j > 0) as u8 + (j + 1 < n) as u8;
        diag[j] = w + lambda * neighbours as f64;
        rhs[j] = w * v.unwrap_or(0.0);
    }
    solve_symmetric_tridiagonal(&diag, off, &rhs)
}

/// Thomas algorithm for a symmetric tridiagonal system with constant
/// off-diagonal `off`.
fn solve_symmetric_tridiagonal(diag: &[f64], off: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Singular("tridiagonal smoother system".into()));
    }
    c[0] = off / denom;
    d[0] = rhs[0] / denom;
    for j in 1..n {
        denom = diag[j] - off * c[j - 1];
        if denom.abs() < 1e-300 {
            return Err(Error::Singular("tridiagonal smoother system".into()));
        }
        c[j] = off / denom;
        d[j] = (rhs[j] - off * d[j - 1]) / denom;
    }
    let mut z = vec![0.0; n];
    z[n - 1] = d[n - 1];
    for j in (0..n - 1).rev() {
        z[j] = d[j] - c[j] * z[j + 1];
    }
    Ok(z)
}

/// Per-season cumulative greenup from a daily NDVI series.
pub fn greenup(v: &[f64]) -> Vec<f64> {
    cumulative_sum(v)
}

fn cumulative_sum(v: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    v.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    Calendar,
    Thermal,
    Ndvi,
    Greenup,
}

impl Covariate {
    pub fn label(self) -> &'static str {
        match self {
            Covariate::Calendar => "Calendar",
            Covariate::Thermal => "Thermal",
            Covariate::Ndvi => "NDVI",
            Covariate::Greenup => "Greenup",
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Covariate::Calendar => "calendar",
            Covariate::Thermal => "thermal",
            Covariate::Ndvi => "ndvi",
            Covariate::Greenup => "greenup",
        }
    }

    /// Shape glyph pair (ordinal, nominal) for selection tables.
    pub fn glyphs(self) -> (char, char) {
        match self {
            Covariate::Calendar => ('●', '○'),
            Covariate::Thermal => ('■', '□'),
            Covariate::Ndvi | Covariate::Greenup => ('▲', '△'),
        }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "calendar" | "t" => Ok(Covariate::Calendar),
            "thermal" | "gdd" => Ok(Covariate::Thermal),
            "ndvi" => Ok(Covariate::Ndvi),
            "greenup" => Ok(Covariate::Greenup),
            other => Err(Error::Invalid(format!("unknown covariate `{other}`"))),
        }
    }
}

/// The four covariate settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingSpec {
    Calendar,
    Thermal,
    Greenup,
    Combined,
}

impl SettingSpec {
    pub const ALL: [SettingSpec; 4] = [
        SettingSpec::Calendar,
        SettingSpec::Thermal,
        SettingSpec::Greenup,
        SettingSpec::Combined,
    ];

    pub fn covariates(self) -> Vec<Covariate> {
        match self {
            SettingSpec::Calendar => vec![Covariate::Calendar],
            SettingSpec::Thermal => vec![Covariate::Calendar, Covariate::Thermal],
            SettingSpec::Greenup => vec![Covariate::Calendar, Covariate::Greenup],
            SettingSpec::Combined => {
                vec![Covariate::Calendar, Covariate::Thermal, Covariate::Ndvi]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SettingSpec::Calendar => "calendar",
            SettingSpec::Thermal => "thermal",
            SettingSpec::Greenup => "greenup",
            SettingSpec::Combined => "combined",
        }
    }
}

impl FromStr for SettingSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "calendar" => Ok(SettingSpec::Calendar),
            "thermal" => Ok(SettingSpec::Thermal),
            "greenup" => Ok(SettingSpec::Greenup),
            "combined" => Ok(SettingSpec::Combined),
            other => Err(Error::Invalid(format!("unknown setting `{other}`"))),
        }
    }
}

/// Means and standard deviations used to standardize covariates.
///
/// Standard deviations use the sample (n - 1 divisor) convention, so a
/// standardized column has sample mean 0 and sample standard deviation 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub covariates: Vec<Covariate>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub convention: String,
}

impl StandardizationParams {
    pub const CONVENTION: &'static str = "sample-sd";

    /// Fits means and standard deviations column-wise over `rows`.
    pub fn fit(covariates: &[Covariate], rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len() as f64;
        if rows.len() < 2 {
            return Err(Error::Invalid(format!(
                "standardization needs at least 2 rows, got {}",
                rows.len()
            )));
        }
        let mut means = Vec::with_capacity(covariates.len());
        let mut sds = Vec::with_capacity(covariates.len());
        for (p, cov) in covariates.iter().enumerate() {
            let mean = rows.iter().map(|r| r[p]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[p] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::ZeroVariance(cov.label().into()));
            }
            means.push(mean);
            sds.push(sd);
        }
        Ok(Self {
            covariates: covariates.to_vec(),
            means,
            sds,
            convention: Self::CONVENTION.into(),
        })
    }

    pub fn identity(covariates: &[Covariate]) -> Self {
        Self {
            covariates: covariates.to_vec(),
            means: vec![0.0; covariates.len()],
            sds: vec![1.0; covariates.len()],
            convention: Self::CONVENTION.into(),
        }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn unapply(&self, scaled: &[f64]) -> Vec<f64> {
        scaled
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    pub fn sd_of(&self, cov: Covariate) -> Option<f64> {
        self.covariates
            .iter()
            .position(|&c| c == cov)
            .map(|i| self.sds[i])
    }
}

/// Daily features of one season and day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub season: i32,
    pub day: u32,
    pub calendar: f64,
    pub thermal: Option<f64>,
    pub ndvi: Option<f64>,
    pub greenup: Option<f64>,
}

impl FeatureRow {
    pub fn get(&self, cov: Covariate) -> Option<f64> {
        match cov {
            Covariate::Calendar => Some(self.calendar),
            Covariate::Thermal => self.thermal,
            Covariate::Ndvi => self.ndvi,
            Covariate::Greenup => self.greenup,
        }
    }

    pub fn raw(&self, covariates: &[Covariate]) -> Result<Vec<f64>> {
        covariates
            .iter()
            .map(|&c| {
                self.get(c).ok_or_else(|| {
                    Error::Invalid(format!(
                        "feature `{}` missing for season {}, day {}",
                        c.column(),
                        self.season,
                        self.day
                    ))
                })
            })
            .collect()
    }
}

/// Daily feature table sorted by (season, day), optionally carrying
/// standardized copies of the covariates of one setting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureFrame {
    rows: Vec<FeatureRow>,
    standardization: Option<StandardizationParams>,
    scaled: Vec<Vec<f64>>,
}

impl FeatureFrame {
    pub fn new(mut rows: Vec<FeatureRow>) -> Result<Self> {
        rows.sort_by_key(|r| (r.season, r.day));
        if let Some(w) = rows
            .windows(2)
            .find(|w| (w[0].season, w[0].day) == (w[1].season, w[1].day))
        {
            return Err(Error::Invalid(format!(
                "duplicate feature row for season {}, day {}",
                w[0].season, w[0].day
            )));
        }
        Ok(Self {
            rows,
            standardization: None,
            scaled: Vec::new(),
        })
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn standardization(&self) -> Option<&StandardizationParams> {
        self.standardization.as_ref()
    }

    /// Standardized covariates, row-aligned with [`FeatureFrame::rows`].
    pub fn scaled(&self) -> &[Vec<f64>] {
        &self.scaled
    }

    pub fn find(&self, season: i32, day: u32) -> Option<&FeatureRow> {
        self.rows
            .binary_search_by_key(&(season, day), |r| (r.season, r.day))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn seasons(&self) -> Vec<i32> {
        let mut s: Vec<i32> = self.rows.iter().map(|r| r.season).collect();
        s.dedup();
        s
    }

    pub fn filter_seasons(&self, seasons: &[i32]) -> FeatureFrame {
        let keep: Vec<usize> = (0..self.rows.len())
            .filter(|&i| seasons.contains(&self.rows[i].season))
            .collect();
        FeatureFrame {
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
            standardization: self.standardization.clone(),
            scaled: if self.scaled.is_empty() {
                Vec::new()
            } else {
                keep.iter().map(|&i| self.scaled[i].clone()).collect()
            },
        }
    }

    /// Attaches standardized columns computed with existing parameters.
    pub fn with_standardization(&self, params: StandardizationParams) -> Result<FeatureFrame> {
        let scaled = self
            .rows
            .iter()
            .map(|r| r.raw(&params.covariates).map(|raw| params.apply(&raw)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureFrame {
            rows: self.rows.clone(),
            standardization: Some(params),
            scaled,
        })
    }
}

/// Standardizes the covariates of `setting` over all rows of `frame`.
pub fn standardize(
    frame: &FeatureFrame,
    setting: SettingSpec,
) -> Result<(FeatureFrame, StandardizationParams)> {
    standardize_covariates(frame, &setting.covariates())
}

pub fn standardize_covariates(
    frame: &FeatureFrame,
    covariates: &[Covariate],
) -> Result<(FeatureFrame, StandardizationParams)> {
    let raw = frame
        .rows
        .iter()
        .map(|r| r.raw(covariates))
        .collect::<Result<Vec<_>>>()?;
    let params = StandardizationParams::fit(covariates, &raw)?;
    let out = frame.with_standardization(params.clone())?;
    Ok((out, params))
}

/// Options for [`build_features`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub cardinal: CardinalTemperatures,
    /// Whittaker penalty for the NDVI series.
    pub lambda: f64,
    /// Accumulate the raw (linearly gap-filled) NDVI instead of the smoothed one.
    pub raw_ndvi: bool,
}

/// Builds the daily feature frame from weather and (optionally) reflectance.
///
/// Every season spans days 1 through its last weather day. NDVI is observed
/// on days with both reflectances present and filled elsewhere by the
/// smoother.
pub fn build_features(
    weather: &WeatherSeries,
    reflectance: Option<&ReflectanceSeries>,
    options: &FeatureOptions,
) -> Result<FeatureFrame> {
    let thermal = thermal_time(weather, &options.cardinal)?;
    let mut ndvi_by_season: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    if let Some(refl) = reflectance {
        let mut observed: BTreeMap<i32, BTreeMap<u32, f64>> = BTreeMap::new();
        for r in refl.records() {
            if let (Some(red), Some(nir)) = (r.red, r.nir) {
                observed.entry(r.season).or_default().insert(r.day, ndvi(red, nir));
            }
        }
        for (&season, tau) in &thermal {
            let obs = observed.remove(&season).unwrap_or_default();
            let series: Vec<Option<f64>> = (1..=tau.len() as u32)
                .map(|d| obs.get(&d).copied())
                .collect();
            let v = if options.raw_ndvi {
                linear_fill(&series)?
            } else {
                whittaker_smooth(&series, options.lambda)?
            };
            ndvi_by_season.insert(season, v);
        }
    }

    let mut rows = Vec::new();
    for (&season, tau) in &thermal {
        let v = ndvi_by_season.get(&season);
        let g = v.map(|v| greenup(v));
        for (j, &t) in tau.iter().enumerate() {
            rows.push(FeatureRow {
                season,
                day: j as u32 + 1,
                calendar: (j + 1) as f64,
                thermal: Some(t),
                ndvi: v.map(|v| v[j]),
                greenup: g.as_ref().map(|g| g[j]),
            });
        }
    }
    FeatureFrame::new(rows)
}

fn linear_fill(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let known: Vec<(usize, f64)> = series
        .iter()
        .enumerate()
        .filter_map(|(j, v)| v.map(|v| (j, v)))
        .collect();
    if known.len() < 2 {
        return Err(Error::Invalid(format!(
            "NDVI gap filling needs at least 2 observed points, got {}",
            known.len()
        )));
    }
    let mut out = vec![0.0; series.len()];
    let mut k = 0;
    for (j, slot) in out.iter_mut().enumerate() {
        while k + 1 < known.len() && known[k + 1].0 <= j {
            k += 1;
        }
        let (j0, v0) = known[k];
        *slot = if j <= j0 || k + 1 == known.len() {
            v0
        } else {
            let (j1, v1) = known[k + 1];
            v0 + (v1 - v0) * (j - j0) as f64 / (j1 - j0) as f64
        };
    }
    Ok(out)
}

const FEATURE_COLUMNS: [Covariate; 4] = [
    Covariate::Calendar,
    Covariate::Thermal,
    Covariate::Ndvi,
    Covariate::Greenup,
];

/// Writes the frame as CSV: raw columns, then `z_<name>` standardized columns
/// when the frame carries them. Missing values are empty cells.
pub fn write_features<W: Write>(frame: &FeatureFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["season".to_string(), "day".to_string()];
    header.extend(FEATURE_COLUMNS.iter().map(|c| c.column().to_string()));
    let scaled_covs = frame
        .standardization
        .as_ref()
        .map(|p| p.covariates.clone())
        .unwrap_or_default();
    header.extend(scaled_covs.iter().map(|c| format!("z_{}", c.column())));
    w.write_record(&header)?;
    for (i, r) in frame.rows.iter().enumerate() {
        let mut rec = vec![r.season.to_string(), r.day.to_string()];
        for c in FEATURE_COLUMNS {
            rec.push(r.get(c).map(|v| v.to_string()).unwrap_or_default());
        }
        if !scaled_covs.is_empty() {
            rec.extend(frame.scaled[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<features>", e))?;
    Ok(())
}

pub fn save_features(frame: &FeatureFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(frame, std::io::BufWriter::new(file))
}

/// Reads a feature CSV. Only the raw columns are read; standardized columns
/// are recomputed by whoever fits a model.
pub fn read_features<R: Read>(reader: R) -> Result<FeatureFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let season_ix = col("season").ok_or_else(|| Error::MissingColumn("season".into()))?;
    let day_ix = col("day").ok_or_else(|| Error::MissingColumn("day".into()))?;
    let cal_ix = col("calendar");
    let cov_ix: Vec<Option<usize>> = FEATURE_COLUMNS[1..].iter().map(|c| col(c.column())).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let season: i32 = parse_cell(&rec, season_ix, row, "season")?;
        let day: u32 = parse_cell(&rec, day_ix, row, "day")?;
        let calendar = match cal_ix {
            Some(ix) => parse_cell(&rec, ix, row, "calendar")?,
            None => day as f64,
        };
        let mut opt = [None; 3];
        for (k, ix) in cov_ix.iter().enumerate() {
            if let Some(ix) = ix {
                let cell = rec.get(*ix).unwrap_or("");
                if !cell.is_empty() {
                    opt[k] = Some(cell.parse::<f64>().map_err(|_| {
                        Error::row(row, FEATURE_COLUMNS[k + 1].column(), format!("not a number: `{cell}`"))
                    })?);
                }
            }
        }
        rows.push(FeatureRow {
            season,
            day,
            calendar,
            thermal: opt[0],
            ndvi: opt[1],
            greenup: opt[2],
        });
    }
    FeatureFrame::new(rows)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(file)
}

pub(crate) fn parse_cell<T: FromStr>(
    rec: &csv::StringRecord,
    ix: usize,
    row: usize,
    column: &str,
) -> Result<T> {
    let cell = rec.get(ix).unwrap_or("");
    cell.parse::<T>()
        .map_err(|_| Error::row(row, column, format!("cannot parse `{cell}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn corn() -> CardinalTemperatures {
        CardinalTemperatures::preset("corn").unwrap()
    }

    #[test]
    fn gdd_examples() {
        let c = corn();
        assert_eq!(gdd(30.0, 30.0, &c), 1.0);
        assert_eq!(gdd(-5.0, 2.0, &c), 0.0);
        // T_av = 28: [2*20/(28*22)] / [2/28] = 10/11
        assert!((gdd(20.0, 40.0, &c) - 10.0 / 11.0).abs() < 1e-12);
        assert!((gdd(25.0, 25.0, &c) - 17.0 / 22.0).abs() < 1e-12);
        // truncation at the ceiling: T_av = (30 + 36) / 2 = 33
        assert!((gdd(30.0, 45.0, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gdd_bounds() {
        let c = corn();
        for lo in -20..45 {
            for span in 0..20 {
                let (a, b) = (lo as f64, (lo + span) as f64);
                let g = gdd(a, b, &c);
                assert!((0.0..=1.0).contains(&g));
            }
        }
    }

    #[test]
    fn rejects_unordered_cardinals() {
        assert!(CardinalTemperatures::new(10.0, 8.0, 30.0).is_err());
        assert!(CardinalTemperatures::new(8.0, 30.0, 30.0).is_err());
    }

    #[test]
    fn thermal_time_resets_per_season() {
        use crate::dataset::{WeatherRecord, WeatherSeries};
        let c = corn();
        let w = WeatherSeries::new(vec![
            WeatherRecord { season: 2020, day: 1, t_min: 30.0, t_max: 30.0 },
            WeatherRecord { season: 2021, day: 1, t_min: 30.0, t_max: 30.0 },
            WeatherRecord { season: 2021, day: 2, t_min: 0.0, t_max: 1.0 },
        ])
        .unwrap();
        let tau = thermal_time(&w, &c).unwrap();
        assert_eq!(tau[&2020], vec![1.0]);
        assert_eq!(tau[&2021], vec![1.0, 1.0]);

        let gap = WeatherSeries::new(vec![
            WeatherRecord { season: 2021, day: 1, t_min: 10.0, t_max: 20.0 },
            WeatherRecord { season: 2021, day: 3, t_min: 10.0, t_max: 20.0 },
        ])
        .unwrap();
        let err = thermal_time(&gap, &c).unwrap_err().to_string();
        assert!(err.contains("season 2021") && err.contains("day 2"), "{err}");
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_sum(&[0.5, 1.0, 0.0]), vec![0.5, 1.5, 1.5]);
        assert_eq!(greenup(&[0.2, 0.3]), vec![0.2, 0.5]);
        let g = greenup(&[-0.1, 0.4]);
        assert!((g[0] + 0.1).abs() < 1e-15 && (g[1] - 0.3).abs() < 1e-15);
        assert_eq!(greenup(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn ndvi_examples() {
        assert_eq!(ndvi(0.3, 0.3), 0.0);
        assert!((ndvi(0.2, 0.6) - 0.5).abs() < 1e-15);
        assert!((ndvi(0.6, 0.2) + 0.5).abs() < 1e-15);
    }

    fn dense_whittaker(series: &[Option<f64>], lambda: f64) -> Vec<f64> {
        let n = series.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (j, v) in series.iter().enumerate() {
            if let Some(v) = v {
                a[(j, j)] += 1.0;
                b[j] += v;
            }
        }
        for j in 1..n {
            a[(j, j)] += lambda;
            a[(j - 1, j - 1)] += lambda;
            a[(j, j - 1)] -= lambda;
            a[(j - 1, j)] -= lambda;
        }
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn whittaker_examples() {
        let s = [Some(0.3), Some(0.1), Some(0.7)];
        assert_eq!(whittaker_smooth(&s, 0.0).unwrap(), vec![0.3, 0.1, 0.7]);

        let s = [Some(0.0), Some(1.0), Some(0.0), Some(1.0)];
        for z in whittaker_smooth(&s, 1e8).unwrap() {
            assert!((z - 0.5).abs() < 1e-4);
        }

        let s = [Some(1.0), None, Some(3.0)];
        let z = whittaker_smooth(&s, 1.0).unwrap();
        let oracle = dense_whittaker(&s, 1.0);
        for (a, b) in z.iter().zip(&oracle) {
            assert!(((a - b) / b).abs() < 1e-12);
        }
    }

    #[test]
    fn whittaker_errors() {
        assert!(whittaker_smooth(&[Some(1.0), None, None], 10.0).is_err());
        assert!(whittaker_smooth(&[Some(1.0), None, Some(2.0)], 0.0).is_err());
        assert!(whittaker_smooth(&[Some(1.0), Some(2.0)], -1.0).is_err());
    }

    #[test]
    fn whittaker_padding_leaves_interior_unchanged() {
        let core = [Some(0.2), None, Some(0.5), Some(0.4), None, Some(0.9)];
        let z = whittaker_smooth(&core, 3.0).unwrap();
        let mut padded = vec![None, None];
        padded.extend_from_slice(&core);
        padded.extend([None, None, None]);
        let zp = whittaker_smooth(&padded, 3.0).unwrap();
        for (a, b) in z.iter().zip(&zp[2..]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((zp[0] - z[0]).abs() < 1e-12);
        assert!((zp[zp.len() - 1] - z[z.len() - 1]).abs() < 1e-12);
    }

    fn sample_sd(z: &[f64]) -> (f64, f64) {
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (mean, sd)
    }

    #[test]
    fn standardize_examples() {
        let rows: Vec<FeatureRow> = (1..=3)
            .map(|d| FeatureRow {
                season: 2020,
                day: d,
                calendar: d as f64,
                thermal: Some(5.0),
                ndvi: None,
                greenup: None,
            })
            .collect();
        let frame = FeatureFrame::new(rows).unwrap();
        let (out, params) = standardize(&frame, SettingSpec::Calendar).unwrap();
        assert_eq!(params.means, vec![2.0]);
        assert_eq!(params.sds, vec![1.0]);
        let z: Vec<f64> = out.scaled().iter().map(|r| r[0]).collect();
        assert_eq!(z, vec![-1.0, 0.0, 1.0]);

        let err = standardize(&frame, SettingSpec::Thermal).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance(ref c) if c == "Thermal"));
    }

    #[test]
    fn stored_params_reproduce_unit_scale() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.37).sin() * 4.0 + 11.0]).collect();
        let p = StandardizationParams::fit(&[Covariate::Thermal], &rows).unwrap();
        let z: Vec<f64> = rows.iter().map(|r| p.apply(r)[0]).collect();
        let (mean, sd) = sample_sd(&z);
        assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        for r in &rows {
            let back = p.unapply(&p.apply(r));
            assert!(((back[0] - r[0]) / r[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_csv_round_trip() {
        let rows = vec![
            FeatureRow { season: 2020, day: 1, calendar: 1.0, thermal: Some(0.25), ndvi: None, greenup: None },
            FeatureRow { season: 2020, day: 2, calendar: 2.0, thermal: Some(0.75), ndvi: Some(0.3), greenup: Some(0.3) },
        ];
        let frame = FeatureFrame::new(rows).unwrap();
        let (frame, _) = standardize(&frame, SettingSpec::Thermal).unwrap();
        let mut buf = Vec::new();
        write_features(&frame, &mut buf).unwrap();
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back.rows(), frame.rows());
    }
}
