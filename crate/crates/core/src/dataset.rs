//! Observational data model and CSV ingestion.
//!
//! Progress files hold weekly cumulative stage percentages, one column per
//! stage label. Weather files hold daily minimum/maximum temperature and
//! reflectance files daily red/NIR surface reflectance with empty cells for
//! cloud gaps. All loaders validate and sort by (season, day).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{parse_cell, Covariate, FeatureFrame, StandardizationParams};
use crate::{Error, Result};

/// Largest within-season decrease of a stage proportion that is clamped
/// rather than rejected.
pub const DIP_TOLERANCE: f64 = 0.005;

/// Ordered phenological stages of a crop. Category 1 (pre-season) is
/// implicit; `stages` holds the labels of categories 2..=K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageScheme {
    crop: String,
    stages: Vec<String>,
}

impl StageScheme {
    pub fn new(crop: impl Into<String>, stages: Vec<String>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Invalid("a stage scheme needs at least one stage".into()));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.trim().is_empty() {
                return Err(Error::Invalid("empty stage label".into()));
            }
            if stages[..i].contains(s) {
                return Err(Error::Invalid(format!("duplicate stage label `{s}`")));
            }
            if s == "season" || s == "day" {
                return Err(Error::Invalid(format!("stage label `{s}` clashes with a key column")));
            }
        }
        Ok(Self {
            crop: crop.into(),
            stages,
        })
    }

    pub fn from_labels(crop: &str, labels: &[&str]) -> Result<Self> {
        Self::new(crop, labels.iter().map(|s| s.to_string()).collect())
    }

    pub fn crop(&self) -> &str {
        &self.crop
    }

    pub fn stages(&self) -> &[String] {
        &self.stages
    }

    /// Number of categories including the implicit first one.
    pub fn k(&self) -> usize {
        self.stages.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub season: i32,
    pub day: u32,
    /// Cumulative proportions for categories 1..=K; `y[0] == 1`.
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressPanel {
    scheme: StageScheme,
    records: Vec<ProgressRecord>,
}

impl ProgressPanel {
    /// Validates and sorts records. Stage series must already be
    /// non-decreasing within each season.
    pub fn new(scheme: StageScheme, mut records: Vec<ProgressRecord>) -> Result<Self> {
        let k = scheme.k();
        for r in &records {
            if r.y.len() != k {
                return Err(Error::Invalid(format!(
                    "record ({}, {}) has {} categories, scheme has {k}",
                    r.season,
                    r.day,
                    r.y.len()
                )));
            }
            if r.y[0] != 1.0 {
                return Err(Error::Invalid(format!(
                    "record ({}, {}): first category must be 1",
                    r.season, r.day
                )));
            }
            if let Some(v) = r.y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Invalid(format!(
                    "record ({}, {}): proportion {v} outside [0, 1]",
                    r.season, r.day
                )));
            }
        }
        records.sort_by_key(|r| (r.season, r.day));
        for w in records.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if (a.season, a.day) == (b.season, b.day) {
                return Err(Error::Invalid(format!(
                    "duplicate record for season {}, day {}",
                    a.season, a.day
                )));
            }
            if a.season == b.season {
                if let Some(s) = (1..k).find(|&s| b.y[s] < a.y[s]) {
                    return Err(Error::Invalid(format!(
                        "stage `{}` decreases in season {} between days {} and {}",
                        scheme.stages[s - 1], a.season, a.day, b.day
                    )));
                }
            }
        }
        Ok(Self { scheme, records })
    }

    pub fn scheme(&self) -> &StageScheme {
        &self.scheme
    }

    pub fn records(&self) -> &[ProgressRecord] {
        &self.records
    }

    pub fn seasons(&self) -> Vec<i32> {
        let mut s: Vec<i32> = self.records.iter().map(|r| r.season).collect();
        s.dedup();
        s
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Reads progress percentages. See the module docs for the schema.
pub fn read_progress<R: Read>(reader: R, scheme: &StageScheme) -> Result<ProgressPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let season_ix = col("season")?;
    let day_ix = col("day")?;
    let stage_ix = scheme
        .stages
        .iter()
        .map(|s| col(s))
        .collect::<Result<Vec<_>>>()?;

    // (season, day, y, source row)
    let mut raw: Vec<(i32, u32, Vec<f64>, usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let season: i32 = parse_cell(&rec, season_ix, row, "season")?;
        let day: u32 = parse_cell(&rec, day_ix, row, "day")?;
        if !(1..=366).contains(&day) {
            return Err(Error::row(row, "day", format!("day-of-year {day} outside 1..=366")));
        }
        let mut y = Vec::with_capacity(scheme.k());
        y.push(1.0);
        for (s, &ix) in stage_ix.iter().enumerate() {
            let label = &scheme.stages[s];
            let pct: f64 = parse_cell(&rec, ix, row, label)?;
            if !(0.0..=100.0).contains(&pct) {
                return Err(Error::row(row, label.as_str(), format!("percentage {pct} outside [0, 100]")));
            }
            y.push(pct / 100.0);
        }
        raw.push((season, day, y, row));
    }
    raw.sort_by_key(|r| (r.0, r.1));
    for w in raw.windows(2) {
        if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
            return Err(Error::row(
                w[1].3,
                "day",
                format!(
                    "duplicate (season {}, day {}) also at row {}",
                    w[1].0, w[1].1, w[0].3
                ),
            ));
        }
    }

    // clamp small within-season dips to the running maximum
    let mut records = Vec::with_capacity(raw.len());
    let mut running: Vec<f64> = Vec::new();
    let mut current = None;
    for (season, day, mut y, row) in raw {
        if current != Some(season) {
            current = Some(season);
            running = vec![0.0; y.len()];
        }
        for s in 1..y.len() {
            let dip = running[s] - y[s];
            if dip > DIP_TOLERANCE + 1e-12 {
                return Err(Error::row(
                    row,
                    scheme.stages[s - 1].as_str(),
                    format!(
                        "value {:.4}% drops below the season's running maximum {:.4}% by more than {}%",
                        y[s] * 100.0,
                        running[s] * 100.0,
                        DIP_TOLERANCE * 100.0
                    ),
                ));
            }
            if dip > 0.0 {
                y[s] = running[s];
            }
            running[s] = y[s];
        }
        records.push(ProgressRecord { season, day, y });
    }
    ProgressPanel::new(scheme.clone(), records)
}

pub fn load_progress(path: impl AsRef<Path>, scheme: &StageScheme) -> Result<ProgressPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_progress(file, scheme)
}

/// Percentages with at most six decimals, trailing zeros trimmed. Reloading
/// the output reproduces the panel bit for bit.
pub fn format_percent(y: f64) -> String {
    let s = format!("{:.6}", y * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

pub fn write_progress<W: Write>(panel: &ProgressPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["season".to_string(), "day".to_string()];
    header.extend(panel.scheme.stages.iter().cloned());
    w.write_record(&header)?;
    for r in &panel.records {
        let mut rec = vec![r.season.to_string(), r.day.to_string()];
        rec.extend(r.y[1..].iter().map(|&v| format_percent(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<progress>", e))?;
    Ok(())
}

pub fn save_progress(panel: &ProgressPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_progress(panel, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub season: i32,
    pub day: u32,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeatherSeries {
    records: Vec<WeatherRecord>,
}

impl WeatherSeries {
    pub fn new(mut records: Vec<WeatherRecord>) -> Result<Self> {
        for r in &records {
            if !(r.t_min <= r.t_max) {
                return Err(Error::Invalid(format!(
                    "season {}, day {}: minimum temperature {} exceeds maximum {}",
                    r.season, r.day, r.t_min, r.t_max
                )));
            }
        }
        records.sort_by_key(|r| (r.season, r.day));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].season, w[0].day) == (w[1].season, w[1].day))
        {
            return Err(Error::Invalid(format!(
                "duplicate weather record for season {}, day {}",
                w[0].season, w[0].day
            )));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[WeatherRecord] {
        &self.records
    }

    /// Daily records of one season, in day order.
    pub fn season(&self, season: i32) -> impl Iterator<Item = &WeatherRecord> {
        self.records.iter().filter(move |r| r.season == season)
    }
}

pub fn read_weather<R: Read>(reader: R) -> Result<WeatherSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ix = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (si, di, lo, hi) = (ix("season")?, ix("day")?, ix("tmin")?, ix("tmax")?);
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let r = WeatherRecord {
            season: parse_cell(&rec, si, row, "season")?,
            day: parse_cell(&rec, di, row, "day")?,
            t_min: parse_cell(&rec, lo, row, "tmin")?,
            t_max: parse_cell(&rec, hi, row, "tmax")?,
        };
        if !(r.t_min.is_finite() && r.t_max.is_finite()) {
            return Err(Error::row(row, "tmin", "non-finite temperature"));
        }
        if r.t_min > r.t_max {
            return Err(Error::row(
                row,
                "tmin",
                format!("minimum temperature {} exceeds maximum {}", r.t_min, r.t_max),
            ));
        }
        records.push(r);
    }
    WeatherSeries::new(records)
}

pub fn load_weather(path: impl AsRef<Path>) -> Result<WeatherSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weather(file)
}

pub fn write_weather<W: Write>(series: &WeatherSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["season", "day", "tmin", "tmax"])?;
    for r in &series.records {
        w.write_record(&[
            r.season.to_string(),
            r.day.to_string(),
            r.t_min.to_string(),
            r.t_max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<weather>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceRecord {
    pub season: i32,
    pub day: u32,
    pub red: Option<f64>,
    pub nir: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReflectanceSeries {
    records: Vec<ReflectanceRecord>,
}

impl ReflectanceSeries {
    pub fn new(mut records: Vec<ReflectanceRecord>) -> Result<Self> {
        for r in &records {
            for v in [r.red, r.nir].into_iter().flatten() {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Invalid(format!(
                        "season {}, day {}: reflectance {v} outside (0, 1)",
                        r.season, r.day
                    )));
                }
            }
        }
        records.sort_by_key(|r| (r.season, r.day));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].season, w[0].day) == (w[1].season, w[1].day))
        {
            return Err(Error::Invalid(format!(
                "duplicate reflectance record for season {}, day {}",
                w[0].season, w[0].day
            )));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ReflectanceRecord] {
        &self.records
    }
}

pub fn read_reflectance<R: Read>(reader: R) -> Result<ReflectanceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ix = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (si, di, ri, ni) = (ix("season")?, ix("day")?, ix("red")?, ix("nir")?);
    let optional = |rec: &csv::StringRecord, i: usize, row: usize, name: &str| -> Result<Option<f64>> {
        let cell = rec.get(i).unwrap_or("");
        if cell.is_empty() {
            return Ok(None);
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::row(row, name, format!("cannot parse `{cell}`")))?;
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::row(row, name, format!("reflectance {v} outside (0, 1)")));
        }
        Ok(Some(v))
    };
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        records.push(ReflectanceRecord {
            season: parse_cell(&rec, si, row, "season")?,
            day: parse_cell(&rec, di, row, "day")?,
            red: optional(&rec, ri, row, "red")?,
            nir: optional(&rec, ni, row, "nir")?,
        });
    }
    ReflectanceSeries::new(records)
}

pub fn load_reflectance(path: impl AsRef<Path>) -> Result<ReflectanceSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_reflectance(file)
}

pub fn write_reflectance<W: Write>(series: &ReflectanceSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["season", "day", "red", "nir"])?;
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &series.records {
        w.write_record(&[r.season.to_string(), r.day.to_string(), cell(r.red), cell(r.nir)])?;
    }
    w.flush().map_err(|e| Error::io("<reflectance>", e))?;
    Ok(())
}

/// One observation of the modelling table: the progress vector with raw and
/// standardized covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelingRow {
    pub season: i32,
    pub day: u32,
    pub y: Vec<f64>,
    pub raw: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelingTable {
    pub scheme: StageScheme,
    pub covariates: Vec<Covariate>,
    pub standardization: StandardizationParams,
    pub rows: Vec<ModelingRow>,
}

impl ModelingTable {
    /// Builds a table directly from rows; standardized covariates are
    /// recomputed from `raw` with `standardization`.
    pub fn new(
        scheme: StageScheme,
        standardization: StandardizationParams,
        mut rows: Vec<ModelingRow>,
    ) -> Result<Self> {
        let k = scheme.k();
        let p = standardization.covariates.len();
        for r in &mut rows {
            if r.y.len() != k || r.raw.len() != p {
                return Err(Error::Invalid(format!(
                    "row ({}, {}) does not match the scheme/covariate dimensions",
                    r.season, r.day
                )));
            }
            r.x = standardization.apply(&r.raw);
        }
        rows.sort_by_key(|r| (r.season, r.day));
        Ok(Self {
            scheme,
            covariates: standardization.covariates.clone(),
            standardization,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seasons(&self) -> Vec<i32> {
        let mut s: Vec<i32> = self.rows.iter().map(|r| r.season).collect();
        s.dedup();
        s
    }

    /// Rows grouped by season, in season order.
    pub fn by_season(&self) -> Vec<(i32, &[ModelingRow])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].season != self.rows[start].season {
                out.push((self.rows[start].season, &self.rows[start..i]));
                start = i;
            }
        }
        out
    }

    pub fn subset(&self, seasons: &[i32]) -> ModelingTable {
        ModelingTable {
            scheme: self.scheme.clone(),
            covariates: self.covariates.clone(),
            standardization: self.standardization.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| seasons.contains(&r.season))
                .cloned()
                .collect(),
        }
    }

    pub fn with_standardization(&self, params: &StandardizationParams) -> ModelingTable {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.x = params.apply(&r.raw);
        }
        out.standardization = params.clone();
        out
    }

    /// Re-fits the standardization over this table's own rows.
    pub fn restandardized(&self) -> Result<ModelingTable> {
        if self.covariates.is_empty() {
            return Ok(self.clone());
        }
        let raw: Vec<Vec<f64>> = self.rows.iter().map(|r| r.raw.clone()).collect();
        let params = StandardizationParams::fit(&self.covariates, &raw)?;
        Ok(self.with_standardization(&params))
    }

    pub fn observed(&self) -> Vec<ProgressRecord> {
        self.rows
            .iter()
            .map(|r| ProgressRecord {
                season: r.season,
                day: r.day,
                y: r.y.clone(),
            })
            .collect()
    }
}

/// Aligns weekly progress with daily standardized features on exact
/// (season, day) keys.
pub fn join_panel(progress: &ProgressPanel, features: &FeatureFrame) -> Result<ModelingTable> {
    let params = features.standardization().cloned().ok_or_else(|| {
        Error::Invalid("feature frame has no standardized covariates; standardize it first".into())
    })?;
    let mut missing = Vec::new();
    let mut rows = Vec::with_capacity(progress.records.len());
    for r in &progress.records {
        match features.find(r.season, r.day) {
            Some(f) => {
                let raw = f.raw(&params.covariates)?;
                rows.push(ModelingRow {
                    season: r.season,
                    day: r.day,
                    y: r.y.clone(),
                    x: params.apply(&raw),
                    raw,
                });
            }
            None => missing.push((r.season, r.day)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    Ok(ModelingTable {
        scheme: progress.scheme.clone(),
        covariates: params.covariates.clone(),
        standardization: params,
        rows,
    })
}

/// Groups progress records by season.
pub fn records_by_season(records: &[ProgressRecord]) -> BTreeMap<i32, Vec<&ProgressRecord>> {
    let mut out: BTreeMap<i32, Vec<&ProgressRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.season).or_default().push(r);
    }
    out
}
