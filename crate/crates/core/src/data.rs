//! Station CSV ingestion, alignment, chronological splits, min-max scaling
//! and windowing into `[S, D, N, W]` model inputs.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, NaiveDateTime, Timelike, Utc};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Column order of the station CSVs and of the feature axis.
pub const FEATURES: [&str; 4] = ["temperature", "pressure", "wind_speed", "wind_direction"];
pub const NUM_FEATURES: usize = FEATURES.len();
pub const WIND_SPEED: usize = 2;
pub const WIND_DIRECTION: usize = 3;

pub const CSV_HEADER: &str = "timestamp,temperature,pressure,wind_speed,wind_direction";
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{station}: line {line}: {msg}")]
    Parse { station: String, line: u64, msg: String },
    #[error("{station}: {missing} missing hour(s) starting at {at} exceed max_gap_hours={max_gap}")]
    Gap {
        station: String,
        at: String,
        missing: i64,
        max_gap: usize,
    },
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("split: {0}")]
    Split(String),
    #[error("windowing: {0}")]
    Window(String),
}

pub fn format_time(t: DateTime<Utc>) -> String {
    t.format(TIME_FORMAT).to_string()
}

pub fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    let t = NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))?
        .and_utc();
    if t.minute() != 0 || t.second() != 0 {
        return Err(format!("timestamp `{s}` is not on the hour"));
    }
    Ok(t)
}

/// One station's gap-free hourly record.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub name: String,
    pub start: DateTime<Utc>,
    /// One row per hour from `start`, columns in [`FEATURES`] order.
    pub rows: Vec<[f64; NUM_FEATURES]>,
}

impl StationSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::hours(i as i64)
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.rows.len())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format_time(self.timestamp(i)));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Parses one station file. Rows may come in any order; missing hours are
/// linearly interpolated when at most `max_gap_hours` are missing in a row.
pub fn parse_station_csv(reader: impl Read, station: &str, max_gap_hours: usize) -> Result<StationSeries, DataError> {
    let parse_err = |line: u64, msg: String| DataError::Parse {
        station: station.to_owned(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(parse_err(1, format!("header must be `{CSV_HEADER}`")));
    }
    let mut rows: Vec<(DateTime<Utc>, [f64; NUM_FEATURES], u64)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let t = parse_time(&record[0]).map_err(|m| parse_err(line, m))?;
        let mut values = [0.0; NUM_FEATURES];
        for (d, v) in values.iter_mut().enumerate() {
            let field = &record[d + 1];
            *v = field
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("{}: `{field}` is not a finite number", FEATURES[d])))?;
        }
        let dir = values[WIND_DIRECTION];
        if !(0.0..360.0).contains(&dir) {
            return Err(parse_err(line, format!("wind_direction {dir} outside [0, 360)")));
        }
        rows.push((t, values, line));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    rows.sort_by_key(|r| r.0);

    let start = rows[0].0;
    let mut out = vec![rows[0].1];
    for pair in rows.windows(2) {
        let (t0, a, _) = pair[0];
        let (t1, b, line) = pair[1];
        let step = (t1 - t0).num_hours();
        if step == 0 {
            return Err(parse_err(line, format!("duplicate timestamp {}", format_time(t1))));
        }
        let missing = step - 1;
        if missing > max_gap_hours as i64 {
            return Err(DataError::Gap {
                station: station.to_owned(),
                at: format_time(t0 + Duration::hours(1)),
                missing,
                max_gap: max_gap_hours,
            });
        }
        for k in 1..step {
            let f = k as f64 / step as f64;
            out.push(std::array::from_fn(|d| a[d] + (b[d] - a[d]) * f));
        }
        out.push(b);
    }
    Ok(StationSeries {
        name: station.to_owned(),
        start,
        rows: out,
    })
}

/// Loads a station file; the station name is the file stem.
pub fn load_station_csv(path: &Path, max_gap_hours: usize) -> Result<StationSeries, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    parse_station_csv(std::io::BufReader::new(file), &name, max_gap_hours)
}

/// Aligned multi-station series, stored `[L, D, N]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub start: DateTime<Utc>,
    pub node_order: Vec<String>,
    len: usize,
    values: Vec<f64>,
}

impl RawSeries {
    pub fn new(start: DateTime<Utc>, node_order: Vec<String>, values: Vec<f64>) -> Result<Self, DataError> {
        let n = node_order.len();
        if n == 0 || !values.len().is_multiple_of(NUM_FEATURES * n) {
            return Err(DataError::Alignment(format!(
                "{} values do not form [L, {NUM_FEATURES}, {n}]",
                values.len()
            )));
        }
        Ok(Self {
            start,
            len: values.len() / (NUM_FEATURES * n),
            node_order,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.node_order.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.len, NUM_FEATURES, self.num_nodes()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, d: usize, n: usize) -> f64 {
        self.values[(t * NUM_FEATURES + d) * self.num_nodes() + n]
    }

    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.start + Duration::hours(t as i64)
    }

    /// Hours `[from, to)` as a new series.
    pub fn slice(&self, from: usize, to: usize) -> RawSeries {
        let row = NUM_FEATURES * self.num_nodes();
        RawSeries {
            start: self.timestamp(from),
            node_order: self.node_order.clone(),
            len: to - from,
            values: self.values[from * row..to * row].to_vec(),
        }
    }

    /// Splits back into per-station series.
    pub fn stations(&self) -> Vec<StationSeries> {
        (0..self.num_nodes())
            .map(|n| StationSeries {
                name: self.node_order[n].clone(),
                start: self.start,
                rows: (0..self.len).map(|t| std::array::from_fn(|d| self.get(t, d, n))).collect(),
            })
            .collect()
    }
}

/// Aligns stations on the intersection of their time ranges, in `node_order`.
pub fn assemble(series: &[StationSeries], node_order: &[String]) -> Result<RawSeries, DataError> {
    if node_order.is_empty() {
        return Err(DataError::Alignment("node_order is empty".into()));
    }
    let by_name: HashMap<&str, &StationSeries> = series.iter().map(|s| (s.name.as_str(), s)).collect();
    let ordered = node_order
        .iter()
        .map(|name| {
            by_name
                .get(name.as_str())
                .copied()
                .ok_or_else(|| DataError::Alignment(format!("no series for station `{name}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let start = ordered.iter().map(|s| s.start).max().expect("non-empty");
    let end = ordered.iter().map(|s| s.end()).min().expect("non-empty");
    if end <= start {
        return Err(DataError::Alignment("station time ranges do not overlap".into()));
    }
    let len = (end - start).num_hours() as usize;
    let n = ordered.len();
    let mut values = vec![0.0; len * NUM_FEATURES * n];
    for (j, s) in ordered.iter().enumerate() {
        let offset = (start - s.start).num_hours() as usize;
        for t in 0..len {
            for d in 0..NUM_FEATURES {
                values[(t * NUM_FEATURES + d) * n + j] = s.rows[offset + t][d];
            }
        }
    }
    RawSeries::new(start, node_order.to_vec(), values)
}

/// One chronological split. `series` may begin with up to `context` hours
/// borrowed from the preceding split; those hours feed input windows only.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPart {
    pub series: RawSeries,
    pub context: usize,
}

impl SplitPart {
    /// Hours owned by this split, lead-in excluded.
    pub fn owned_len(&self) -> usize {
        self.series.len() - self.context
    }

    pub fn owned(&self) -> RawSeries {
        self.series.slice(self.context, self.series.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SplitPart,
    pub val: Option<SplitPart>,
    pub test: SplitPart,
}

fn part(raw: &RawSeries, from: usize, to: usize, context: usize) -> SplitPart {
    let lead = context.min(from);
    SplitPart {
        series: raw.slice(from - lead, to),
        context: lead,
    }
}

fn year_range(raw: &RawSeries, years: &[i32], role: &str) -> Result<Option<(usize, usize)>, DataError> {
    if years.is_empty() {
        return Ok(None);
    }
    let mut sorted = years.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(DataError::Split(format!("{role} years {years:?} are not consecutive")));
    }
    let first = sorted[0];
    let last = *sorted.last().expect("non-empty");
    let from = (0..raw.len()).find(|&t| raw.timestamp(t).year() >= first);
    let to = (0..raw.len()).rev().find(|&t| raw.timestamp(t).year() <= last);
    match (from, to) {
        (Some(a), Some(b)) if a <= b => {
            for y in &sorted {
                if raw.timestamp(a).year() > *y || raw.timestamp(b).year() < *y {
                    return Err(DataError::Split(format!("{role} year {y} is not in the data")));
                }
            }
            Ok(Some((a, b + 1)))
        }
        _ => Err(DataError::Split(format!("{role} years {years:?} are not in the data"))),
    }
}

/// Chronological split by calendar year. Validation and test parts get up to
/// `context` hours of lead-in from the preceding data.
pub fn split_by_years(
    raw: &RawSeries,
    train_years: &[i32],
    val_years: &[i32],
    test_years: &[i32],
    context: usize,
) -> Result<Splits, DataError> {
    let mut seen = HashMap::new();
    for (role, years) in [("train", train_years), ("val", val_years), ("test", test_years)] {
        for y in years {
            if let Some(other) = seen.insert(*y, role) {
                return Err(DataError::Split(format!("year {y} requested for both {other} and {role}")));
            }
        }
    }
    let train = year_range(raw, train_years, "train")?.ok_or_else(|| DataError::Split("no train years".into()))?;
    let val = year_range(raw, val_years, "val")?;
    let test = year_range(raw, test_years, "test")?.ok_or_else(|| DataError::Split("no test years".into()))?;
    if val.is_none() {
        log::warn!("no validation years; scheduler will track training loss");
    }
    Ok(Splits {
        train: part(raw, train.0, train.1, 0),
        val: val.map(|(a, b)| part(raw, a, b, context)),
        test: part(raw, test.0, test.1, context),
    })
}

/// Chronological split by fraction of hours: train first, then validation,
/// then test with the remainder.
pub fn split_by_fraction(raw: &RawSeries, train: f64, val: f64, context: usize) -> Result<Splits, DataError> {
    if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
        return Err(DataError::Split(format!(
            "fractions train={train} val={val} must be positive and sum below 1"
        )));
    }
    let l = raw.len();
    let a = (l as f64 * train).round() as usize;
    let b = (l as f64 * (train + val)).round() as usize;
    if a == 0 || b >= l {
        return Err(DataError::Split(format!("{l} hours are too few for the requested fractions")));
    }
    if a == b {
        log::warn!("validation split is empty; scheduler will track training loss");
    }
    Ok(Splits {
        train: part(raw, 0, a, 0),
        val: (b > a).then(|| part(raw, a, b, context)),
        test: part(raw, b, l, context),
    })
}

/// Per-(feature, node) min-max scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub num_nodes: usize,
    /// `[D, N]` row-major.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(train: &RawSeries) -> Self {
        let n = train.num_nodes();
        let mut min = vec![f64::INFINITY; NUM_FEATURES * n];
        let mut max = vec![f64::NEG_INFINITY; NUM_FEATURES * n];
        for row in train.values().chunks(NUM_FEATURES * n) {
            for (i, &v) in row.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Self { num_nodes: n, min, max }
    }

    #[inline]
    pub fn normalize(&self, v: f64, d: usize, n: usize) -> f64 {
        let i = d * self.num_nodes + n;
        let range = self.max[i] - self.min[i];
        if range == 0.0 {
            0.5
        } else {
            (v - self.min[i]) / range
        }
    }

    #[inline]
    pub fn invert(&self, v: f64, d: usize, n: usize) -> f64 {
        let i = d * self.num_nodes + n;
        self.min[i] + v * (self.max[i] - self.min[i])
    }

    pub fn invert_wind_speed(&self, values: &[f64], node: usize) -> Vec<f64> {
        values.iter().map(|&v| self.invert(v, WIND_SPEED, node)).collect()
    }

    pub fn apply(&self, raw: &RawSeries) -> Result<RawSeries, DataError> {
        let n = raw.num_nodes();
        if n != self.num_nodes {
            return Err(DataError::Window(format!("scaler fitted on {} nodes, data has {n}", self.num_nodes)));
        }
        let values = raw
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let col = i % (NUM_FEATURES * n);
                self.normalize(v, col / n, col % n)
            })
            .collect();
        RawSeries::new(raw.start, raw.node_order.clone(), values)
    }
}

/// Sliding-window samples over one split. Inputs are cut from the normalized
/// series on demand; targets are the physical wind speed at hour
/// `s + W - 1 + T` of the split's series.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    normalized: RawSeries,
    physical_wind: Vec<f64>,
    scaler: MinMaxScaler,
    pub window: usize,
    pub horizon: usize,
    pub target_nodes: Vec<usize>,
    first: usize,
    count: usize,
}

/// `S = L - W - T + 1`, or zero when the series is too short.
pub fn window_count(len: usize, window: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(window + horizon)
}

pub fn make_windows(
    split: &SplitPart,
    scaler: &MinMaxScaler,
    window: usize,
    horizon: usize,
    target_nodes: &[usize],
) -> Result<WindowedDataset, DataError> {
    let raw = &split.series;
    if window == 0 {
        return Err(DataError::Window("window must be at least 1".into()));
    }
    if let Some(&bad) = target_nodes.iter().find(|&&t| t >= raw.num_nodes()) {
        return Err(DataError::Window(format!("target node {bad} out of range")));
    }
    let total = window_count(raw.len(), window, horizon);
    // the first target must land on an owned hour
    let first = (split.context + 1).saturating_sub(window + horizon);
    let count = total.saturating_sub(first);
    if count == 0 {
        return Err(DataError::Window(format!(
            "{} hours cannot hold a window of {window} plus horizon {horizon}",
            raw.len()
        )));
    }
    let n = raw.num_nodes();
    let physical_wind = (0..raw.len())
        .flat_map(|t| (0..n).map(move |j| raw.get(t, WIND_SPEED, j)))
        .collect();
    Ok(WindowedDataset {
        normalized: scaler.apply(raw)?,
        physical_wind,
        scaler: scaler.clone(),
        window,
        horizon,
        target_nodes: target_nodes.to_vec(),
        first,
        count,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.normalized.num_nodes()
    }

    pub fn node_order(&self) -> &[String] {
        &self.normalized.node_order
    }

    pub fn scaler(&self) -> &MinMaxScaler {
        &self.scaler
    }

    fn start_hour(&self, s: usize) -> usize {
        self.first + s
    }

    fn target_hour(&self, s: usize) -> usize {
        self.start_hour(s) + self.window - 1 + self.horizon
    }

    pub fn target_time(&self, s: usize) -> DateTime<Utc> {
        self.normalized.timestamp(self.target_hour(s))
    }

    /// Timestamp of the last hour in sample `s`'s input window.
    pub fn last_input_time(&self, s: usize) -> DateTime<Utc> {
        self.normalized.timestamp(self.start_hour(s) + self.window - 1)
    }

    /// Writes sample `s` as `[D, N, W]` into `out`.
    pub fn write_input(&self, s: usize, out: &mut [f64]) {
        let (n, w) = (self.num_nodes(), self.window);
        let t0 = self.start_hour(s);
        for d in 0..NUM_FEATURES {
            for j in 0..n {
                let dst = &mut out[(d * n + j) * w..(d * n + j + 1) * w];
                for (k, v) in dst.iter_mut().enumerate() {
                    *v = self.normalized.get(t0 + k, d, j);
                }
            }
        }
    }

    /// Physical wind speed at the target nodes, m/s.
    pub fn targets(&self, s: usize) -> Vec<f64> {
        let t = self.target_hour(s);
        self.target_nodes
            .iter()
            .map(|&j| self.physical_wind[t * self.num_nodes() + j])
            .collect()
    }

    /// Targets in the scaler's normalized units, what the network is trained on.
    pub fn normalized_targets(&self, s: usize) -> Vec<f64> {
        let t = self.target_hour(s);
        self.target_nodes
            .iter()
            .map(|&j| self.normalized.get(t, WIND_SPEED, j))
            .collect()
    }

    /// Last observed wind speed in the input window, m/s.
    pub fn last_observed(&self, s: usize) -> Vec<f64> {
        let t = self.start_hour(s) + self.window - 1;
        self.target_nodes
            .iter()
            .map(|&j| self.physical_wind[t * self.num_nodes() + j])
            .collect()
    }

    /// `(inputs [B, D, N, W], normalized targets [B, N_target])`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let sample = NUM_FEATURES * self.num_nodes() * self.window;
        let mut x = vec![0.0; indices.len() * sample];
        let mut y = Vec::with_capacity(indices.len() * self.target_nodes.len());
        for (b, &s) in indices.iter().enumerate() {
            self.write_input(s, &mut x[b * sample..(b + 1) * sample]);
            y.extend(self.normalized_targets(s));
        }
        let b = indices.len();
        (
            Tensor::new(vec![b, NUM_FEATURES, self.num_nodes(), self.window], x).expect("batch shape"),
            Tensor::new(vec![b, self.target_nodes.len()], y).expect("target shape"),
        )
    }

    /// Every sample at once: `(inputs [S, D, N, W], physical targets [S, N_target])`.
    pub fn materialize(&self) -> (Tensor, Tensor) {
        let all: Vec<usize> = (0..self.count).collect();
        let (x, _) = self.batch(&all);
        let y = all.iter().flat_map(|&s| self.targets(s)).collect();
        (x, Tensor::new(vec![self.count, self.target_nodes.len()], y).expect("target shape"))
    }
}

/// Sample indices grouped into batches; the last batch may be partial.
/// With `shuffle`, the order is a permutation drawn from `rng`.
pub fn batch_indices(len: usize, batch_size: usize, shuffle: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Yields `(inputs, normalized targets)` batches.
pub fn batch_iter<'a>(
    data: &'a WindowedDataset,
    batch_size: usize,
    shuffle: Option<&mut ChaCha8Rng>,
) -> impl Iterator<Item = (Tensor, Tensor)> + 'a {
    batch_indices(data.len(), batch_size, shuffle)
        .into_iter()
        .map(move |idx| data.batch(&idx))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn csv(rows: &[&str]) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    fn ramp_series(name: &str, start: &str, len: usize, f: impl Fn(usize) -> f64) -> StationSeries {
        StationSeries {
            name: name.into(),
            start: parse_time(start).unwrap(),
            rows: (0..len).map(|t| [f(t), 1000.0 + f(t), f(t), 90.0]).collect(),
        }
    }

    #[test]
    fn parses_well_formed_file() {
        let text = csv(&[
            "2010-01-01T00:00:00Z,1.5,1012,4.0,180",
            "2010-01-01T01:00:00Z,1.0,1013,5.0,190",
            "2010-01-01T02:00:00Z,0.5,1014,6.0,359.9",
        ]);
        let s = parse_station_csv(text.as_bytes(), "odense", 3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.rows[1], [1.0, 1013.0, 5.0, 190.0]);
        assert_eq!(format_time(s.timestamp(2)), "2010-01-01T02:00:00Z");
    }

    #[test]
    fn gap_rejected_or_interpolated() {
        let text = csv(&["2010-01-01T00:00:00Z,0,1000,3,0", "2010-01-01T03:00:00Z,3,1003,6,30"]);
        match parse_station_csv(text.as_bytes(), "a", 0) {
            Err(DataError::Gap { at, missing, .. }) => {
                assert_eq!(at, "2010-01-01T01:00:00Z");
                assert_eq!(missing, 2);
            }
            other => panic!("expected gap error, got {other:?}"),
        }
        let s = parse_station_csv(text.as_bytes(), "a", 3).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.rows[1], [1.0, 1001.0, 4.0, 10.0]);
        assert_eq!(s.rows[2], [2.0, 1002.0, 5.0, 20.0]);
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let cases = [
            (csv(&["2010-01-01T00:00:00Z,0,1000,3,0", "2010-01-01T01:00:00Z,x,1000,3,0"]), 3),
            (csv(&["2010-01-01T00:00:00Z,0,1000,3,360"]), 2),
            (csv(&["2010-01-01T00:30:00Z,0,1000,3,10"]), 2),
            (csv(&["2010-01-01T00:00:00Z,0,1000,3,10", "2010-01-01T00:00:00Z,0,1000,3,10"]), 3),
        ];
        for (text, want) in cases {
            match parse_station_csv(text.as_bytes(), "a", 3) {
                Err(DataError::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
        let wrong_header = "time,temperature,pressure,wind_speed,wind_direction\n";
        assert!(matches!(
            parse_station_csv(wrong_header.as_bytes(), "a", 3),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unsorted_rows_are_sorted() {
        let text = csv(&["2010-01-01T01:00:00Z,1,1000,3,0", "2010-01-01T00:00:00Z,0,1000,3,0"]);
        let s = parse_station_csv(text.as_bytes(), "a", 0).unwrap();
        assert_eq!(format_time(s.start), "2010-01-01T00:00:00Z");
        assert_eq!(s.rows[0][0], 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let s = ramp_series("a", "2011-03-01T05:00:00Z", 7, |t| t as f64 * 0.1 + 1.0 / 3.0);
        let back = parse_station_csv(s.to_csv().as_bytes(), "a", 0).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn assemble_intersects_ranges() {
        let a = ramp_series("a", "2010-01-01T00:00:00Z", 10, |t| t as f64);
        let b = ramp_series("b", "2010-01-01T05:00:00Z", 10, |t| 100.0 + t as f64);
        let names = vec!["b".to_string(), "a".to_string()];
        let raw = assemble(&[a.clone(), b], &names).unwrap();
        assert_eq!(raw.shape(), [5, 4, 2]);
        assert_eq!(raw.get(0, WIND_SPEED, 1), 5.0);
        assert_eq!(raw.get(0, WIND_SPEED, 0), 100.0);
        let same = assemble(std::slice::from_ref(&a), &["a".to_string()]).unwrap();
        assert_eq!(same.len(), 10);
        let far = ramp_series("c", "2011-01-01T00:00:00Z", 3, |t| t as f64);
        assert!(matches!(
            assemble(&[a, far], &["a".into(), "c".into()]),
            Err(DataError::Alignment(_))
        ));
    }

    fn hourly(start: &str, len: usize) -> RawSeries {
        let s = ramp_series("a", start, len, |t| t as f64);
        assemble(&[s], &["a".to_string()]).unwrap()
    }

    #[test]
    fn year_splits_follow_the_calendar() {
        let raw = hourly("2000-01-01T00:00:00Z", 24 * (366 + 365 + 365));
        let s = split_by_years(&raw, &[2000], &[2001], &[2002], 10).unwrap();
        assert_eq!(s.train.owned_len(), 24 * 366);
        assert_eq!(s.val.as_ref().unwrap().owned_len(), 24 * 365);
        assert_eq!(s.test.owned_len(), 24 * 365);
        assert_eq!(s.test.context, 10);
        assert_eq!(format_time(s.test.owned().start), "2002-01-01T00:00:00Z");

        assert!(split_by_years(&raw, &[2000], &[2000], &[2000], 0).is_err());
        assert!(split_by_years(&raw, &[2000], &[], &[2003], 0).is_err());
        assert!(split_by_years(&raw, &[2000, 2002], &[], &[2001], 0).is_err());
        let no_val = split_by_years(&raw, &[2000, 2001], &[], &[2002], 0).unwrap();
        assert!(no_val.val.is_none());
    }

    #[test]
    fn fraction_split_partitions_hours() {
        let raw = hourly("2000-01-01T00:00:00Z", 1000);
        let s = split_by_fraction(&raw, 0.7, 0.15, 20).unwrap();
        let owned = s.train.owned_len() + s.val.as_ref().unwrap().owned_len() + s.test.owned_len();
        assert_eq!(owned, 1000);
        assert_eq!(s.train.owned_len(), 700);
        assert!(split_by_fraction(&raw, 0.9, 0.2, 0).is_err());
    }

    #[test]
    fn scaler_examples() {
        let s = StationSeries {
            name: "a".into(),
            start: parse_time("2000-01-01T00:00:00Z").unwrap(),
            rows: vec![[0.0, 7.0, 0.0, 0.0], [5.0, 7.0, 2.5, 0.0], [10.0, 7.0, 9.75, 0.0]],
        };
        let raw = assemble(&[s], &["a".to_string()]).unwrap();
        let scaler = MinMaxScaler::fit(&raw);
        let norm = scaler.apply(&raw).unwrap();
        let temps: Vec<f64> = (0..3).map(|t| norm.get(t, 0, 0)).collect();
        assert_eq!(temps, [0.0, 0.5, 1.0]);
        assert!((0..3).all(|t| norm.get(t, 1, 0) == 0.5));
        let speeds: Vec<f64> = (0..3).map(|t| norm.get(t, WIND_SPEED, 0)).collect();
        let back = scaler.invert_wind_speed(&speeds, 0);
        for (t, v) in back.iter().enumerate() {
            assert!((v - raw.get(t, WIND_SPEED, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(100, 48, 6), 47);
        assert_eq!(window_count(2, 1, 1), 1);
        assert_eq!(window_count(10, 8, 3), 0);
        let raw = hourly("2000-01-01T00:00:00Z", 100);
        let scaler = MinMaxScaler::fit(&raw);
        let part = SplitPart { series: raw, context: 0 };
        let data = make_windows(&part, &scaler, 48, 6, &[0]).unwrap();
        assert_eq!(data.len(), 47);
        let (x, y) = data.materialize();
        assert_eq!(x.shape(), &[47, 4, 1, 48]);
        assert_eq!(y.shape(), &[47, 1]);
        // the ramp makes the target value equal its hour index
        assert_eq!(data.targets(0), vec![53.0]);
        assert_eq!(data.last_observed(0), vec![47.0]);
        assert!(make_windows(&part, &scaler, 60, 41, &[0]).is_err());
        assert!(make_windows(&part, &scaler, 48, 6, &[1]).is_err());
    }

    #[test]
    fn lead_in_never_hosts_targets() {
        let raw = hourly("2000-01-01T00:00:00Z", 300);
        let s = split_by_fraction(&raw, 0.5, 0.2, 48 + 6 - 1).unwrap();
        let scaler = MinMaxScaler::fit(&s.train.series);
        let test = make_windows(&s.test, &scaler, 48, 6, &[0]).unwrap();
        assert_eq!(test.len(), s.test.owned_len());
        assert_eq!(test.target_time(0), s.test.owned().start);
        let val = s.val.unwrap();
        let val = make_windows(&val, &scaler, 48, 6, &[0]).unwrap();
        assert_eq!(val.len(), 60);
    }

    #[test]
    fn batches_cover_all_samples() {
        let sizes = |len, b| batch_indices(len, b, None).iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(47, 64), vec![47]);
        assert_eq!(sizes(130, 64), vec![64, 64, 2]);
        let shuffled = |seed| batch_indices(130, 64, Some(&mut ChaCha8Rng::seed_from_u64(seed)));
        assert_eq!(shuffled(5), shuffled(5));
        assert_ne!(shuffled(5), shuffled(6));
        let mut all: Vec<usize> = shuffled(5).concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }
}
