//! Series containers, CSV ingestion against dataset manifests, few-shot
//! subsampling and the synthetic confounder generator.
//!
//! # CSV rules
//!
//! * Data files: no header, comma separated, one row per timestamp, one
//!   column per feature, every cell parseable as `f64` (surrounding
//!   whitespace is ignored, empty cells are errors).
//! * Label files: no header, one column, each cell `0` or `1`, one row per
//!   test timestamp.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multivariate series stored row-major: `len` timestamps × `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    len: usize,
    features: usize,
    values: Vec<f64>,
}

impl Series {
    pub fn new(len: usize, features: usize, values: Vec<f64>) -> Result<Self> {
        if len * features != values.len() {
            return Err(Error::shape(
                "series",
                format!("{len}×{features} needs {} values, got {}", len * features, values.len()),
            ));
        }
        Ok(Self {
            len,
            features,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, feature: usize) -> f64 {
        self.values[t * self.features + feature]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.features.max(1))
    }

    /// Rows `start..start+len` as a new series.
    pub fn slice(&self, start: usize, len: usize) -> Result<Series> {
        if start + len > self.len {
            return Err(Error::shape(
                "series slice",
                format!("rows {start}..{} of {}", start + len, self.len),
            ));
        }
        let m = self.features;
        Series::new(len, m, self.values[start * m..(start + len) * m].to_vec())
    }

    pub fn concat(parts: &[Series]) -> Result<Series> {
        let m = parts.first().map_or(0, Series::features);
        if parts.iter().any(|p| p.features != m) {
            return Err(Error::shape("series concat", "feature counts differ"));
        }
        let values: Vec<f64> = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        Series::new(parts.iter().map(Series::len).sum(), m, values)
    }
}

/// Labeled evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub series: Series,
    pub labels: Option<Vec<bool>>,
}

/// One train/test pair (a machine, a channel, or a whole dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub name: String,
    pub train: Series,
    /// Labeled split reserved for threshold selection, when the source has one.
    pub validation: Option<LabeledSeries>,
    pub test: LabeledSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: usize,
    /// Declared share of anomalous test timestamps, in percent.
    pub anomaly_ratio_pct: Option<f64>,
    pub subsets: Vec<Subset>,
}

/// Files of one subset, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFiles {
    #[serde(default)]
    pub name: Option<String>,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

/// Declared layout of a benchmark, checked exactly on load.
///
/// Row counts are totals over all subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub features: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    #[serde(default)]
    pub anomaly_ratio_pct: Option<f64>,
    pub subsets: Vec<SubsetFiles>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.into();
        if m.features == 0 {
            return Err(Error::Config("manifest declares zero features".into()));
        }
        if m.subsets.is_empty() {
            return Err(Error::Config("manifest lists no subsets".into()));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn violation(&self, field: &str, expected: impl ToString, found: impl ToString) -> Error {
        Error::ManifestViolation {
            dataset: self.name.clone(),
            field: field.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

/// Reads a headerless numeric CSV; every row must have `width` cells.
pub fn read_matrix_csv(path: &Path, width: usize) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != width {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("row {} has {} columns, expected {width}", rows + 1, record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("row {} column {}: {cell:?} is not numeric", rows + 1, c + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!("row {} column {}: non-finite value", rows + 1, c + 1),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    Series::new(rows, width, values)
}

/// Column count of the first row of a CSV file (0 when empty).
fn first_row_width(path: &Path) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    match reader.records().next() {
        Some(r) => Ok(r.map_err(|e| csv_error(path, e))?.len()),
        None => Ok(0),
    }
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<bool>> {
    let series = read_matrix_csv(path, 1)?;
    series
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("label row {}: {other} is not 0 or 1", i + 1),
            }),
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Loads every subset of a manifest and validates it against the declared counts.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let m = manifest.features;
    let mut subsets = Vec::with_capacity(manifest.subsets.len());
    let (mut train_total, mut test_total) = (0, 0);
    for (k, files) in manifest.subsets.iter().enumerate() {
        let name = files.name.clone().unwrap_or_else(|| format!("subset-{k}"));
        let mut series = Vec::with_capacity(2);
        for (role, p) in [("train", &files.train), ("test", &files.test)] {
            let path = manifest.resolve(p);
            let width = first_row_width(&path)?;
            if width != m && width != 0 {
                return Err(manifest.violation(&format!("{name}/{role} features"), m, width));
            }
            series.push(read_matrix_csv(&path, m)?);
        }
        let test = series.pop().unwrap();
        let train = series.pop().unwrap();
        let labels = match &files.labels {
            Some(p) => {
                let labels = read_labels_csv(&manifest.resolve(p))?;
                if labels.len() != test.len() {
                    return Err(manifest.violation(
                        &format!("{name}/label rows"),
                        test.len(),
                        labels.len(),
                    ));
                }
                Some(labels)
            }
            None => None,
        };
        train_total += train.len();
        test_total += test.len();
        subsets.push(Subset {
            name,
            train,
            validation: None,
            test: LabeledSeries {
                series: test,
                labels,
            },
        });
    }
    if train_total != manifest.train_rows {
        return Err(manifest.violation("train_rows", manifest.train_rows, train_total));
    }
    if test_total != manifest.test_rows {
        return Err(manifest.violation("test_rows", manifest.test_rows, test_total));
    }
    Ok(Dataset {
        name: manifest.name.clone(),
        features: m,
        anomaly_ratio_pct: manifest.anomaly_ratio_pct,
        subsets,
    })
}

/// Row count kept by [`subsample_training`]: `⌈fraction·len⌉`, where products
/// within 1e-9 (relative) of an integer count as that integer.
pub fn prefix_rows(len: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("training fraction {fraction} is outside (0, 1]")));
    }
    let x = fraction * len as f64;
    let nearest = x.round();
    let rows = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    Ok((rows as usize).clamp(1.min(len), len))
}

/// Keeps the leading `⌈fraction·len⌉` rows so the series stays contiguous.
pub fn subsample_training(train: &Series, fraction: f64) -> Result<Series> {
    let rows = prefix_rows(train.len(), fraction)?;
    train.slice(0, rows)
}

/// Parameters of the synthetic confounder dataset.
///
/// Each feature is a sinusoid with its own period plus Gaussian noise. Two
/// kinds of plateau spikes are planted on top: confounders touch a strict
/// subset of features and stay labeled normal, anomalies touch every feature
/// and are labeled anomalous. Rates are expected fractions of timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub features: usize,
    pub length: usize,
    /// Per-feature periods in timestamps; empty selects `12 + 10·j`.
    pub periods: Vec<f64>,
    pub confounder_rate: f64,
    pub anomaly_rate: f64,
    pub noise_std: f64,
    pub event_len_min: usize,
    pub event_len_max: usize,
    /// Spike height range in units of the feature's signal amplitude.
    pub spike_min: f64,
    pub spike_max: f64,
    /// Largest number of features a confounder touches; 0 selects `max(1, M/3)`.
    pub confounder_max_features: usize,
    /// Leading timestamps kept free of events.
    pub quiet_prefix: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            features: 6,
            length: 20_000,
            periods: Vec::new(),
            confounder_rate: 0.02,
            anomaly_rate: 0.01,
            noise_std: 0.1,
            event_len_min: 3,
            event_len_max: 6,
            spike_min: 8.0,
            spike_max: 10.0,
            confounder_max_features: 0,
            quiet_prefix: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Confounder,
    Anomaly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub kind: EventKind,
    pub start: usize,
    pub len: usize,
    pub features: Vec<usize>,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub series: Series,
    pub labels: Vec<bool>,
    pub events: Vec<PlantedEvent>,
}

impl SyntheticSpec {
    pub fn periods(&self) -> Vec<f64> {
        if self.periods.is_empty() {
            (0..self.features).map(|j| 12.0 + 10.0 * j as f64).collect()
        } else {
            self.periods.clone()
        }
    }

    pub fn confounder_width(&self) -> usize {
        if self.confounder_max_features == 0 {
            (self.features / 3).max(1)
        } else {
            self.confounder_max_features
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.features == 0 || self.length == 0 {
            return bad("features and length must be positive".into());
        }
        if self.confounder_rate < 0.0 || self.anomaly_rate < 0.0 {
            return bad("rates must be non-negative".into());
        }
        if self.confounder_rate + self.anomaly_rate >= 1.0 {
            return bad("rates must sum to less than 1".into());
        }
        if self.event_len_min == 0 || self.event_len_min > self.event_len_max {
            return bad("event length range is empty".into());
        }
        if !(self.spike_min > 0.0 && self.spike_min <= self.spike_max) {
            return bad("spike range is empty".into());
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return bad("noise std must be finite and non-negative".into());
        }
        if !self.periods.is_empty() && self.periods.len() != self.features {
            return bad(format!("{} periods for {} features", self.periods.len(), self.features));
        }
        if self.quiet_prefix >= self.length {
            return bad("quiet prefix leaves no room for events".into());
        }
        if self.periods().iter().any(|p| *p <= 0.0) {
            return bad("periods must be positive".into());
        }
        if self.confounder_rate > 0.0 && (self.features < 2 || self.confounder_width() >= self.features)
        {
            return bad("confounders need a strict subset of at least two features".into());
        }
        Ok(())
    }
}

/// Generates a labeled series; identical specs give bitwise-identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, t_len) = (spec.features, spec.length);
    let periods = spec.periods();
    let phases: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let scales: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
    let offsets: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();

    let mut values = Vec::with_capacity(t_len * m);
    for t in 0..t_len {
        for j in 0..m {
            let s = (std::f64::consts::TAU * t as f64 / periods[j] + phases[j]).sin();
            let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values.push(offsets[j] + scales[j] * (s + n));
        }
    }

    // Event starts are Bernoulli per free timestamp, scaled so the expected
    // covered fraction matches the requested rate despite non-overlap.
    let mean_len = (spec.event_len_min + spec.event_len_max) as f64 / 2.0;
    let free = 1.0 - spec.anomaly_rate - spec.confounder_rate;
    let p_anomaly = spec.anomaly_rate / (mean_len * free);
    let p_confounder = spec.confounder_rate / (mean_len * free);
    let mut labels = vec![false; t_len];
    let mut events = Vec::new();
    let mut t = spec.quiet_prefix;
    while t < t_len {
        let u: f64 = rng.random();
        let kind = if u < p_anomaly {
            EventKind::Anomaly
        } else if u < p_anomaly + p_confounder {
            EventKind::Confounder
        } else {
            t += 1;
            continue;
        };
        let len = rng
            .random_range(spec.event_len_min..=spec.event_len_max)
            .min(t_len - t);
        let height = rng.random_range(spec.spike_min..=spec.spike_max);
        let features = match kind {
            EventKind::Anomaly => (0..m).collect(),
            EventKind::Confounder => {
                let k = rng.random_range(1..=spec.confounder_width());
                let mut chosen = rand::seq::index::sample(&mut rng, m, k).into_vec();
                chosen.sort_unstable();
                chosen
            }
        };
        for dt in 0..len {
            for &j in &features {
                values[(t + dt) * m + j] += height * scales[j];
            }
            if kind == EventKind::Anomaly {
                labels[t + dt] = true;
            }
        }
        events.push(PlantedEvent {
            kind,
            start: t,
            len,
            features,
            height,
        });
        // one quiet timestamp between events keeps segments distinct
        t += len + 1;
    }
    Ok(SyntheticSeries {
        series: Series::new(t_len, m, values)?,
        labels,
        events,
    })
}

/// Splits a synthetic series into contiguous train / validation / test parts.
/// With `clean_train` no events are planted in the training part.
pub fn synthetic_dataset(
    spec: &SyntheticSpec,
    train_share: f64,
    validation_share: f64,
    clean_train: bool,
) -> Result<Dataset> {
    if train_share <= 0.0 || validation_share < 0.0 || train_share + validation_share >= 1.0 {
        return Err(Error::Config("split shares must leave a non-empty test part".into()));
    }
    let n = spec.length;
    let n_train = (n as f64 * train_share) as usize;
    let mut spec = spec.clone();
    if clean_train {
        spec.quiet_prefix = spec.quiet_prefix.max(n_train);
    }
    let gen = generate_synthetic(&spec)?;
    let n_val = (n as f64 * validation_share) as usize;
    let n_test = n - n_train - n_val;
    let part = |start: usize, len: usize| -> Result<LabeledSeries> {
        Ok(LabeledSeries {
            series: gen.series.slice(start, len)?,
            labels: Some(gen.labels[start..start + len].to_vec()),
        })
    };
    let validation = if n_val > 0 { Some(part(n_train, n_val)?) } else { None };
    let test = part(n_train + n_val, n_test)?;
    let ratio = test.labels.as_ref().map(|l| {
        100.0 * l.iter().filter(|&&b| b).count() as f64 / l.len().max(1) as f64
    });
    Ok(Dataset {
        name: "synthetic".into(),
        features: spec.features,
        anomaly_ratio_pct: ratio,
        subsets: vec![Subset {
            name: "synthetic".into(),
            train: gen.series.slice(0, n_train)?,
            validation,
            test,
        }],
    })
}

/// Writes a series as headerless CSV using Rust's shortest round-trip float format.
pub fn write_matrix_csv(series: &Series, path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in series.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels_csv(labels: &[bool], path: &Path) -> Result<()> {
    let text: String = labels.iter().map(|&l| if l { "1\n" } else { "0\n" }).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
