//! Power-meter series: loading, windowed integration, baselines, and
//! per-benchmark energy aggregation.
//!
//! Series are CSV with a `timestamp_s,power_w` header. Integration is
//! trapezoidal over a prefix-sum antiderivative, so it is exact for
//! piecewise-linear power and adjacent windows add up to the enclosing
//! window at rounding precision.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse series: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("series is not sorted at sample {index} (t={t} after t={prev})")]
    Unsorted { index: usize, t: f64, prev: f64 },
    #[error("duplicate timestamp {t} at sample {index}")]
    DuplicateTimestamp { index: usize, t: f64 },
    #[error("sample {index} is not a finite nonnegative power: {value}")]
    BadPower { index: usize, value: f64 },
    #[error("series needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("window [{t0}, {t1}] outside series range [{lo}, {hi}]")]
    WindowOutOfRange { t0: f64, t1: f64, lo: f64, hi: f64 },
    #[error("window [{t0}, {t1}] covers {found} samples, need at least 2")]
    TooFewSamples { t0: f64, t1: f64, found: usize },
    #[error("file name {0:?} does not match <bench>_<threads>_<channel>_<run>.csv")]
    NameConvention(String),
    #[error("no series files in {0}")]
    NoFiles(String),
}

/// What to do with out-of-order samples when building a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortPolicy {
    Reject,
    SortFirst,
}

/// A power trace from one meter channel, with its integral precomputed.
#[derive(Debug, Clone)]
pub struct MeasurementSeries {
    samples: Vec<(f64, f64)>,
    /// prefix[i] integrates from the first sample to sample i.
    prefix: Vec<f64>,
}

impl MeasurementSeries {
    pub fn new(mut samples: Vec<(f64, f64)>, policy: SortPolicy) -> Result<Self, MeasurementError> {
        if samples.len() < 2 {
            return Err(MeasurementError::TooShort(samples.len()));
        }
        if policy == SortPolicy::SortFirst {
            samples.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("checked below"));
        }
        for (index, &(t, p)) in samples.iter().enumerate() {
            if !t.is_finite() || !p.is_finite() || p < 0.0 {
                return Err(MeasurementError::BadPower { index, value: p });
            }
            if index > 0 {
                let prev = samples[index - 1].0;
                if t == prev {
                    return Err(MeasurementError::DuplicateTimestamp { index, t });
                }
                if t < prev {
                    return Err(MeasurementError::Unsorted { index, t, prev });
                }
            }
        }
        let mut prefix = Vec::with_capacity(samples.len());
        prefix.push(0.0);
        for w in samples.windows(2) {
            let ((t0, p0), (t1, p1)) = (w[0], w[1]);
            let last = *prefix.last().unwrap();
            prefix.push(last + (t1 - t0) * (p0 + p1) * 0.5);
        }
        Ok(Self { samples, prefix })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Antiderivative at `t`, defined on the sample range.
    fn antiderivative(&self, t: f64) -> f64 {
        // Index of the segment containing t: last sample with time <= t.
        let k = self.samples.partition_point(|&(ts, _)| ts <= t) - 1;
        let (t0, p0) = self.samples[k];
        if t == t0 {
            return self.prefix[k];
        }
        let (t1, p1) = self.samples[k + 1];
        let pt = p0 + (p1 - p0) * (t - t0) / (t1 - t0);
        self.prefix[k] + (t - t0) * (p0 + pt) * 0.5
    }

    /// Energy in joules over `[t0, t1]`. The window must lie inside the
    /// sampled range and contain at least two samples.
    pub fn integrate(&self, t0: f64, t1: f64) -> Result<f64, MeasurementError> {
        let (lo, hi) = self.time_range();
        if !(t0 <= t1) || t0 < lo || t1 > hi {
            return Err(MeasurementError::WindowOutOfRange { t0, t1, lo, hi });
        }
        let found = self.samples_in(t0, t1);
        if found < 2 {
            return Err(MeasurementError::TooFewSamples { t0, t1, found });
        }
        Ok(self.antiderivative(t1) - self.antiderivative(t0))
    }

    fn samples_in(&self, t0: f64, t1: f64) -> usize {
        let lo = self.samples.partition_point(|&(t, _)| t < t0);
        let hi = self.samples.partition_point(|&(t, _)| t <= t1);
        hi.saturating_sub(lo)
    }

    /// Mean power over a window, energy divided by duration.
    pub fn mean_power(&self, t0: f64, t1: f64) -> Result<f64, MeasurementError> {
        Ok(self.integrate(t0, t1)? / (t1 - t0))
    }

    pub fn from_csv_str(text: &str, policy: SortPolicy) -> Result<Self, MeasurementError> {
        let mut samples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line == "timestamp_s,power_w" {
                continue;
            }
            let err = |reason: String| MeasurementError::Parse { line: idx + 1, reason };
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| err("expected 2 fields".to_string()))?;
            let t: f64 = a.trim().parse().map_err(|_| err(format!("bad timestamp {a:?}")))?;
            let p: f64 = b.trim().parse().map_err(|_| err(format!("bad power {b:?}")))?;
            samples.push((t, p));
        }
        Self::new(samples, policy)
    }

    pub fn load(path: impl AsRef<Path>, policy: SortPolicy) -> Result<Self, MeasurementError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MeasurementError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_str(&text, policy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp_s,power_w\n");
        for &(t, p) in &self.samples {
            out.push_str(&format!("{t},{p}\n"));
        }
        out
    }
}

/// Idle-power statistics over a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineEstimate {
    pub mean_power_w: f64,
    /// Sample standard deviation of the window's samples.
    pub stddev_w: f64,
    pub n_samples: usize,
    /// Mean power folded back to a per-DIMM standby current.
    pub current_per_dimm_a: f64,
}

/// Averages the samples inside `[t0, t1]` and folds the result to a
/// per-DIMM current at the given rail voltage.
pub fn static_baseline(
    series: &MeasurementSeries,
    t0: f64,
    t1: f64,
    vdd: f64,
    dimms_per_channel: u32,
) -> Result<BaselineEstimate, MeasurementError> {
    let (lo, hi) = series.time_range();
    if !(t0 <= t1) || t0 < lo || t1 > hi {
        return Err(MeasurementError::WindowOutOfRange { t0, t1, lo, hi });
    }
    let window: Vec<f64> = series
        .samples()
        .iter()
        .filter(|&&(t, _)| t >= t0 && t <= t1)
        .map(|&(_, p)| p)
        .collect();
    if window.len() < 2 {
        return Err(MeasurementError::TooFewSamples { t0, t1, found: window.len() });
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0);
    Ok(BaselineEstimate {
        mean_power_w: mean,
        stddev_w: var.sqrt(),
        n_samples: window.len(),
        current_per_dimm_a: mean / (vdd * f64::from(dimms_per_channel)),
    })
}

/// Energy of one benchmark averaged over repeated runs, baseline removed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEnergy {
    pub id: String,
    pub gross_j: f64,
    /// Baseline power times mean duration.
    pub static_j: f64,
    /// Always exactly `gross_j - static_j`.
    pub net_j: f64,
    pub duration_s: f64,
    pub n_runs: u32,
    /// Sample standard deviation of per-run net energy; zero for one run.
    pub stddev_j: f64,
}

/// Integrates each `(series, window)` run, subtracts the baseline, and
/// averages. Windows follow the rules of [`MeasurementSeries::integrate`].
pub fn run_energy(
    id: &str,
    runs: &[(&MeasurementSeries, (f64, f64))],
    baseline_w: f64,
) -> Result<RunEnergy, MeasurementError> {
    assert!(!runs.is_empty(), "run_energy needs at least one run");
    let mut gross = Vec::with_capacity(runs.len());
    let mut net = Vec::with_capacity(runs.len());
    let mut statics = Vec::with_capacity(runs.len());
    let mut durations = Vec::with_capacity(runs.len());
    for &(series, (t0, t1)) in runs {
        let g = series.integrate(t0, t1)?;
        let d = t1 - t0;
        let s = baseline_w * d;
        gross.push(g);
        statics.push(s);
        net.push(g - s);
        durations.push(d);
    }
    let n = runs.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let gross_j = mean(&gross);
    let static_j = mean(&statics);
    let net_j = gross_j - static_j;
    let stddev_j = if runs.len() > 1 {
        let m = mean(&net);
        (net.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RunEnergy {
        id: id.to_string(),
        gross_j,
        static_j,
        net_j,
        duration_s: mean(&durations),
        n_runs: runs.len() as u32,
        stddev_j,
    })
}

pub const ENERGIES_CSV_HEADER: &str = "id,gross_j,static_j,net_j,duration_s,n_runs,stddev_j";

impl RunEnergy {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.id, self.gross_j, self.static_j, self.net_j, self.duration_s, self.n_runs, self.stddev_j
        )
    }
}

/// Parses the `ENERGIES_CSV_HEADER` format, header optional.
pub fn parse_energies_csv(text: &str) -> Result<Vec<RunEnergy>, MeasurementError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line == ENERGIES_CSV_HEADER {
            continue;
        }
        let err = |reason: String| MeasurementError::Parse { line: idx + 1, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, MeasurementError> {
            fields[i]
                .parse()
                .map_err(|_| err(format!("bad number {:?}", fields[i])))
        };
        rows.push(RunEnergy {
            id: fields[0].to_string(),
            gross_j: num(1)?,
            static_j: num(2)?,
            net_j: num(3)?,
            duration_s: num(4)?,
            n_runs: fields[5]
                .parse()
                .map_err(|_| err(format!("bad run count {:?}", fields[5])))?,
            stddev_j: num(6)?,
        });
    }
    Ok(rows)
}

/// One aggregated row of a measurement sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub bench: String,
    pub threads: u32,
    pub channel: String,
    pub mean_power_w: f64,
    pub n_runs: u32,
}

fn parse_series_name(stem: &str) -> Option<(String, u32, String, u32)> {
    // Benchmarks may contain underscores, so split from the right.
    let (rest, run) = stem.rsplit_once('_')?;
    let (rest, channel) = rest.rsplit_once('_')?;
    let (bench, threads) = rest.rsplit_once('_')?;
    if bench.is_empty() || channel.is_empty() {
        return None;
    }
    Some((bench.to_string(), threads.parse().ok()?, channel.to_string(), run.parse().ok()?))
}

/// Scans a directory of `<bench>_<threads>_<channel>_<run>.csv` series and
/// returns mean power per `(bench, threads, channel)`, averaged across run
/// repetitions, sorted by that key. Non-CSV files are ignored; CSV files
/// that do not follow the convention are an error.
pub fn aggregate_runs(dir: impl AsRef<Path>) -> Result<Vec<AggregateRow>, MeasurementError> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|source| MeasurementError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut groups: BTreeMap<(String, u32, String), Vec<f64>> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|source| MeasurementError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| MeasurementError::NameConvention(path.display().to_string()))?;
        let (bench, threads, channel, _run) = parse_series_name(stem)
            .ok_or_else(|| MeasurementError::NameConvention(path.display().to_string()))?;
        let series = MeasurementSeries::load(&path, SortPolicy::Reject)?;
        let (t0, t1) = series.time_range();
        groups.entry((bench, threads, channel)).or_default().push(series.mean_power(t0, t1)?);
    }
    if groups.is_empty() {
        return Err(MeasurementError::NoFiles(dir.display().to_string()));
    }
    Ok(groups
        .into_iter()
        .map(|((bench, threads, channel), powers)| AggregateRow {
            bench,
            threads,
            channel,
            mean_power_w: powers.iter().sum::<f64>() / powers.len() as f64,
            n_runs: powers.len() as u32,
        })
        .collect())
}
