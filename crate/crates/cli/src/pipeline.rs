//! End-to-end flow: config in, artifact tree out. Every stage writes its
//! intermediate files so any step can be rerun or inspected with the
//! single-stage subcommands, and `emit-plots` works from the output
//! directory alone.
//!
//! Without a measurements directory the pipeline synthesises them: it plants
//! scaled-down currents, prices each trace with the planted model, adds
//! multiplicative run noise, and folds in a noisy idle baseline series. The
//! calibration then has known ground truth to recover.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use dramcalib::addrmap::AddressMapping;
use dramcalib::calibrate::{build_problem, calibrate, validate, ProblemOptions};
use dramcalib::device::write_currents;
use dramcalib::measurement::{
    parse_energies_csv, static_baseline, BaselineEstimate, MeasurementSeries, RunEnergy,
    SortPolicy, ENERGIES_CSV_HEADER,
};
use dramcalib::memctrl::schedule;
use dramcalib::power::{breakdown_report, energy_unchecked};
use dramcalib::tracestats::{reduce, save_trace, STATS_CSV_HEADER};
use dramcalib::workload::{contiguous_bases, generate, write_stream_csv, KernelKind};
use dramcalib::{CalibratedCurrents, CommandStats, DeviceSpec};

use crate::{render_calibration_report, validation_csv, validation_table};

fn default_row_bytes() -> u64 {
    8192
}

fn default_seed() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_stride() -> u64 {
    64
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Device description JSON, relative to the config file.
    pub device: PathBuf,
    /// Artifact directory, relative to the config file.
    pub out_dir: PathBuf,
    #[serde(default = "default_row_bytes")]
    pub row_bytes: u64,
    /// Base RNG seed; the DRAM_CALIB_SEED environment variable overrides it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub benchmarks: Vec<BenchmarkSpec>,
    /// Benchmark ids excluded from the fit and used for validation.
    #[serde(default)]
    pub holdout: Vec<String>,
    /// Directory with a measured `energies.csv` (and optionally `idle.csv`);
    /// measurements are synthesised when absent.
    #[serde(default)]
    pub measurements: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_true")]
    pub strict_timing: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub id: String,
    pub kernel: String,
    pub elements: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default)]
    pub rfo: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Ground-truth currents as a fraction of the datasheet values.
    pub planted_scale: f64,
    /// Relative run-to-run noise on each synthetic energy.
    pub noise_rel: f64,
    /// Planted intercept as a fraction of the mean benchmark energy.
    pub intercept_frac: f64,
    pub runs: u32,
    /// Idle series: standby current per DIMM, sampling, and noise.
    pub idle_current_a: f64,
    pub idle_noise_w: f64,
    pub idle_seconds: f64,
    pub sample_hz: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            planted_scale: 0.55,
            noise_rel: 0.01,
            intercept_frac: 0.01,
            runs: 3,
            idle_current_a: 0.166,
            idle_noise_w: 0.02,
            idle_seconds: 10.0,
            sample_hz: 1000.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub weighted: bool,
    pub intercept: bool,
    pub gross: bool,
    /// Defaults to the rank count.
    pub geometry_scale: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { weighted: false, intercept: true, gross: false, geometry_scale: None }
    }
}

/// Resolved settings of a pipeline run, written to `run.json` so later tools
/// (`emit-plots`) need nothing but the output directory.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub row_bytes: u64,
    pub geometry_scale: f64,
    pub strict_timing: bool,
    pub synthetic: bool,
    pub planted_scale: Option<f64>,
    pub holdout: Vec<String>,
    pub benchmarks: Vec<String>,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn run(config_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("stage config: read {}", config_path.display()))?;
    let cfg: PipelineConfig = serde_json::from_str(&text)
        .with_context(|| format!("stage config: parse {}", config_path.display()))?;
    let base = config_path.parent().unwrap_or(Path::new("."));

    let device_path = resolve(base, &cfg.device);
    let out_dir = match out_override {
        Some(p) => p.to_path_buf(),
        None => resolve(base, &cfg.out_dir),
    };
    let measurements = cfg.measurements.as_ref().map(|p| resolve(base, p));

    let seed = match std::env::var("DRAM_CALIB_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .with_context(|| format!("stage config: DRAM_CALIB_SEED {v:?} is not a u64"))?,
        Err(_) => cfg.seed,
    };

    if cfg.benchmarks.is_empty() {
        bail!("stage config: no benchmarks");
    }
    let mut ids = std::collections::HashSet::new();
    for b in &cfg.benchmarks {
        if !ids.insert(b.id.as_str()) {
            bail!("stage config: duplicate benchmark id {:?}", b.id);
        }
    }
    for h in &cfg.holdout {
        if !ids.contains(h.as_str()) {
            bail!("stage config: holdout id {h:?} is not a benchmark");
        }
    }
    if cfg.holdout.len() == cfg.benchmarks.len() {
        bail!("stage config: every benchmark is held out; nothing left to fit");
    }

    let device = DeviceSpec::load(&device_path)
        .with_context(|| format!("stage device-spec: {}", device_path.display()))?;
    let geometry_scale = cfg.fit.geometry_scale.unwrap_or(f64::from(device.ranks));

    for sub in ["streams", "traces", "stats", "energy", "measurements", "calibration", "validation"] {
        fs::create_dir_all(out_dir.join(sub))
            .with_context(|| format!("stage config: create {}", out_dir.join(sub).display()))?;
    }
    let device_text = fs::read_to_string(&device_path)
        .with_context(|| format!("stage device-spec: read {}", device_path.display()))?;
    fs::write(out_dir.join("device.json"), &device_text)?;

    let mapping =
        AddressMapping::standard(&device, cfg.row_bytes).context("stage address-map")?;
    mapping.save(out_dir.join("mapping.txt")).context("stage address-map")?;

    // Workload, schedule, reduce: one pass per benchmark in config order.
    let mut benches: Vec<(String, CommandStats)> = Vec::new();
    for b in &cfg.benchmarks {
        let kind = KernelKind::from_str(&b.kernel)
            .with_context(|| format!("stage workload-gen: {}", b.id))?;
        let stream = generate(kind, b.elements, b.stride, contiguous_bases(0, b.elements), b.rfo)
            .with_context(|| format!("stage workload-gen: {}", b.id))?;
        let mut csv = Vec::new();
        write_stream_csv(stream.iter(), &mut csv)
            .with_context(|| format!("stage workload-gen: {}", b.id))?;
        fs::write(out_dir.join("streams").join(format!("{}.csv", b.id)), &csv)?;

        let trace = schedule(stream.iter(), &mapping, &device)
            .with_context(|| format!("stage memctrl-sim: {}", b.id))?;
        save_trace(&trace, out_dir.join("traces").join(format!("{}.trace", b.id)))
            .with_context(|| format!("stage memctrl-sim: {}", b.id))?;

        let stats = reduce(&trace, cfg.strict_timing)
            .with_context(|| format!("stage trace-stats: {}", b.id))?;
        eprintln!(
            "bench {}: {} requests -> {} commands, {} cycles",
            b.id,
            stream.len(),
            trace.commands.len(),
            stats.c_total
        );
        benches.push((b.id.clone(), stats));
    }

    let mut stats_csv = String::from(STATS_CSV_HEADER);
    stats_csv.push('\n');
    for (id, s) in &benches {
        stats_csv.push_str(&s.to_csv_row(id));
        stats_csv.push('\n');
    }
    fs::write(out_dir.join("stats").join("stats.csv"), &stats_csv)?;

    // Measured or synthetic energies, plus the idle baseline if available.
    let mut planted: Option<CalibratedCurrents> = None;
    let mut baseline: Option<BaselineEstimate> = None;
    let energies: Vec<RunEnergy> = match &measurements {
        Some(dir) => {
            let path = dir.join("energies.csv");
            let text = fs::read_to_string(&path)
                .with_context(|| format!("stage measurement: read {}", path.display()))?;
            let energies = parse_energies_csv(&text)
                .with_context(|| format!("stage measurement: parse {}", path.display()))?;
            fs::write(out_dir.join("measurements").join("energies.csv"), &text)?;
            let idle = dir.join("idle.csv");
            if idle.exists() {
                let idle_text = fs::read_to_string(&idle)?;
                fs::write(out_dir.join("measurements").join("idle.csv"), &idle_text)?;
                let series = MeasurementSeries::from_csv_str(&idle_text, SortPolicy::Reject)
                    .with_context(|| format!("stage measurement: {}", idle.display()))?;
                let (t0, t1) = series.time_range();
                baseline = Some(
                    static_baseline(&series, t0, t1, device.vdd, device.dimms_per_channel)
                        .context("stage measurement")?,
                );
            }
            energies
        }
        None => {
            let (truth, est, rows) =
                synthesize_measurements(&cfg.synthetic, &device, &benches, geometry_scale, seed, &out_dir)
                    .context("stage measurement")?;
            planted = Some(truth);
            baseline = Some(est);
            rows
        }
    };

    // Fit on everything not held out.
    let fit_benches: Vec<(String, CommandStats)> = benches
        .iter()
        .filter(|(id, _)| !cfg.holdout.contains(id))
        .cloned()
        .collect();
    let fit_energies: Vec<RunEnergy> = energies
        .iter()
        .filter(|e| fit_benches.iter().any(|(id, _)| *id == e.id))
        .cloned()
        .collect();
    let opts = ProblemOptions {
        fit_intercept: cfg.fit.intercept,
        weighted: cfg.fit.weighted,
        use_gross: cfg.fit.gross,
        geometry_scale: cfg.fit.geometry_scale,
    };
    let problem =
        build_problem(&fit_benches, &fit_energies, &device, &opts).context("stage calibrate")?;
    let result = calibrate(&problem).context("stage calibrate")?;
    fs::write(out_dir.join("calibration").join("currents.txt"), write_currents(&result.currents))?;
    let report = render_calibration_report(&device, &result);
    fs::write(out_dir.join("calibration").join("report.txt"), &report)?;

    // Validate on the holdout set, or in-sample when nothing is held out.
    let val_ids: Vec<&str> = if cfg.holdout.is_empty() {
        benches.iter().map(|(id, _)| id.as_str()).collect()
    } else {
        cfg.holdout.iter().map(String::as_str).collect()
    };
    let mut val_input = Vec::new();
    for id in &val_ids {
        let (_, stats) = benches.iter().find(|(b, _)| b == id).unwrap();
        let net = energies
            .iter()
            .find(|e| e.id == *id)
            .map(|e| e.net_j)
            .with_context(|| format!("stage validate: no measured energy for {id}"))?;
        val_input.push((id.to_string(), stats.clone(), net));
    }
    let val_rows = validate(&val_input, &device, &result.currents, geometry_scale);
    fs::write(out_dir.join("validation").join("validation.csv"), validation_csv(&val_rows))?;

    // Component breakdown under both current sets, one CSV for plotting.
    let mut breakdown = String::from("currents,id,component,joules,percent\n");
    for (label, currents) in
        [("datasheet", device.datasheet_currents()), ("calibrated", result.currents)]
    {
        for (id, stats) in &benches {
            let bd = energy_unchecked(stats, &device, &currents, geometry_scale);
            for row in breakdown_report(&bd).rows {
                let _ = writeln!(
                    breakdown,
                    "{label},{id},{},{},{}",
                    row.component, row.joules, row.percent
                );
            }
        }
    }
    fs::write(out_dir.join("energy").join("breakdown.csv"), &breakdown)?;

    let manifest = RunManifest {
        seed,
        row_bytes: cfg.row_bytes,
        geometry_scale,
        strict_timing: cfg.strict_timing,
        synthetic: measurements.is_none(),
        planted_scale: planted.as_ref().map(|_| cfg.synthetic.planted_scale),
        holdout: cfg.holdout.clone(),
        benchmarks: benches.iter().map(|(id, _)| id.clone()).collect(),
    };
    fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&manifest).context("stage config")? + "\n",
    )?;

    let summary = render_summary(&device, &cfg, seed, &result, &val_rows, &planted, &baseline);
    fs::write(out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    eprintln!("artifacts in {}", out_dir.display());
    Ok(())
}

/// Plants ground-truth currents, prices every benchmark with them, and adds
/// run noise plus a measured-looking idle baseline. Returns the truth, the
/// baseline estimated back from the noisy idle series, and the energy rows.
fn synthesize_measurements(
    syn: &SyntheticConfig,
    device: &DeviceSpec,
    benches: &[(String, CommandStats)],
    geometry_scale: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(CalibratedCurrents, BaselineEstimate, Vec<RunEnergy>)> {
    if !(syn.planted_scale > 0.0 && syn.planted_scale.is_finite()) {
        bail!("planted_scale must be positive");
    }
    if syn.runs == 0 {
        bail!("runs must be at least 1");
    }

    let ds = device.datasheet_currents();
    let mut truth = CalibratedCurrents {
        i_act: ds.i_act * syn.planted_scale,
        i_pre: ds.i_pre * syn.planted_scale,
        i_asb: ds.i_asb * syn.planted_scale,
        i_rd: ds.i_rd * syn.planted_scale,
        i_wr: ds.i_wr * syn.planted_scale,
        intercept_j: 0.0,
    };
    // The intercept is planted relative to the energy scale of the traces so
    // it stays a perturbation rather than the dominant term.
    let dyn_total: f64 = benches
        .iter()
        .map(|(_, s)| energy_unchecked(s, device, &truth, geometry_scale).e_total)
        .sum();
    truth.intercept_j = syn.intercept_frac * dyn_total / benches.len() as f64;

    // Idle series: true standby power plus Gaussian sample noise.
    let static_true_w = device.vdd * syn.idle_current_a * f64::from(device.dimms_per_channel);
    let n_idle = (syn.idle_seconds * syn.sample_hz).round() as usize;
    if n_idle < 2 {
        bail!("idle series needs at least 2 samples; raise idle_seconds or sample_hz");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d1e);
    let samples: Vec<(f64, f64)> = (0..=n_idle)
        .map(|i| {
            let noise: f64 = rng.sample(StandardNormal);
            let t = i as f64 / syn.sample_hz;
            (t, f64::max(static_true_w + syn.idle_noise_w * noise, 0.0))
        })
        .collect();
    let idle = MeasurementSeries::new(samples, SortPolicy::Reject)?;
    fs::write(out_dir.join("measurements").join("idle.csv"), idle.to_csv())?;
    let (t0, t1) = idle.time_range();
    let baseline = static_baseline(&idle, t0, t1, device.vdd, device.dimms_per_channel)?;

    let mut rows = Vec::new();
    for (i, (id, stats)) in benches.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 + 1));
        let e_true = energy_unchecked(stats, device, &truth, geometry_scale).e_total;
        let duration = stats.c_total as f64 * device.tck_s();
        let nets: Vec<f64> = (0..syn.runs)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                e_true * (1.0 + syn.noise_rel * z)
            })
            .collect();
        let n = f64::from(syn.runs);
        let dyn_mean = nets.iter().sum::<f64>() / n;
        // Gross includes the true standby draw; net subtracts the estimated
        // baseline, leaving a small realistic residual.
        let gross_j = dyn_mean + static_true_w * duration;
        let static_j = baseline.mean_power_w * duration;
        let stddev_j = if syn.runs > 1 {
            (nets.iter().map(|x| (x - dyn_mean) * (x - dyn_mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(RunEnergy {
            id: id.clone(),
            gross_j,
            static_j,
            net_j: gross_j - static_j,
            duration_s: duration,
            n_runs: syn.runs,
            stddev_j,
        });
    }

    let mut csv = String::from(ENERGIES_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    fs::write(out_dir.join("measurements").join("energies.csv"), &csv)?;
    Ok((truth, baseline, rows))
}

fn render_summary(
    device: &DeviceSpec,
    cfg: &PipelineConfig,
    seed: u64,
    result: &dramcalib::calibrate::CalibrationResult,
    val_rows: &[dramcalib::calibrate::ValidationRow],
    planted: &Option<CalibratedCurrents>,
    baseline: &Option<BaselineEstimate>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "device: {} ({} ranks)", device.name, device.ranks);
    let _ = writeln!(
        out,
        "benchmarks: {} fitted, {} held out (seed {seed})",
        cfg.benchmarks.len() - cfg.holdout.len(),
        cfg.holdout.len()
    );
    if let Some(truth) = planted {
        let _ = writeln!(
            out,
            "synthetic measurements: currents planted at {:.2}x datasheet, intercept {:.3e} J",
            cfg.synthetic.planted_scale, truth.intercept_j
        );
    }
    if let Some(b) = baseline {
        let _ = writeln!(
            out,
            "idle baseline: {:.4} W over {} samples ({:.4} A per DIMM)",
            b.mean_power_w, b.n_samples, b.current_per_dimm_a
        );
    }
    let _ = writeln!(
        out,
        "fit: avg rel error {:.3}%, max {:.3}%, KKT {}",
        result.avg_rel_error * 100.0,
        result.max_rel_error * 100.0,
        if result.kkt_satisfied { "satisfied" } else { "VIOLATED" }
    );
    for w in &result.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out.push('\n');
    let label = if cfg.holdout.is_empty() { "validation (in-sample)" } else { "validation (holdout)" };
    let _ = writeln!(out, "{label}:");
    out.push_str(&validation_table(val_rows));
    out
}
