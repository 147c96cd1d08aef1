//! Turns a pipeline output directory into four plot-ready CSVs. Everything
//! is recomputed from the run artifacts through the same model code, so the
//! figures cannot drift from the fitted currents.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use dramcalib::calibrate::validate;
use dramcalib::device::parse_currents;
use dramcalib::measurement::{
    parse_energies_csv, static_baseline, MeasurementSeries, RunEnergy, SortPolicy,
};
use dramcalib::power::{breakdown_report, coefficients, energy_unchecked};
use dramcalib::tracestats::parse_stats_csv;
use dramcalib::{CommandStats, CurrentKind, DeviceSpec};

use crate::pipeline::RunManifest;

fn read(run: &Path, rel: &str) -> Result<String> {
    let path = run.join(rel);
    fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))
}

pub fn emit(run: &Path, out: Option<&Path>) -> Result<()> {
    let device = DeviceSpec::load(run.join("device.json")).context("stage device-spec")?;
    let benches: Vec<(String, CommandStats)> =
        parse_stats_csv(&read(run, "stats/stats.csv")?).context("stage trace-stats")?;
    let energies: Vec<RunEnergy> =
        parse_energies_csv(&read(run, "measurements/energies.csv")?).context("stage measurement")?;
    let currents =
        parse_currents(&read(run, "calibration/currents.txt")?).context("stage calibrate")?;
    let manifest: Option<RunManifest> = match fs::read_to_string(run.join("run.json")) {
        Ok(text) => Some(serde_json::from_str(&text).context("stage config: run.json")?),
        Err(_) => None,
    };
    let scale = manifest
        .as_ref()
        .map_or(f64::from(device.ranks), |m| m.geometry_scale);

    let out_dir: PathBuf = out.map_or_else(|| run.join("plots"), Path::to_path_buf);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("create {}", out_dir.display()))?;

    // Component shares per benchmark under the calibrated currents.
    let mut fig = String::from("id,component,joules,percent\n");
    for (id, stats) in &benches {
        let bd = energy_unchecked(stats, &device, &currents, scale);
        for row in breakdown_report(&bd).rows {
            let _ = writeln!(fig, "{id},{},{},{}", row.component, row.joules, row.percent);
        }
    }
    fs::write(out_dir.join("fig_breakdown.csv"), &fig)?;

    // Fitted currents next to the datasheet, then model-vs-measured points.
    let ds = device.datasheet_currents();
    let mut fig = String::from("kind,name,value,reference\n");
    for k in CurrentKind::ALL {
        let _ = writeln!(fig, "current,{},{},{}", k.label(), currents.get(k), ds.get(k));
    }
    let _ = writeln!(fig, "intercept,intercept_j,{},0", currents.intercept_j);
    for (id, stats) in &benches {
        if let Some(e) = energies.iter().find(|e| e.id == *id) {
            let model = coefficients(stats, &device, scale).predict(&currents);
            let _ = writeln!(fig, "fit,{id},{model},{}", e.net_j);
        }
    }
    fs::write(out_dir.join("fig_calibration.csv"), &fig)?;

    // Holdout (or in-sample) prediction error before and after calibration.
    let val_ids: Vec<String> = match manifest.as_ref().filter(|m| !m.holdout.is_empty()) {
        Some(m) => m.holdout.clone(),
        None => benches.iter().map(|(id, _)| id.clone()).collect(),
    };
    let mut holdout = Vec::new();
    for id in &val_ids {
        let stats = benches
            .iter()
            .find(|(b, _)| b == id)
            .map(|(_, s)| s.clone())
            .with_context(|| format!("stage validate: no stats for {id}"))?;
        let net = energies
            .iter()
            .find(|e| e.id == *id)
            .map(|e| e.net_j)
            .with_context(|| format!("stage validate: no measured energy for {id}"))?;
        holdout.push((id.clone(), stats, net));
    }
    let rows = validate(&holdout, &device, &currents, scale);
    fs::write(out_dir.join("fig_validation.csv"), crate::validation_csv(&rows))?;

    // Idle baseline, when the run carries the series.
    let mut fig = String::from("mean_power_w,stddev_w,n_samples,current_per_dimm_a\n");
    if let Ok(text) = read(run, "measurements/idle.csv") {
        let series =
            MeasurementSeries::from_csv_str(&text, SortPolicy::Reject).context("stage measurement")?;
        let (t0, t1) = series.time_range();
        let b = static_baseline(&series, t0, t1, device.vdd, device.dimms_per_channel)
            .context("stage measurement")?;
        let _ = writeln!(fig, "{},{},{},{}", b.mean_power_w, b.stddev_w, b.n_samples, b.current_per_dimm_a);
    }
    fs::write(out_dir.join("fig_static.csv"), &fig)?;

    println!("wrote 4 figures to {}", out_dir.display());
    Ok(())
}
