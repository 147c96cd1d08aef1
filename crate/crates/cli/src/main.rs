//! `dram-calib`: generate request streams, schedule them into DDR4 command
//! traces, price the traces with a current model, and calibrate the currents
//! against measured energies. `pipeline` chains every stage from one config.

mod pipeline;
mod plots;

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dramcalib::addrmap::{infer_mapping, AddressMapping, Coord, CoordWidths, DramCoord};
use dramcalib::calibrate::{
    build_problem, calibrate, validate, CalibrationResult, ProblemOptions,
};
use dramcalib::device::{parse_currents, write_currents};
use dramcalib::measurement::{
    aggregate_runs, parse_energies_csv, static_baseline, MeasurementSeries, SortPolicy,
};
use dramcalib::memctrl::schedule;
use dramcalib::power::{breakdown_report, energy_unchecked, COMPONENT_LABELS};
use dramcalib::tracestats::{
    load_trace, parse_stats_csv, reduce, save_trace, STATS_CSV_HEADER,
};
use dramcalib::workload::{contiguous_bases, generate, read_stream_csv, write_stream_csv, KernelKind};
use dramcalib::{CalibratedCurrents, CommandStats, CurrentKind, DeviceSpec};

#[derive(Parser)]
#[command(name = "dram-calib", version, about = "DDR4 command-trace energy modelling and current calibration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a STREAM-like request stream as CSV
    GenStream(GenStreamArgs),
    /// Schedule a request stream into a timing-legal command trace
    Simulate(SimulateArgs),
    /// Reduce traces to command counts and standby dwell
    Stats(StatsArgs),
    /// Price stats rows with the linear energy model
    Energy(EnergyArgs),
    /// Estimate the idle power baseline from a measurement series
    Baseline(BaselineArgs),
    /// Average measurement runs grouped by benchmark, threads, and channel
    Aggregate(AggregateArgs),
    /// Recover a XOR address mapping from observed address decodes
    InferMap(InferMapArgs),
    /// Fit device currents to measured energies
    Calibrate(CalibrateArgs),
    /// Compare datasheet and calibrated predictions against measurements
    Validate(ValidateArgs),
    /// Run every stage from a config file into an output directory
    Pipeline(PipelineArgs),
    /// Export plot-ready CSVs from a pipeline output directory
    EmitPlots(EmitPlotsArgs),
}

#[derive(Args)]
struct GenStreamArgs {
    /// Kernel name: read, assign, scale, addition, triad, copy, self-scale
    #[arg(long)]
    kernel: String,
    /// Elements per array (8 bytes each)
    #[arg(long)]
    elements: u64,
    /// Access stride in bytes
    #[arg(long, default_value_t = 64)]
    stride: u64,
    /// Physical base address of the first array
    #[arg(long, default_value_t = 0)]
    base: u64,
    /// Read each line before writing it (read-for-ownership)
    #[arg(long)]
    rfo: bool,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Device description JSON
    #[arg(long)]
    device: PathBuf,
    /// Request stream CSV
    #[arg(long)]
    stream: PathBuf,
    /// Address mapping file; the standard row-interleaved mapping when omitted
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Row span of the standard mapping, bytes
    #[arg(long, default_value_t = 8192)]
    row_bytes: u64,
    /// Output trace file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Device description JSON
    #[arg(long)]
    device: PathBuf,
    /// Verify every timing constraint before reducing
    #[arg(long)]
    strict: bool,
    /// Emit machine-readable CSV instead of a table
    #[arg(long)]
    csv: bool,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace files; the id of each row is the file stem
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    /// Device description JSON
    #[arg(long)]
    device: PathBuf,
    /// Stats CSV produced by `stats --csv`
    #[arg(long)]
    stats: PathBuf,
    /// Calibrated currents file; datasheet values when omitted
    #[arg(long)]
    currents: Option<PathBuf>,
    /// Geometry scale; rank count when omitted
    #[arg(long)]
    geometry_scale: Option<f64>,
    /// Emit machine-readable CSV instead of a table
    #[arg(long)]
    csv: bool,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    /// Device description JSON (for rail voltage and DIMM count)
    #[arg(long)]
    device: PathBuf,
    /// Power series CSV: timestamp_s,power_w
    #[arg(long)]
    series: PathBuf,
    /// Averaging window; the whole series when omitted
    #[arg(long, num_args = 2, value_names = ["T0", "T1"])]
    window: Option<Vec<f64>>,
    /// Sort samples by timestamp instead of rejecting disorder
    #[arg(long)]
    sort: bool,
}

#[derive(Args)]
struct AggregateArgs {
    /// Directory of `<bench>_<threads>_<channel>_<run>.csv` series
    #[arg(long)]
    dir: PathBuf,
    /// Emit machine-readable CSV instead of a table
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct InferMapArgs {
    /// Samples CSV: address,channel,rank,bank_group,bank,row,column
    #[arg(long)]
    samples: PathBuf,
    /// Number of physical address bits the mapping may read
    #[arg(long)]
    address_bits: u32,
    /// Output mapping file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Device description JSON
    #[arg(long)]
    device: PathBuf,
    /// Stats CSV produced by `stats --csv`
    #[arg(long)]
    stats: PathBuf,
    /// Energies CSV produced by the measurement stage
    #[arg(long)]
    energies: PathBuf,
    /// Weight each benchmark by its run-to-run spread
    #[arg(long)]
    weighted: bool,
    /// Pin the intercept at zero instead of fitting it
    #[arg(long)]
    no_intercept: bool,
    /// Fit gross energy (baseline included) instead of net
    #[arg(long)]
    gross: bool,
    /// Geometry scale; rank count when omitted
    #[arg(long)]
    geometry_scale: Option<f64>,
    /// Output currents file
    #[arg(long)]
    out: PathBuf,
    /// Also write the fit report to this file
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Device description JSON
    #[arg(long)]
    device: PathBuf,
    /// Calibrated currents file
    #[arg(long)]
    currents: PathBuf,
    /// Stats CSV for the holdout benchmarks
    #[arg(long)]
    stats: PathBuf,
    /// Energies CSV with the measured net energies
    #[arg(long)]
    energies: PathBuf,
    /// Geometry scale; rank count when omitted
    #[arg(long)]
    geometry_scale: Option<f64>,
    /// Emit machine-readable CSV instead of a table
    #[arg(long)]
    csv: bool,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON; relative paths resolve against its directory
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the config
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EmitPlotsArgs {
    /// Pipeline output directory
    #[arg(long)]
    run: PathBuf,
    /// Where to write the figures; `<run>/plots` when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenStream(a) => gen_stream(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Stats(a) => stats_cmd(a),
        Cmd::Energy(a) => energy_cmd(a),
        Cmd::Baseline(a) => baseline_cmd(a),
        Cmd::Aggregate(a) => aggregate_cmd(a),
        Cmd::InferMap(a) => infer_map_cmd(a),
        Cmd::Calibrate(a) => calibrate_cmd(a),
        Cmd::Validate(a) => validate_cmd(a),
        Cmd::Pipeline(a) => pipeline::run(&a.config, a.out_dir.as_deref()),
        Cmd::EmitPlots(a) => plots::emit(&a.run, a.out.as_deref()),
    }
}

fn load_device(path: &Path) -> Result<DeviceSpec> {
    DeviceSpec::load(path).with_context(|| format!("stage device-spec: {}", path.display()))
}

fn load_currents_file(path: &Path) -> Result<CalibratedCurrents> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("stage calibrate: read {}", path.display()))?;
    parse_currents(&text).with_context(|| format!("stage calibrate: parse {}", path.display()))
}

fn write_or_stdout(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("write {}", path.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Left-aligned fixed-width table; the first row is the header.
fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:<width$}", width = widths[i]);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn gen_stream(a: GenStreamArgs) -> Result<()> {
    let kind = KernelKind::from_str(&a.kernel).context("stage workload-gen")?;
    let bases = contiguous_bases(a.base, a.elements);
    let stream =
        generate(kind, a.elements, a.stride, bases, a.rfo).context("stage workload-gen")?;
    let mut buf = Vec::new();
    write_stream_csv(stream.iter(), &mut buf).context("stage workload-gen")?;
    write_or_stdout(a.out.as_deref(), std::str::from_utf8(&buf).unwrap())?;
    eprintln!(
        "{}: {} requests ({} reads, {} writes)",
        kind.name(),
        stream.len(),
        stream.rw_ratio().0,
        stream.rw_ratio().1
    );
    Ok(())
}

fn load_mapping(
    device: &DeviceSpec,
    mapping: Option<&Path>,
    row_bytes: u64,
) -> Result<AddressMapping> {
    match mapping {
        Some(path) => AddressMapping::load(path)
            .with_context(|| format!("stage address-map: {}", path.display())),
        None => AddressMapping::standard(device, row_bytes).context("stage address-map"),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let device = load_device(&a.device)?;
    let mapping = load_mapping(&device, a.mapping.as_deref(), a.row_bytes)?;
    let text = fs::read_to_string(&a.stream)
        .with_context(|| format!("stage workload-gen: read {}", a.stream.display()))?;
    let requests = read_stream_csv(BufReader::new(text.as_bytes()))
        .with_context(|| format!("stage workload-gen: parse {}", a.stream.display()))?;
    let n = requests.len();
    let trace = schedule(requests, &mapping, &device).context("stage memctrl-sim")?;
    save_trace(&trace, &a.out).context("stage memctrl-sim")?;
    eprintln!(
        "{n} requests -> {} commands over {} cycles ({:.3} ms)",
        trace.commands.len(),
        trace.end_cycle,
        trace.end_cycle as f64 * device.tck_s() * 1e3
    );
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let device = load_device(&a.device)?;
    let mut rows = Vec::new();
    for path in &a.traces {
        let trace = load_trace(path, &device)
            .with_context(|| format!("stage trace-stats: {}", path.display()))?;
        let stats = reduce(&trace, a.strict)
            .with_context(|| format!("stage trace-stats: {}", path.display()))?;
        let id = path.file_stem().map_or_else(
            || path.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        rows.push((id, stats));
    }
    let text = if a.csv {
        let mut out = String::from(STATS_CSV_HEADER);
        out.push('\n');
        for (id, s) in &rows {
            out.push_str(&s.to_csv_row(id));
            out.push('\n');
        }
        out
    } else {
        let mut table = vec![vec![
            "id".into(),
            "act".into(),
            "pre".into(),
            "rd".into(),
            "wr".into(),
            "ref".into(),
            "cycles".into(),
            "act dwell".into(),
            "pre dwell".into(),
            "banks".into(),
        ]];
        for (id, s) in &rows {
            table.push(vec![
                id.clone(),
                s.n_act.to_string(),
                s.n_pre.to_string(),
                s.n_rd.to_string(),
                s.n_wr.to_string(),
                s.n_ref.to_string(),
                s.c_total.to_string(),
                s.c_act_stdby.to_string(),
                s.c_pre_stdby.to_string(),
                s.per_bank.len().to_string(),
            ]);
        }
        render_table(&table)
    };
    write_or_stdout(a.out.as_deref(), &text)
}

fn energy_cmd(a: EnergyArgs) -> Result<()> {
    let device = load_device(&a.device)?;
    let currents = match a.currents.as_deref() {
        Some(path) => load_currents_file(path)?,
        None => device.datasheet_currents(),
    };
    let scale = a.geometry_scale.unwrap_or(f64::from(device.ranks));
    let text = fs::read_to_string(&a.stats)
        .with_context(|| format!("stage power-model: read {}", a.stats.display()))?;
    let rows = parse_stats_csv(&text)
        .with_context(|| format!("stage power-model: parse {}", a.stats.display()))?;

    let mut out = String::new();
    if a.csv {
        out.push_str("id,component,joules,percent\n");
    }
    for (id, stats) in &rows {
        let bd = energy_unchecked(stats, &device, &currents, scale);
        for (label, joules) in COMPONENT_LABELS.iter().zip(bd.components()) {
            if joules < 0.0 {
                eprintln!("warning: {id}: negative {label} energy {joules:.3e} J; the currents are not physical for this trace");
            }
        }
        let report = breakdown_report(&bd);
        if a.csv {
            for r in &report.rows {
                let _ = writeln!(out, "{id},{},{},{}", r.component, r.joules, r.percent);
            }
        } else {
            let _ = writeln!(
                out,
                "{id}: {:.6e} J over {:.6} s, {:.4} W average",
                bd.e_total, bd.duration_s, bd.p_avg_w
            );
            let mut table = vec![vec!["component".into(), "joules".into(), "share".into()]];
            for r in &report.rows {
                table.push(vec![
                    r.component.to_string(),
                    format!("{:.6e}", r.joules),
                    format!("{:.2}%", r.percent),
                ]);
            }
            out.push_str(&render_table(&table));
            out.push('\n');
        }
    }
    write_or_stdout(a.out.as_deref(), &out)
}

fn baseline_cmd(a: BaselineArgs) -> Result<()> {
    let device = load_device(&a.device)?;
    let policy = if a.sort { SortPolicy::SortFirst } else { SortPolicy::Reject };
    let series = MeasurementSeries::load(&a.series, policy)
        .with_context(|| format!("stage measurement: {}", a.series.display()))?;
    let (t0, t1) = match a.window.as_deref() {
        Some([t0, t1]) => (*t0, *t1),
        _ => series.time_range(),
    };
    let est = static_baseline(&series, t0, t1, device.vdd, device.dimms_per_channel)
        .context("stage measurement")?;
    let table = vec![
        vec!["samples".into(), est.n_samples.to_string()],
        vec!["window".into(), format!("{t0} .. {t1} s")],
        vec!["mean power".into(), format!("{:.4} W", est.mean_power_w)],
        vec!["stddev".into(), format!("{:.4} W", est.stddev_w)],
        vec![
            "per-DIMM current".into(),
            format!(
                "{:.4} A ({} DIMMs at {} V)",
                est.current_per_dimm_a, device.dimms_per_channel, device.vdd
            ),
        ],
    ];
    print!("{}", render_table(&table));
    Ok(())
}

fn aggregate_cmd(a: AggregateArgs) -> Result<()> {
    let rows = aggregate_runs(&a.dir)
        .with_context(|| format!("stage measurement: {}", a.dir.display()))?;
    if a.csv {
        println!("bench,threads,channel,mean_power_w,n_runs");
        for r in &rows {
            println!("{},{},{},{},{}", r.bench, r.threads, r.channel, r.mean_power_w, r.n_runs);
        }
    } else {
        let mut table = vec![vec![
            "bench".into(),
            "threads".into(),
            "channel".into(),
            "mean power".into(),
            "runs".into(),
        ]];
        for r in &rows {
            table.push(vec![
                r.bench.clone(),
                r.threads.to_string(),
                r.channel.to_string(),
                format!("{:.4} W", r.mean_power_w),
                r.n_runs.to_string(),
            ]);
        }
        print!("{}", render_table(&table));
    }
    Ok(())
}

fn parse_map_samples(text: &str, path: &Path) -> Result<Vec<(u64, DramCoord)>> {
    let header = "address,channel,rank,bank_group,bank,row,column";
    let mut samples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line == header {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            bail!("{}:{}: expected 7 fields, got {}", path.display(), idx + 1, fields.len());
        }
        let addr = match fields[0].strip_prefix("0x") {
            Some(hex) => u64::from_str_radix(hex, 16),
            None => fields[0].parse(),
        }
        .with_context(|| format!("{}:{}: bad address {:?}", path.display(), idx + 1, fields[0]))?;
        let mut vals = [0u64; 6];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse()
                .with_context(|| format!("{}:{}: bad coordinate {f:?}", path.display(), idx + 1))?;
        }
        let [channel, rank, bank_group, bank, row, column] = vals;
        samples.push((addr, DramCoord { channel, rank, bank_group, bank, row, column }));
    }
    Ok(samples)
}

fn infer_map_cmd(a: InferMapArgs) -> Result<()> {
    let text = fs::read_to_string(&a.samples)
        .with_context(|| format!("stage address-map: read {}", a.samples.display()))?;
    let samples = parse_map_samples(&text, &a.samples).context("stage address-map")?;
    // Widths come from the largest observed value per coordinate.
    let bits = |coord: Coord| {
        let max = samples.iter().map(|(_, c)| c.get(coord)).max().unwrap_or(0);
        64 - max.leading_zeros()
    };
    let widths = CoordWidths {
        channel: bits(Coord::Channel),
        rank: bits(Coord::Rank),
        bank_group: bits(Coord::BankGroup),
        bank: bits(Coord::Bank),
        row: bits(Coord::Row),
        column: bits(Coord::Column),
    };
    let inferred =
        infer_mapping(&samples, &widths, a.address_bits).context("stage address-map")?;
    let r = &inferred.report;
    eprintln!(
        "{} samples, rank {}/{} ({} free)",
        samples.len(),
        r.rank,
        r.n_unknowns,
        r.free_vars
    );
    if !r.underdetermined.is_empty() {
        eprintln!(
            "warning: {} output bits are underdetermined; add samples that toggle more address bits",
            r.underdetermined.len()
        );
    }
    write_or_stdout(a.out.as_deref(), &inferred.mapping.to_text())
}

/// Human-readable fit report shared by `calibrate` and `pipeline`.
pub(crate) fn render_calibration_report(
    device: &DeviceSpec,
    result: &CalibrationResult,
) -> String {
    let ds = device.datasheet_currents();
    let mut out = String::new();
    let _ = writeln!(out, "calibration of {}", device.name);
    for w in &result.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out.push('\n');

    let mut table = vec![vec![
        "current".into(),
        "datasheet".into(),
        "fitted".into(),
        "note".into(),
    ]];
    for kind in CurrentKind::ALL {
        let note = if result.excluded.contains(&kind) { "held (zero column)" } else { "" };
        table.push(vec![
            kind.label().to_string(),
            format!("{:.4} A", ds.get(kind)),
            format!("{:.4} A", result.currents.get(kind)),
            note.to_string(),
        ]);
    }
    table.push(vec![
        "intercept".into(),
        "0".into(),
        format!("{:.4e} J", result.currents.intercept_j),
        String::new(),
    ]);
    out.push_str(&render_table(&table));
    out.push('\n');

    let d = &result.diagnostics;
    let _ = writeln!(out, "condition number: {:.3e}", d.condition_number);
    for (a, b, c) in &d.collinear_pairs {
        let _ = writeln!(
            out,
            "collinear: {} and {} (cosine {c:.6}); only their combination is determined",
            a.label(),
            b.label()
        );
    }
    for (kind, weak) in CurrentKind::ALL.iter().zip(&d.weak) {
        if *weak && !d.zero_columns.contains(kind) {
            let _ = writeln!(out, "weak column: {} is barely excited by these benchmarks", kind.label());
        }
    }
    let _ = writeln!(
        out,
        "solver: {} iterations, objective {:.6e}, KKT {}",
        result.iterations,
        result.objective,
        if result.kkt_satisfied { "satisfied" } else { "VIOLATED" }
    );
    out.push('\n');

    let mut fits = vec![vec![
        "bench".into(),
        "measured".into(),
        "model".into(),
        "rel err".into(),
    ]];
    for f in &result.per_bench {
        fits.push(vec![
            f.id.clone(),
            format!("{:.6e} J", f.measured_j),
            format!("{:.6e} J", f.model_j),
            format!("{:.3}%", f.rel_error * 100.0),
        ]);
    }
    out.push_str(&render_table(&fits));
    let _ = writeln!(
        out,
        "\navg rel error {:.3}%, max {:.3}%",
        result.avg_rel_error * 100.0,
        result.max_rel_error * 100.0
    );
    out
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let device = load_device(&a.device)?;
    let stats_text = fs::read_to_string(&a.stats)
        .with_context(|| format!("stage calibrate: read {}", a.stats.display()))?;
    let benches = parse_stats_csv(&stats_text)
        .with_context(|| format!("stage calibrate: parse {}", a.stats.display()))?;
    let energy_text = fs::read_to_string(&a.energies)
        .with_context(|| format!("stage calibrate: read {}", a.energies.display()))?;
    let energies = parse_energies_csv(&energy_text)
        .with_context(|| format!("stage calibrate: parse {}", a.energies.display()))?;

    let opts = ProblemOptions {
        fit_intercept: !a.no_intercept,
        weighted: a.weighted,
        use_gross: a.gross,
        geometry_scale: a.geometry_scale,
    };
    let problem = build_problem(&benches, &energies, &device, &opts).context("stage calibrate")?;
    let result = calibrate(&problem).context("stage calibrate")?;

    fs::write(&a.out, write_currents(&result.currents))
        .with_context(|| format!("stage calibrate: write {}", a.out.display()))?;
    let report = render_calibration_report(&device, &result);
    if let Some(path) = &a.report {
        fs::write(path, &report)
            .with_context(|| format!("stage calibrate: write {}", path.display()))?;
    }
    print!("{report}");
    eprintln!("currents written to {}", a.out.display());
    Ok(())
}

/// Joins stats rows with measured net energies by id; every stats id must
/// have a measurement.
fn join_measurements(
    benches: &[(String, CommandStats)],
    energies: &[dramcalib::measurement::RunEnergy],
) -> Result<Vec<(String, CommandStats, f64)>> {
    let by_id: std::collections::HashMap<&str, f64> =
        energies.iter().map(|e| (e.id.as_str(), e.net_j)).collect();
    benches
        .iter()
        .map(|(id, stats)| {
            by_id
                .get(id.as_str())
                .map(|net| (id.clone(), stats.clone(), *net))
                .with_context(|| format!("no measured energy for {id}"))
        })
        .collect()
}

pub(crate) fn validation_csv(rows: &[dramcalib::calibrate::ValidationRow]) -> String {
    let mut out =
        String::from("id,measured_j,datasheet_j,calibrated_j,datasheet_err,calibrated_err\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.id, r.measured_j, r.datasheet_j, r.calibrated_j, r.datasheet_err, r.calibrated_err
        );
    }
    out
}

pub(crate) fn validation_table(rows: &[dramcalib::calibrate::ValidationRow]) -> String {
    let mut table = vec![vec![
        "bench".into(),
        "measured".into(),
        "datasheet".into(),
        "calibrated".into(),
        "err before".into(),
        "err after".into(),
    ]];
    for r in rows {
        table.push(vec![
            r.id.clone(),
            format!("{:.6e} J", r.measured_j),
            format!("{:.6e} J", r.datasheet_j),
            format!("{:.6e} J", r.calibrated_j),
            format!("{:.2}%", r.datasheet_err * 100.0),
            format!("{:.2}%", r.calibrated_err * 100.0),
        ]);
    }
    render_table(&table)
}

fn validate_cmd(a: ValidateArgs) -> Result<()> {
    let device = load_device(&a.device)?;
    let currents = load_currents_file(&a.currents)?;
    let stats_text = fs::read_to_string(&a.stats)
        .with_context(|| format!("stage validate: read {}", a.stats.display()))?;
    let benches = parse_stats_csv(&stats_text)
        .with_context(|| format!("stage validate: parse {}", a.stats.display()))?;
    let energy_text = fs::read_to_string(&a.energies)
        .with_context(|| format!("stage validate: read {}", a.energies.display()))?;
    let energies = parse_energies_csv(&energy_text)
        .with_context(|| format!("stage validate: parse {}", a.energies.display()))?;
    let holdout = join_measurements(&benches, &energies).context("stage validate")?;
    let scale = a.geometry_scale.unwrap_or(f64::from(device.ranks));
    let rows = validate(&holdout, &device, &currents, scale);
    let text = if a.csv { validation_csv(&rows) } else { validation_table(&rows) };
    write_or_stdout(a.out.as_deref(), &text)
}
