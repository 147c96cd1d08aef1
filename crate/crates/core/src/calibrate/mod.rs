//! Fitting device currents to measured per-benchmark energy.
//!
//! Each benchmark contributes one linear equation: its coefficient row from
//! [`crate::power::coefficients`] times the unknown currents, plus the
//! datasheet-fixed constant, equals the measured energy. The currents are
//! found by bounded least squares between zero and the datasheet values
//! (datasheets quote worst case, so the truth sits below), with an optional
//! nonnegative intercept soaking up unmodeled constant energy.
//!
//! Workload sets rarely excite every current independently. ACT and PRE
//! counts are equal in any precharge-balanced trace, so their columns are
//! proportional and only their combination is determined; that is fine for
//! energy prediction but worth surfacing, which is what [`diagnose`] does.
//! Columns that are exactly zero (a current never exercised) are excluded
//! from the solve and held at their datasheet value.

pub mod bvls;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::device::{CalibratedCurrents, CurrentBounds, CurrentKind, DeviceSpec, N_CURRENTS};
use crate::measurement::RunEnergy;
use crate::power::{coefficients, CoefficientRow};
use crate::tracestats::CommandStats;
use bvls::{solve_bvls, BvlsError, BvlsOptions, KktEntry};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("benchmark ids do not match: missing energy for {missing:?}, unmatched energy for {extra:?}, duplicates {duplicate:?}")]
    IdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
        duplicate: Vec<String>,
    },
    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),
    #[error("solver failed: {0}")]
    Solver(#[from] BvlsError),
}

#[derive(Debug, Clone, Copy)]
pub struct ProblemOptions {
    /// Fit a nonnegative constant energy per benchmark.
    pub fit_intercept: bool,
    /// Weight rows by the inverse of their run-to-run spread.
    pub weighted: bool,
    /// Fit gross energy, folding each benchmark's static share into its
    /// constant term, instead of baseline-subtracted net energy.
    pub use_gross: bool,
    /// Channel geometry multiplier; defaults to the rank count.
    pub geometry_scale: Option<f64>,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        Self {
            fit_intercept: true,
            weighted: false,
            use_gross: false,
            geometry_scale: None,
        }
    }
}

/// A ready-to-solve calibration instance.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub ids: Vec<String>,
    /// One row per benchmark; `e_const` already includes the static share
    /// when fitting gross energy.
    pub rows: Vec<CoefficientRow>,
    /// Measured target energy per benchmark, joules.
    pub y: Vec<f64>,
    /// Run-to-run spread per benchmark, joules.
    pub stddev: Vec<f64>,
    pub bounds: CurrentBounds,
    pub datasheet: CalibratedCurrents,
    pub fit_intercept: bool,
    pub weighted: bool,
    pub warnings: Vec<String>,
}

/// Joins per-benchmark stats with measured energies by id and regroups the
/// model into solver form.
pub fn build_problem(
    benches: &[(String, CommandStats)],
    energies: &[RunEnergy],
    device: &DeviceSpec,
    opts: &ProblemOptions,
) -> Result<CalibrationProblem, CalibError> {
    let mut duplicate = Vec::new();
    let mut by_id = std::collections::HashMap::new();
    for e in energies {
        if by_id.insert(e.id.as_str(), e).is_some() {
            duplicate.push(e.id.clone());
        }
    }
    let mut seen = std::collections::HashSet::new();
    for (id, _) in benches {
        if !seen.insert(id.as_str()) {
            duplicate.push(id.clone());
        }
    }
    let missing: Vec<String> = benches
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !by_id.contains_key(id.as_str()))
        .cloned()
        .collect();
    let extra: Vec<String> = energies
        .iter()
        .map(|e| &e.id)
        .filter(|id| !seen.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() || !duplicate.is_empty() {
        return Err(CalibError::IdMismatch { missing, extra, duplicate });
    }

    let scale = opts.geometry_scale.unwrap_or_else(|| device.default_geometry_scale());
    let mut warnings = Vec::new();
    if benches.len() < 5 {
        warnings.push(format!(
            "only {} benchmark rows for 5 currents; expect bound-limited or non-unique fits",
            benches.len()
        ));
    }

    let mut ids = Vec::with_capacity(benches.len());
    let mut rows = Vec::with_capacity(benches.len());
    let mut y = Vec::with_capacity(benches.len());
    let mut stddev = Vec::with_capacity(benches.len());
    for (id, stats) in benches {
        let e = by_id[id.as_str()];
        let mut row = coefficients(stats, device, scale);
        if opts.use_gross {
            row.e_const += e.static_j;
            y.push(e.gross_j);
        } else {
            y.push(e.net_j);
        }
        rows.push(row);
        stddev.push(e.stddev_j);
        ids.push(id.clone());
    }
    if opts.weighted && stddev.iter().any(|&s| s <= 0.0) {
        warnings.push("some rows have zero spread; they keep unit weight".to_string());
    }

    Ok(CalibrationProblem {
        ids,
        rows,
        y,
        stddev,
        bounds: device.default_bounds(),
        datasheet: device.datasheet_currents(),
        fit_intercept: opts.fit_intercept,
        weighted: opts.weighted,
        warnings,
    })
}

/// Column-space health of a calibration instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    pub labels: Vec<&'static str>,
    pub column_norms: Vec<f64>,
    /// Cosine similarity between columns; zero columns read as zero.
    pub correlations: Vec<Vec<f64>>,
    /// Condition number of the column-normalised nonzero block; at least 1,
    /// infinite when columns are linearly dependent.
    pub condition_number: f64,
    /// Norm below 1e-3 of the largest: barely excited.
    pub weak: Vec<bool>,
    /// Pairs with |cosine| above 0.99; only their combination is fit.
    pub collinear_pairs: Vec<(CurrentKind, CurrentKind, f64)>,
    /// Exactly-zero columns, excluded from the solve.
    pub zero_columns: Vec<CurrentKind>,
}

/// Inspects the current columns of a problem before solving it.
pub fn diagnose(rows: &[CoefficientRow]) -> ObservabilityReport {
    let m = rows.len();
    let cols: Vec<Vec<f64>> = (0..N_CURRENTS)
        .map(|k| rows.iter().map(|r| r.coeffs[k]).collect())
        .collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero: Vec<bool> = cols.iter().map(|c| c.iter().all(|&v| v == 0.0)).collect();

    let mut correlations = vec![vec![0.0; N_CURRENTS]; N_CURRENTS];
    for i in 0..N_CURRENTS {
        for j in 0..N_CURRENTS {
            if zero[i] || zero[j] {
                continue;
            }
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            correlations[i][j] = dot / (norms[i] * norms[j]);
        }
    }

    let nonzero: Vec<usize> = (0..N_CURRENTS).filter(|&k| !zero[k]).collect();
    let condition_number = if nonzero.is_empty() {
        f64::INFINITY
    } else {
        let a = DMatrix::from_fn(m, nonzero.len(), |r, c| {
            cols[nonzero[c]][r] / norms[nonzero[c]]
        });
        let sv = a.svd(false, false).singular_values;
        let smax = sv.iter().cloned().fold(0.0f64, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        // Fewer rows than columns cannot determine the columns either.
        if m < nonzero.len() || smin <= smax * 1e-14 {
            f64::INFINITY
        } else {
            (smax / smin).max(1.0)
        }
    };

    let max_norm = norms.iter().cloned().fold(0.0f64, f64::max);
    let weak = norms.iter().map(|&n| n < 1e-3 * max_norm || n == 0.0).collect();
    let mut collinear_pairs = Vec::new();
    for i in 0..N_CURRENTS {
        for j in (i + 1)..N_CURRENTS {
            if !zero[i] && !zero[j] && correlations[i][j].abs() > 0.99 {
                collinear_pairs.push((CurrentKind::ALL[i], CurrentKind::ALL[j], correlations[i][j]));
            }
        }
    }
    ObservabilityReport {
        labels: CurrentKind::ALL.iter().map(|k| k.label()).collect(),
        column_norms: norms,
        correlations,
        condition_number,
        weak,
        collinear_pairs,
        zero_columns: (0..N_CURRENTS).filter(|&k| zero[k]).map(|k| CurrentKind::ALL[k]).collect(),
    }
}

/// Fit quality of one benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchFit {
    pub id: String,
    pub measured_j: f64,
    pub model_j: f64,
    pub residual_j: f64,
    /// |residual| relative to the model energy.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub currents: CalibratedCurrents,
    /// Currents held at datasheet values because their column was zero.
    pub excluded: Vec<CurrentKind>,
    pub per_bench: Vec<BenchFit>,
    pub avg_rel_error: f64,
    pub max_rel_error: f64,
    /// Solver objective in the (possibly weighted) solver space.
    pub objective: f64,
    pub iterations: usize,
    /// KKT entries keyed by solved column label, intercept last.
    pub kkt: Vec<(String, KktEntry)>,
    pub kkt_satisfied: bool,
    pub diagnostics: ObservabilityReport,
    pub warnings: Vec<String>,
}

fn rel_error(residual: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (residual / reference).abs()
    }
}

/// Solves a calibration problem. Deterministic: the same problem yields the
/// same currents bit for bit.
pub fn calibrate(problem: &CalibrationProblem) -> Result<CalibrationResult, CalibError> {
    let m = problem.rows.len();
    if m == 0 {
        return Err(CalibError::DegenerateProblem("no benchmark rows".to_string()));
    }
    let mut warnings = problem.warnings.clone();
    let diagnostics = diagnose(&problem.rows);
    let active: Vec<usize> = (0..N_CURRENTS)
        .filter(|&k| !diagnostics.zero_columns.contains(&CurrentKind::ALL[k]))
        .collect();
    if active.is_empty() {
        return Err(CalibError::DegenerateProblem(
            "every current column is zero; the trace set exercises nothing".to_string(),
        ));
    }
    if !diagnostics.collinear_pairs.is_empty() {
        for (a, b, c) in &diagnostics.collinear_pairs {
            warnings.push(format!(
                "columns {} and {} are collinear (cosine {c:.4}); only their combination is determined",
                a.label(),
                b.label()
            ));
        }
    }

    let n_cols = active.len() + usize::from(problem.fit_intercept);
    let mut a = DMatrix::zeros(m, n_cols);
    let mut y = DVector::zeros(m);
    let mut lower = DVector::zeros(n_cols);
    let mut upper = DVector::zeros(n_cols);
    for (c, &k) in active.iter().enumerate() {
        lower[c] = problem.bounds.lower[k];
        upper[c] = problem.bounds.upper[k];
    }
    if problem.fit_intercept {
        lower[n_cols - 1] = 0.0;
        upper[n_cols - 1] = f64::INFINITY;
    }
    for r in 0..m {
        let w = if problem.weighted && problem.stddev[r] > 0.0 {
            1.0 / problem.stddev[r]
        } else {
            1.0
        };
        for (c, &k) in active.iter().enumerate() {
            a[(r, c)] = problem.rows[r].coeffs[k] * w;
        }
        if problem.fit_intercept {
            a[(r, n_cols - 1)] = w;
        }
        y[r] = (problem.y[r] - problem.rows[r].e_const) * w;
    }

    // Coefficients are joules per ampere while the intercept column is all
    // ones; equilibrate the columns so the solver sees a sane spectrum, and
    // scale the bounds to match.
    let mut col_scale = vec![1.0; n_cols];
    for c in 0..n_cols {
        let norm = a.column(c).norm();
        if norm > 0.0 {
            col_scale[c] = norm;
            for r in 0..m {
                a[(r, c)] /= norm;
            }
            lower[c] *= norm;
            upper[c] *= norm;
        }
    }

    let mut solution = solve_bvls(&a, &y, &lower, &upper, &BvlsOptions::default())?;
    for c in 0..n_cols {
        solution.x[c] /= col_scale[c];
    }

    let mut fitted = problem.datasheet;
    fitted.intercept_j = 0.0;
    let mut arr = fitted.as_array();
    for (c, &k) in active.iter().enumerate() {
        arr[k] = solution.x[c];
    }
    fitted = CalibratedCurrents::from_array(arr, if problem.fit_intercept {
        solution.x[n_cols - 1]
    } else {
        0.0
    });
    // Excluded currents keep their datasheet value.
    let ds = problem.datasheet.as_array();
    let mut arr = fitted.as_array();
    for k in 0..N_CURRENTS {
        if !active.contains(&k) {
            arr[k] = ds[k];
        }
    }
    let fitted = CalibratedCurrents::from_array(arr, fitted.intercept_j);

    let mut per_bench = Vec::with_capacity(m);
    let mut sum_rel = 0.0;
    let mut max_rel = 0.0f64;
    for r in 0..m {
        // Excluded columns are zero, so their datasheet values drop out of
        // the prediction no matter what sits in `fitted`.
        let model = problem.rows[r].predict(&fitted);
        let residual = model - problem.y[r];
        let rel = rel_error(residual, model);
        sum_rel += rel;
        max_rel = max_rel.max(rel);
        per_bench.push(BenchFit {
            id: problem.ids[r].clone(),
            measured_j: problem.y[r],
            model_j: model,
            residual_j: residual,
            rel_error: rel,
        });
    }

    let mut kkt = Vec::with_capacity(n_cols);
    for (c, &k) in active.iter().enumerate() {
        kkt.push((CurrentKind::ALL[k].label().to_string(), solution.kkt.entries[c]));
    }
    if problem.fit_intercept {
        kkt.push(("intercept".to_string(), solution.kkt.entries[n_cols - 1]));
    }

    Ok(CalibrationResult {
        currents: fitted,
        excluded: diagnostics.zero_columns.clone(),
        per_bench,
        avg_rel_error: sum_rel / m as f64,
        max_rel_error: max_rel,
        objective: solution.objective,
        iterations: solution.iterations,
        kkt,
        kkt_satisfied: solution.kkt.satisfied,
        diagnostics,
        warnings,
    })
}

/// Model-vs-measured comparison of one holdout benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub id: String,
    pub measured_j: f64,
    pub datasheet_j: f64,
    pub calibrated_j: f64,
    /// |model - measured| / |measured| before calibration.
    pub datasheet_err: f64,
    /// Same after calibration.
    pub calibrated_err: f64,
}

/// Predicts holdout energies with datasheet and calibrated currents and
/// reports both errors against the measured net energy.
pub fn validate(
    holdout: &[(String, CommandStats, f64)],
    device: &DeviceSpec,
    fitted: &CalibratedCurrents,
    geometry_scale: f64,
) -> Vec<ValidationRow> {
    let datasheet = device.datasheet_currents();
    holdout
        .iter()
        .map(|(id, stats, measured)| {
            let row = coefficients(stats, device, geometry_scale);
            let pre = row.predict(&datasheet);
            let post = row.predict(fitted);
            ValidationRow {
                id: id.clone(),
                measured_j: *measured,
                datasheet_j: pre,
                calibrated_j: post,
                datasheet_err: rel_error(pre - measured, *measured),
                calibrated_err: rel_error(post - measured, *measured),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{busy_stats, consistent_stats, ddr4};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn planted_currents(dev: &DeviceSpec, scale: f64, intercept: f64) -> CalibratedCurrents {
        let ds = dev.datasheet_currents();
        CalibratedCurrents {
            i_act: ds.i_act * scale,
            i_pre: ds.i_pre * scale,
            i_asb: ds.i_asb * scale,
            i_rd: ds.i_rd * scale,
            i_wr: ds.i_wr * scale,
            intercept_j: intercept,
        }
    }

    fn energy_of(id: &str, net: f64, stddev: f64) -> RunEnergy {
        RunEnergy {
            id: id.to_string(),
            gross_j: net,
            static_j: 0.0,
            net_j: net,
            duration_s: 1.0,
            n_runs: 3,
            stddev_j: stddev,
        }
    }

    fn stream_problem(
        dev: &DeviceSpec,
        truth: &CalibratedCurrents,
        n: usize,
        seed: u64,
        opts: &ProblemOptions,
    ) -> CalibrationProblem {
        let mut rng = StdRng::seed_from_u64(seed);
        let scale = dev.default_geometry_scale();
        let mut benches = Vec::new();
        let mut energies = Vec::new();
        for i in 0..n {
            let stats = busy_stats(&mut rng, dev);
            let e = coefficients(&stats, dev, scale).predict(truth);
            benches.push((format!("bench{i}"), stats));
            energies.push(energy_of(&format!("bench{i}"), e, 1e-4 * e));
        }
        build_problem(&benches, &energies, dev, opts).unwrap()
    }

    #[test]
    fn full_rank_rows_recover_planted_currents_exactly() {
        // Hand-built rows with independent columns; no trace could make
        // them (ACT and PRE always move together), which is the point.
        let dev = ddr4();
        let mut rng = StdRng::seed_from_u64(17);
        let ds = dev.datasheet_currents();
        let truth = planted_currents(&dev, 0.6, 0.002);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..12 {
            let mut coeffs = [0.0; N_CURRENTS];
            for c in coeffs.iter_mut() {
                *c = rng.random_range(0.01..1.0);
            }
            let row = CoefficientRow { coeffs, e_const: rng.random_range(0.0..0.01) };
            y.push(row.predict(&truth));
            rows.push(row);
        }
        let problem = CalibrationProblem {
            ids: (0..12).map(|i| format!("r{i}")).collect(),
            rows,
            y,
            stddev: vec![0.0; 12],
            bounds: dev.default_bounds(),
            datasheet: ds,
            fit_intercept: true,
            weighted: false,
            warnings: Vec::new(),
        };
        let result = calibrate(&problem).unwrap();
        assert!(result.kkt_satisfied);
        let got = result.currents.as_array();
        let want = truth.as_array();
        for k in 0..N_CURRENTS {
            assert_relative_eq!(got[k], want[k], max_relative = 1e-6);
        }
        assert_relative_eq!(result.currents.intercept_j, 0.002, max_relative = 1e-4);
        assert!(result.avg_rel_error < 1e-8, "{}", result.avg_rel_error);
    }

    #[test]
    fn stream_rows_fit_energy_exactly_despite_act_pre_collinearity() {
        let dev = ddr4();
        let truth = planted_currents(&dev, 0.55, 0.0);
        let problem = stream_problem(&dev, &truth, 9, 5, &ProblemOptions::default());
        let result = calibrate(&problem).unwrap();
        assert!(result.kkt_satisfied);
        assert!(result.avg_rel_error < 1e-7, "{}", result.avg_rel_error);
        // The collinearity must be called out.
        assert!(result
            .diagnostics
            .collinear_pairs
            .iter()
            .any(|(a, b, _)| (*a, *b) == (CurrentKind::Act, CurrentKind::Pre)));
        assert!(result.diagnostics.condition_number.is_infinite());

        // Holdout generalization: ACT/PRE keep the same ratio in any
        // precharge-balanced trace, so predictions transfer exactly.
        let scale = dev.default_geometry_scale();
        let mut rng = StdRng::seed_from_u64(999);
        let holdout: Vec<(String, CommandStats, f64)> = (0..5)
            .map(|i| {
                let stats = consistent_stats(&mut rng, &dev);
                let e = coefficients(&stats, &dev, scale).predict(&truth);
                (format!("holdout{i}"), stats, e)
            })
            .collect();
        let rows = validate(&holdout, &dev, &result.currents, scale);
        for row in rows {
            assert!(row.calibrated_err < 1e-7, "{}: {}", row.id, row.calibrated_err);
            assert!(row.datasheet_err > 0.3, "datasheet should overpredict");
        }
    }

    #[test]
    fn zero_write_column_is_excluded_and_held_at_datasheet() {
        let dev = ddr4();
        let scale = dev.default_geometry_scale();
        let truth = planted_currents(&dev, 0.62, 0.0);
        let mut rng = StdRng::seed_from_u64(23);
        let mut benches = Vec::new();
        let mut energies = Vec::new();
        for i in 0..8 {
            let mut stats = consistent_stats(&mut rng, &dev);
            // Read-only campaign: writes never happen.
            stats.n_wr = 0;
            let e = coefficients(&stats, &dev, scale).predict(&truth);
            benches.push((format!("ro{i}"), stats));
            energies.push(energy_of(&format!("ro{i}"), e, 0.0));
        }
        let problem = build_problem(&benches, &energies, &dev, &ProblemOptions::default()).unwrap();
        let result = calibrate(&problem).unwrap();
        assert_eq!(result.excluded, vec![CurrentKind::Wr]);
        assert_eq!(result.currents.i_wr, dev.idd.idd4w);
        assert!(result.avg_rel_error < 1e-7, "{}", result.avg_rel_error);
        assert!(result.diagnostics.zero_columns.contains(&CurrentKind::Wr));
        assert!(result.diagnostics.weak[CurrentKind::Wr.index()]);
    }

    #[test]
    fn datasheet_bias_is_corrected_to_under_five_percent() {
        let dev = ddr4();
        let truth = planted_currents(&dev, 0.5, 0.0);
        let problem = stream_problem(&dev, &truth, 10, 88, &ProblemOptions::default());
        // Datasheet predictions sit far above measurements before the fit.
        let ds = dev.datasheet_currents();
        for (row, y) in problem.rows.iter().zip(&problem.y) {
            let ratio = row.predict(&ds) / y;
            assert!(ratio > 1.3, "expected heavy overprediction, got {ratio}");
        }
        let result = calibrate(&problem).unwrap();
        assert!(result.max_rel_error < 0.05, "{}", result.max_rel_error);
    }

    #[test]
    fn id_mismatch_is_rejected_with_details() {
        let dev = ddr4();
        let mut rng = StdRng::seed_from_u64(3);
        let stats = consistent_stats(&mut rng, &dev);
        let benches = vec![("a".to_string(), stats.clone()), ("b".to_string(), stats)];
        let energies = vec![energy_of("a", 1.0, 0.0), energy_of("c", 1.0, 0.0)];
        let err = build_problem(&benches, &energies, &dev, &ProblemOptions::default()).unwrap_err();
        match err {
            CalibError::IdMismatch { missing, extra, duplicate } => {
                assert_eq!(missing, vec!["b"]);
                assert_eq!(extra, vec!["c"]);
                assert!(duplicate.is_empty());
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dev = ddr4();
        let mut rng = StdRng::seed_from_u64(4);
        let stats = consistent_stats(&mut rng, &dev);
        let benches = vec![("a".to_string(), stats.clone()), ("a".to_string(), stats)];
        let energies = vec![energy_of("a", 1.0, 0.0)];
        assert!(matches!(
            build_problem(&benches, &energies, &dev, &ProblemOptions::default()),
            Err(CalibError::IdMismatch { .. })
        ));
    }

    #[test]
    fn gross_mode_recovers_the_same_currents_as_net_mode() {
        let dev = ddr4();
        let truth = planted_currents(&dev, 0.58, 2e-7);
        let scale = dev.default_geometry_scale();
        let mut rng = StdRng::seed_from_u64(31);
        let mut benches = Vec::new();
        let mut energies = Vec::new();
        for i in 0..10 {
            let stats = consistent_stats(&mut rng, &dev);
            let net = coefficients(&stats, &dev, scale).predict(&truth);
            let static_j = rng.random_range(0.01..0.05);
            benches.push((format!("b{i}"), stats));
            energies.push(RunEnergy {
                id: format!("b{i}"),
                gross_j: net + static_j,
                static_j,
                net_j: net,
                duration_s: 1.0,
                n_runs: 3,
                stddev_j: 0.0,
            });
        }
        let net_problem =
            build_problem(&benches, &energies, &dev, &ProblemOptions::default()).unwrap();
        let gross_problem = build_problem(
            &benches,
            &energies,
            &dev,
            &ProblemOptions { use_gross: true, ..Default::default() },
        )
        .unwrap();
        let net_fit = calibrate(&net_problem).unwrap();
        let gross_fit = calibrate(&gross_problem).unwrap();
        // ACT and PRE are collinear, so only their combination is pinned
        // down; the other three currents and the combination must agree.
        let t = &dev.timings;
        let comb = |c: &CalibratedCurrents| f64::from(t.tras) * c.i_act + f64::from(t.trp) * c.i_pre;
        assert_relative_eq!(comb(&net_fit.currents), comb(&gross_fit.currents), max_relative = 1e-6);
        assert_relative_eq!(net_fit.currents.i_asb, gross_fit.currents.i_asb, max_relative = 1e-6);
        assert_relative_eq!(net_fit.currents.i_rd, gross_fit.currents.i_rd, max_relative = 1e-6);
        assert_relative_eq!(net_fit.currents.i_wr, gross_fit.currents.i_wr, max_relative = 1e-6);
        assert!(net_fit.avg_rel_error < 1e-7, "{}", net_fit.avg_rel_error);
        assert!(gross_fit.avg_rel_error < 1e-7, "{}", gross_fit.avg_rel_error);
    }

    #[test]
    fn weighting_pulls_the_fit_toward_tight_rows() {
        let dev = ddr4();
        let truth = planted_currents(&dev, 0.6, 0.0);
        let scale = dev.default_geometry_scale();
        let mut rng = StdRng::seed_from_u64(77);
        let mut benches = Vec::new();
        let mut energies = Vec::new();
        for i in 0..8 {
            let stats = consistent_stats(&mut rng, &dev);
            let e = coefficients(&stats, &dev, scale).predict(&truth);
            // One wildly corrupted, visibly noisy row.
            let (value, spread) = if i == 0 { (e * 1.8, e) } else { (e, 1e-5 * e) };
            benches.push((format!("b{i}"), stats));
            energies.push(energy_of(&format!("b{i}"), value, spread));
        }
        let unweighted = calibrate(
            &build_problem(&benches, &energies, &dev, &ProblemOptions::default()).unwrap(),
        )
        .unwrap();
        let weighted = calibrate(
            &build_problem(
                &benches,
                &energies,
                &dev,
                &ProblemOptions { weighted: true, ..Default::default() },
            )
            .unwrap(),
        )
        .unwrap();
        let err_on_clean = |r: &CalibrationResult| -> f64 {
            r.per_bench[1..].iter().map(|b| b.rel_error).sum::<f64>() / (r.per_bench.len() - 1) as f64
        };
        assert!(
            err_on_clean(&weighted) < err_on_clean(&unweighted) * 0.5,
            "weighted {} vs unweighted {}",
            err_on_clean(&weighted),
            err_on_clean(&unweighted)
        );
    }

    #[test]
    fn empty_problem_is_degenerate() {
        let dev = ddr4();
        let problem = CalibrationProblem {
            ids: vec![],
            rows: vec![],
            y: vec![],
            stddev: vec![],
            bounds: dev.default_bounds(),
            datasheet: dev.datasheet_currents(),
            fit_intercept: true,
            weighted: false,
            warnings: Vec::new(),
        };
        assert!(matches!(calibrate(&problem), Err(CalibError::DegenerateProblem(_))));
    }

    #[test]
    fn all_zero_columns_are_degenerate() {
        let dev = ddr4();
        let problem = CalibrationProblem {
            ids: vec!["idle".to_string()],
            rows: vec![CoefficientRow { coeffs: [0.0; N_CURRENTS], e_const: 1.0 }],
            y: vec![1.0],
            stddev: vec![0.0],
            bounds: dev.default_bounds(),
            datasheet: dev.datasheet_currents(),
            fit_intercept: true,
            weighted: false,
            warnings: Vec::new(),
        };
        assert!(matches!(calibrate(&problem), Err(CalibError::DegenerateProblem(_))));
    }

    #[test]
    fn diagnose_reports_identity_condition_for_orthogonal_columns() {
        let mut rows = Vec::new();
        for k in 0..N_CURRENTS {
            let mut coeffs = [0.0; N_CURRENTS];
            coeffs[k] = 1.0 + k as f64;
            rows.push(CoefficientRow { coeffs, e_const: 0.0 });
        }
        let report = diagnose(&rows);
        assert_relative_eq!(report.condition_number, 1.0, max_relative = 1e-9);
        assert!(report.collinear_pairs.is_empty());
        assert!(report.zero_columns.is_empty());
        for i in 0..N_CURRENTS {
            assert_relative_eq!(report.correlations[i][i], 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn diagnose_flags_duplicated_columns() {
        let mut rng = StdRng::seed_from_u64(13);
        let mut rows = Vec::new();
        for _ in 0..6 {
            let shared = rng.random_range(0.1..1.0);
            let mut coeffs = [0.0; N_CURRENTS];
            coeffs[0] = shared;
            coeffs[1] = 2.0 * shared;
            coeffs[2] = rng.random_range(0.1..1.0);
            coeffs[3] = rng.random_range(0.1..1.0);
            coeffs[4] = rng.random_range(0.1..1.0);
            rows.push(CoefficientRow { coeffs, e_const: 0.0 });
        }
        let report = diagnose(&rows);
        assert!(report
            .collinear_pairs
            .iter()
            .any(|(a, b, c)| (*a, *b) == (CurrentKind::Act, CurrentKind::Pre) && *c > 0.999));
        assert!(report.condition_number.is_infinite());
    }

    #[test]
    fn calibration_is_deterministic() {
        let dev = ddr4();
        let truth = planted_currents(&dev, 0.5, 1e-7);
        let problem = stream_problem(&dev, &truth, 7, 42, &ProblemOptions::default());
        let a = calibrate(&problem).unwrap();
        let b = calibrate(&problem).unwrap();
        for (x, y) in a.currents.as_array().iter().zip(b.currents.as_array()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.currents.intercept_j.to_bits(), b.currents.intercept_j.to_bits());
    }

    #[test]
    fn under_determined_row_count_warns() {
        let dev = ddr4();
        let truth = planted_currents(&dev, 0.5, 0.0);
        let problem = stream_problem(&dev, &truth, 3, 1, &ProblemOptions::default());
        assert!(problem.warnings.iter().any(|w| w.contains("3 benchmark rows")));
    }
}
