//! Linear energy model over command counts and standby dwell.
//!
//! Every component is the product of a voltage, a current delta, a time, and
//! a count, scaled by the channel geometry (per-rank currents summed over
//! ranks by default):
//!
//! * activate and precharge pulses pay the current above the surrounding
//!   standby level for tRAS and tRP respectively,
//! * read and write bursts pay their current above active standby for one
//!   burst time each,
//! * refresh pays IDD5B above precharge standby for tRFC,
//! * the two standby terms pay their full current for the accumulated dwell,
//! * the intercept absorbs anything the linear terms cannot, in joules.
//!
//! The same model regrouped by current yields one coefficient per calibrated
//! current plus a constant; [`CoefficientRow::predict`] and [`energy`] agree
//! to rounding for any stats whose dwell covers the command windows.

use thiserror::Error;

use crate::device::{CalibratedCurrents, CurrentKind, DeviceSpec, N_CURRENTS};
use crate::tracestats::CommandStats;

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("{component} energy is negative ({joules:.3e} J): currents are inconsistent with the device standby levels")]
    NegativeComponent { component: &'static str, joules: f64 },
}

/// Per-component energy for one trace, in joules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub e_act: f64,
    pub e_pre: f64,
    pub e_rd: f64,
    pub e_wr: f64,
    pub e_ref: f64,
    pub e_bg_act: f64,
    pub e_bg_pre: f64,
    pub e_intercept: f64,
    pub e_total: f64,
    /// Trace duration in seconds (`c_total * tck`).
    pub duration_s: f64,
    /// `e_total / duration_s`; zero for an empty trace.
    pub p_avg_w: f64,
}

pub const COMPONENT_LABELS: [&str; 8] = [
    "act", "pre", "rd", "wr", "ref", "bg_act", "bg_pre", "intercept",
];

impl EnergyBreakdown {
    pub fn components(&self) -> [f64; 8] {
        [
            self.e_act,
            self.e_pre,
            self.e_rd,
            self.e_wr,
            self.e_ref,
            self.e_bg_act,
            self.e_bg_pre,
            self.e_intercept,
        ]
    }
}

/// Computes the breakdown without sign checks. Prefer [`energy`] outside of
/// solver internals.
pub fn energy_unchecked(
    stats: &CommandStats,
    device: &DeviceSpec,
    currents: &CalibratedCurrents,
    geometry_scale: f64,
) -> EnergyBreakdown {
    let v = device.vdd;
    let tck = device.tck_s();
    let tburst = device.tburst_s();
    let t = &device.timings;
    let idd = &device.idd;
    let s = geometry_scale;

    let e_act = v * (currents.i_act - currents.i_asb) * f64::from(t.tras) * tck * stats.n_act as f64 * s;
    let e_pre = v * (currents.i_pre - idd.idd2n) * f64::from(t.trp) * tck * stats.n_pre as f64 * s;
    let e_rd = v * (currents.i_rd - currents.i_asb) * tburst * stats.n_rd as f64 * s;
    let e_wr = v * (currents.i_wr - currents.i_asb) * tburst * stats.n_wr as f64 * s;
    let e_ref = v * (idd.idd5b - idd.idd2n) * f64::from(t.trfc) * tck * stats.n_ref as f64 * s;
    let e_bg_act = v * tck * stats.c_act_stdby as f64 * currents.i_asb * s;
    let e_bg_pre = v * tck * stats.c_pre_stdby as f64 * idd.idd2n * s;
    let e_intercept = currents.intercept_j;

    let e_total = e_act + e_pre + e_rd + e_wr + e_ref + e_bg_act + e_bg_pre + e_intercept;
    let duration_s = stats.c_total as f64 * tck;
    let p_avg_w = if duration_s > 0.0 { e_total / duration_s } else { 0.0 };
    EnergyBreakdown {
        e_act,
        e_pre,
        e_rd,
        e_wr,
        e_ref,
        e_bg_act,
        e_bg_pre,
        e_intercept,
        e_total,
        duration_s,
        p_avg_w,
    }
}

/// Computes the per-component breakdown, rejecting current sets that drive
/// any component negative (for example a read current below active standby).
pub fn energy(
    stats: &CommandStats,
    device: &DeviceSpec,
    currents: &CalibratedCurrents,
    geometry_scale: f64,
) -> Result<EnergyBreakdown, PowerError> {
    let bd = energy_unchecked(stats, device, currents, geometry_scale);
    for (component, joules) in COMPONENT_LABELS.iter().zip(bd.components()) {
        if *component == "intercept" {
            continue;
        }
        if joules < 0.0 {
            return Err(PowerError::NegativeComponent { component, joules });
        }
    }
    Ok(bd)
}

/// The energy model regrouped by calibrated current: `e_total` equals
/// `coeffs . currents + e_const + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientRow {
    /// Joules per ampere for each of [`CurrentKind::ALL`].
    pub coeffs: [f64; N_CURRENTS],
    /// Energy fixed by datasheet currents (precharge standby and refresh).
    pub e_const: f64,
}

impl CoefficientRow {
    pub fn coeff(&self, kind: CurrentKind) -> f64 {
        self.coeffs[kind.index()]
    }

    /// Model energy for a current vector, regrouped form.
    pub fn predict(&self, currents: &CalibratedCurrents) -> f64 {
        let x = currents.as_array();
        let mut e = 0.0;
        for k in 0..N_CURRENTS {
            e += self.coeffs[k] * x[k];
        }
        e + self.e_const + currents.intercept_j
    }
}

/// Regroups the model by current for one trace.
pub fn coefficients(stats: &CommandStats, device: &DeviceSpec, geometry_scale: f64) -> CoefficientRow {
    let v = device.vdd;
    let tck = device.tck_s();
    let tburst = device.tburst_s();
    let t = &device.timings;
    let idd = &device.idd;
    let s = geometry_scale;

    let act_pulse = f64::from(t.tras) * tck * stats.n_act as f64;
    let pre_pulse = f64::from(t.trp) * tck * stats.n_pre as f64;
    let rd_burst = tburst * stats.n_rd as f64;
    let wr_burst = tburst * stats.n_wr as f64;

    let mut coeffs = [0.0; N_CURRENTS];
    coeffs[CurrentKind::Act.index()] = v * act_pulse * s;
    coeffs[CurrentKind::Pre.index()] = v * pre_pulse * s;
    coeffs[CurrentKind::Rd.index()] = v * rd_burst * s;
    coeffs[CurrentKind::Wr.index()] = v * wr_burst * s;
    // Active standby collects its own dwell minus every window already paid
    // above the standby level.
    coeffs[CurrentKind::Asb.index()] =
        v * (tck * stats.c_act_stdby as f64 - act_pulse - rd_burst - wr_burst) * s;

    let e_const = v
        * (tck * stats.c_pre_stdby as f64 * idd.idd2n - pre_pulse * idd.idd2n
            + (idd.idd5b - idd.idd2n) * f64::from(t.trfc) * tck * stats.n_ref as f64)
        * s;
    CoefficientRow { coeffs, e_const }
}

/// One line of a sorted per-component report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakdownRow {
    pub component: &'static str,
    pub joules: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownReport {
    /// Rows sorted by energy, largest first; model order breaks ties.
    pub rows: Vec<BreakdownRow>,
    /// Set when the trace carries no energy at all.
    pub empty: bool,
}

pub fn breakdown_report(bd: &EnergyBreakdown) -> BreakdownReport {
    let empty = bd.e_total == 0.0;
    let mut rows: Vec<BreakdownRow> = COMPONENT_LABELS
        .iter()
        .zip(bd.components())
        .map(|(component, joules)| BreakdownRow {
            component,
            joules,
            percent: if empty { 0.0 } else { joules / bd.e_total * 100.0 },
        })
        .collect();
    rows.sort_by(|a, b| b.joules.partial_cmp(&a.joules).unwrap());
    BreakdownReport { rows, empty }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceSpec;
    use crate::testutil::{consistent_stats, ddr4, ddr4_single_rank};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn stats_zero() -> CommandStats {
        CommandStats {
            n_act: 0,
            n_pre: 0,
            n_rd: 0,
            n_wr: 0,
            n_ref: 0,
            c_total: 0,
            c_act_stdby: 0,
            c_pre_stdby: 0,
            per_bank: Vec::new(),
        }
    }

    #[test]
    fn pure_precharge_standby_worked_example() {
        // 1e9 idle cycles at 0.75 ns and 40 mA on 1.2 V: 1.2*0.04*0.75 = 36 mJ.
        let mut dev: DeviceSpec = ddr4_single_rank();
        dev.tck_ns = 0.75;
        dev.idd.idd2n = 0.040;
        let mut stats = stats_zero();
        stats.c_total = 1_000_000_000;
        stats.c_pre_stdby = 1_000_000_000;
        let bd = energy(&stats, &dev, &dev.datasheet_currents(), 1.0).unwrap();
        assert_relative_eq!(bd.e_bg_pre, 0.036, max_relative = 1e-12);
        assert_relative_eq!(bd.e_total, 0.036, max_relative = 1e-12);
        assert_eq!(bd.e_act, 0.0);
        assert_eq!(bd.e_ref, 0.0);
        assert_relative_eq!(bd.duration_s, 0.75, max_relative = 1e-12);
        assert_relative_eq!(bd.p_avg_w, 0.048, max_relative = 1e-12);
    }

    #[test]
    fn activate_energy_vanishes_at_the_standby_level() {
        let dev = ddr4();
        let mut currents = dev.datasheet_currents();
        currents.i_act = currents.i_asb;
        let stats = consistent_stats(&mut StdRng::seed_from_u64(7), &dev);
        let bd = energy(&stats, &dev, &currents, dev.default_geometry_scale()).unwrap();
        assert_eq!(bd.e_act, 0.0);
    }

    #[test]
    fn doubling_counts_doubles_everything_but_the_intercept() {
        let dev = ddr4();
        let mut currents = dev.datasheet_currents();
        currents.intercept_j = 0.5;
        let stats = consistent_stats(&mut StdRng::seed_from_u64(3), &dev);
        let mut doubled = stats.clone();
        doubled.n_act *= 2;
        doubled.n_pre *= 2;
        doubled.n_rd *= 2;
        doubled.n_wr *= 2;
        doubled.n_ref *= 2;
        doubled.c_total *= 2;
        doubled.c_act_stdby *= 2;
        doubled.c_pre_stdby *= 2;
        let a = energy(&stats, &dev, &currents, 2.0).unwrap();
        let b = energy(&doubled, &dev, &currents, 2.0).unwrap();
        // Doubling integer counts scales each product exactly.
        assert_eq!(b.e_act, 2.0 * a.e_act);
        assert_eq!(b.e_pre, 2.0 * a.e_pre);
        assert_eq!(b.e_rd, 2.0 * a.e_rd);
        assert_eq!(b.e_wr, 2.0 * a.e_wr);
        assert_eq!(b.e_ref, 2.0 * a.e_ref);
        assert_eq!(b.e_bg_act, 2.0 * a.e_bg_act);
        assert_eq!(b.e_bg_pre, 2.0 * a.e_bg_pre);
        assert_eq!(b.e_intercept, a.e_intercept);
    }

    #[test]
    fn read_current_below_standby_is_rejected() {
        let dev = ddr4();
        let mut currents = dev.datasheet_currents();
        currents.i_rd = currents.i_asb - 0.01;
        let stats = consistent_stats(&mut StdRng::seed_from_u64(5), &dev);
        let err = energy(&stats, &dev, &currents, 1.0).unwrap_err();
        assert!(err.to_string().contains("rd"), "{err}");
        let bd = energy_unchecked(&stats, &dev, &currents, 1.0);
        assert!(bd.e_rd < 0.0);
    }

    #[test]
    fn report_is_sorted_and_percentages_close() {
        let dev = ddr4();
        let mut currents = dev.datasheet_currents();
        currents.intercept_j = 0.01;
        let stats = consistent_stats(&mut StdRng::seed_from_u64(11), &dev);
        let bd = energy(&stats, &dev, &currents, dev.default_geometry_scale()).unwrap();
        let report = breakdown_report(&bd);
        assert!(!report.empty);
        assert_eq!(report.rows.len(), 8);
        for pair in report.rows.windows(2) {
            assert!(pair[0].joules >= pair[1].joules);
        }
        let total_pct: f64 = report.rows.iter().map(|r| r.percent).sum();
        assert!((total_pct - 100.0).abs() < 0.01, "{total_pct}");
    }

    #[test]
    fn empty_trace_reports_empty() {
        let dev = ddr4();
        let bd = energy(&stats_zero(), &dev, &dev.datasheet_currents(), 1.0).unwrap();
        assert_eq!(bd.e_total, 0.0);
        assert_eq!(bd.p_avg_w, 0.0);
        let report = breakdown_report(&bd);
        assert!(report.empty);
        assert!(report.rows.iter().all(|r| r.percent == 0.0));
    }

    #[test]
    fn coefficients_are_nonnegative_for_covering_dwell() {
        let dev = ddr4();
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..50 {
            let stats = consistent_stats(&mut rng, &dev);
            let row = coefficients(&stats, &dev, dev.default_geometry_scale());
            for k in 0..N_CURRENTS {
                assert!(row.coeffs[k] >= 0.0, "coeff {k} negative: {:?}", row.coeffs);
            }
            assert!(row.e_const >= 0.0);
        }
    }

    proptest! {
        // The regrouped form is the same polynomial; agreement must be at
        // rounding level for any currents, not just physical ones.
        #[test]
        fn regrouped_model_matches_componentwise_model(
            seed in 0u64..1000,
            i_act in 0.04f64..0.08,
            i_pre in 0.04f64..0.08,
            i_asb in 0.03f64..0.05,
            i_rd in 0.10f64..0.20,
            i_wr in 0.10f64..0.20,
            intercept in 0.0f64..0.1,
        ) {
            let dev = ddr4();
            let stats = consistent_stats(&mut StdRng::seed_from_u64(seed), &dev);
            let currents = CalibratedCurrents { i_act, i_pre, i_asb, i_rd, i_wr, intercept_j: intercept };
            let bd = energy_unchecked(&stats, &dev, &currents, dev.default_geometry_scale());
            let row = coefficients(&stats, &dev, dev.default_geometry_scale());
            let predicted = row.predict(&currents);
            prop_assert!((predicted - bd.e_total).abs() <= 1e-12 * bd.e_total.abs().max(1e-30),
                "{predicted} vs {}", bd.e_total);
        }
    }

    #[test]
    fn intercept_shifts_total_one_for_one() {
        let dev = ddr4();
        let stats = consistent_stats(&mut StdRng::seed_from_u64(23), &dev);
        let mut currents = dev.datasheet_currents();
        let base = energy(&stats, &dev, &currents, 2.0).unwrap().e_total;
        currents.intercept_j = 1.25;
        let shifted = energy(&stats, &dev, &currents, 2.0).unwrap().e_total;
        assert_relative_eq!(shifted - base, 1.25, max_relative = 1e-9);
    }

    #[test]
    fn geometry_scale_multiplies_everything_but_the_intercept() {
        let dev = ddr4();
        let stats = consistent_stats(&mut StdRng::seed_from_u64(29), &dev);
        let mut currents = dev.datasheet_currents();
        currents.intercept_j = 0.25;
        let one = energy(&stats, &dev, &currents, 1.0).unwrap();
        let two = energy(&stats, &dev, &currents, 2.0).unwrap();
        assert_eq!(two.e_rd, 2.0 * one.e_rd);
        assert_eq!(two.e_bg_pre, 2.0 * one.e_bg_pre);
        assert_eq!(two.e_intercept, one.e_intercept);
    }

    // Random mixes should still have sane magnitudes: a busy second of DDR4
    // sits in the single-digit watt range per DIMM.
    #[test]
    fn average_power_is_plausible() {
        let dev = ddr4();
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..10 {
            let stats = consistent_stats(&mut rng, &dev);
            let bd = energy(&stats, &dev, &dev.datasheet_currents(), dev.default_geometry_scale()).unwrap();
            assert!(bd.p_avg_w > 0.01 && bd.p_avg_w < 20.0, "{}", bd.p_avg_w);
            let _ = rng.random_range(0..2);
        }
    }
}
