//! Device descriptions: geometry, timing parameters and datasheet currents.
//!
//! A device file is JSON with units spelled out in the field names
//! (`tck_ns`, `idd_a`, `capacity_per_dimm_bytes`). Timings live in clock
//! cycles under `timings_cycles`; `trfc` and `trefi` may instead be given in
//! nanoseconds as top-level `trfc_ns` / `trefi_ns`, which the loader converts
//! to cycles (`trfc` rounds up, `trefi` rounds down, so both stay on the safe
//! side of the datasheet window). Everything else is rejected if misnamed.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse device spec: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid device spec: {0}")]
    Validation(String),
    #[error("cannot parse currents file: line {line}: {reason}")]
    CurrentsParse { line: usize, reason: String },
}

/// Core timing parameters, all in clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    /// ACT to internal read/write delay.
    pub trcd: u32,
    /// Precharge period.
    pub trp: u32,
    /// ACT to PRE minimum.
    pub tras: u32,
    /// ACT to ACT on the same bank; must equal `tras + trp`.
    pub trc: u32,
    /// Refresh cycle time (all-bank REF blackout).
    pub trfc: u32,
    /// Average refresh interval.
    pub trefi: u32,
    /// Column command to column command, same rank.
    pub tccd: u32,
    /// Read to precharge.
    pub trtp: u32,
    /// Write recovery after the last data beat.
    pub twr: u32,
    /// Write latency (CWL).
    pub twl: u32,
    /// Read latency (CL).
    pub trl: u32,
}

/// Datasheet IDD currents in amperes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IddCurrents {
    /// One bank activate-precharge current.
    pub idd0: f64,
    /// Precharge standby current.
    pub idd2n: f64,
    /// Active standby current.
    pub idd3n: f64,
    /// Burst read current.
    pub idd4r: f64,
    /// Burst write current.
    pub idd4w: f64,
    /// Burst refresh current.
    pub idd5b: f64,
}

/// Immutable description of one memory configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub name: String,
    pub ranks: u32,
    pub bank_groups: u32,
    pub banks_per_rank: u32,
    pub capacity_per_dimm_bytes: u64,
    pub dimms_per_channel: u32,
    /// Supply voltage in volts.
    pub vdd: f64,
    /// Clock period in nanoseconds.
    pub tck_ns: f64,
    pub burst_length: u32,
    pub timings: Timings,
    pub idd: IddCurrents,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimings {
    trcd: u32,
    trp: u32,
    tras: u32,
    trc: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    trfc: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trefi: Option<u32>,
    tccd: u32,
    trtp: u32,
    twr: u32,
    twl: u32,
    trl: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDeviceSpec {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
    ranks: u32,
    bank_groups: u32,
    banks_per_rank: u32,
    capacity_per_dimm_bytes: u64,
    dimms_per_channel: u32,
    vdd_v: f64,
    tck_ns: f64,
    burst_length: u32,
    timings_cycles: RawTimings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trfc_ns: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trefi_ns: Option<f64>,
    idd_a: IddCurrents,
}

fn invalid(msg: impl Into<String>) -> DeviceError {
    DeviceError::Validation(msg.into())
}

impl DeviceSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DeviceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DeviceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, DeviceError> {
        let raw: RawDeviceSpec = serde_json::from_str(text)?;
        let tck_ns = raw.tck_ns;
        if !(tck_ns.is_finite() && tck_ns > 0.0) {
            return Err(invalid("tck_ns must be positive"));
        }
        let trfc = resolve_cycles("trfc", raw.timings_cycles.trfc, raw.trfc_ns, tck_ns, true)?;
        let trefi = resolve_cycles("trefi", raw.timings_cycles.trefi, raw.trefi_ns, tck_ns, false)?;
        let spec = DeviceSpec {
            name: raw.name,
            ranks: raw.ranks,
            bank_groups: raw.bank_groups,
            banks_per_rank: raw.banks_per_rank,
            capacity_per_dimm_bytes: raw.capacity_per_dimm_bytes,
            dimms_per_channel: raw.dimms_per_channel,
            vdd: raw.vdd_v,
            tck_ns,
            burst_length: raw.burst_length,
            timings: Timings {
                trcd: raw.timings_cycles.trcd,
                trp: raw.timings_cycles.trp,
                tras: raw.timings_cycles.tras,
                trc: raw.timings_cycles.trc,
                trfc,
                trefi,
                tccd: raw.timings_cycles.tccd,
                trtp: raw.timings_cycles.trtp,
                twr: raw.timings_cycles.twr,
                twl: raw.timings_cycles.twl,
                trl: raw.timings_cycles.trl,
            },
            idd: raw.idd_a,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Emits JSON that parses back to an identical spec (`trfc`/`trefi` are
    /// written in cycles, so no ns round trip is involved).
    pub fn to_json(&self) -> String {
        let raw = RawDeviceSpec {
            name: self.name.clone(),
            notes: None,
            ranks: self.ranks,
            bank_groups: self.bank_groups,
            banks_per_rank: self.banks_per_rank,
            capacity_per_dimm_bytes: self.capacity_per_dimm_bytes,
            dimms_per_channel: self.dimms_per_channel,
            vdd_v: self.vdd,
            tck_ns: self.tck_ns,
            burst_length: self.burst_length,
            timings_cycles: RawTimings {
                trcd: self.timings.trcd,
                trp: self.timings.trp,
                tras: self.timings.tras,
                trc: self.timings.trc,
                trfc: Some(self.timings.trfc),
                trefi: Some(self.timings.trefi),
                tccd: self.timings.tccd,
                trtp: self.timings.trtp,
                twr: self.timings.twr,
                twl: self.timings.twl,
                trl: self.timings.trl,
            },
            trfc_ns: None,
            trefi_ns: None,
            idd_a: self.idd,
        };
        serde_json::to_string_pretty(&raw).expect("device spec serialises")
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let t = &self.timings;
        if self.ranks == 0 || self.banks_per_rank == 0 || self.bank_groups == 0 {
            return Err(invalid("ranks, banks_per_rank and bank_groups must be nonzero"));
        }
        if !self.banks_per_rank.is_power_of_two() || !self.bank_groups.is_power_of_two() {
            return Err(invalid("banks_per_rank and bank_groups must be powers of two"));
        }
        if self.banks_per_rank % self.bank_groups != 0 {
            return Err(invalid("bank_groups must divide banks_per_rank"));
        }
        if self.capacity_per_dimm_bytes == 0 || self.dimms_per_channel == 0 {
            return Err(invalid("capacity and dimms_per_channel must be nonzero"));
        }
        if !(self.vdd.is_finite() && self.vdd > 0.0) {
            return Err(invalid("vdd_v must be positive"));
        }
        if self.burst_length != 4 && self.burst_length != 8 {
            return Err(invalid("burst_length must be 4 or 8"));
        }
        for (name, v) in [
            ("trcd", t.trcd),
            ("trp", t.trp),
            ("tras", t.tras),
            ("trc", t.trc),
            ("trfc", t.trfc),
            ("trefi", t.trefi),
            ("tccd", t.tccd),
            ("trtp", t.trtp),
            ("twr", t.twr),
            ("twl", t.twl),
            ("trl", t.trl),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if t.trc != t.tras + t.trp {
            return Err(invalid(format!(
                "tRC != tRAS + tRP ({} != {} + {})",
                t.trc, t.tras, t.trp
            )));
        }
        let i = &self.idd;
        for (name, v) in [
            ("idd0", i.idd0),
            ("idd2n", i.idd2n),
            ("idd3n", i.idd3n),
            ("idd4r", i.idd4r),
            ("idd4w", i.idd4w),
            ("idd5b", i.idd5b),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if i.idd4r <= i.idd3n {
            return Err(invalid("idd4r must exceed idd3n"));
        }
        if i.idd4w <= i.idd3n {
            return Err(invalid("idd4w must exceed idd3n"));
        }
        if i.idd0 <= i.idd2n {
            return Err(invalid("idd0 must exceed idd2n"));
        }
        Ok(())
    }

    /// Clock period in seconds.
    pub fn tck_s(&self) -> f64 {
        self.tck_ns * 1e-9
    }

    /// Data burst duration in seconds: `(BL / 2) * tck`.
    pub fn tburst_s(&self) -> f64 {
        f64::from(self.burst_length / 2) * self.tck_s()
    }

    /// Default geometry multiplier for the energy model.
    pub fn default_geometry_scale(&self) -> f64 {
        f64::from(self.ranks)
    }

    /// Datasheet starting point for the calibrated model.
    pub fn datasheet_currents(&self) -> CalibratedCurrents {
        CalibratedCurrents {
            i_act: self.idd.idd0,
            i_pre: self.idd.idd0,
            i_asb: self.idd.idd3n,
            i_rd: self.idd.idd4r,
            i_wr: self.idd.idd4w,
            intercept_j: 0.0,
        }
    }

    /// Calibration box: each current in `[0, datasheet]`.
    pub fn default_bounds(&self) -> CurrentBounds {
        let ds = self.datasheet_currents();
        CurrentBounds {
            lower: [0.0; N_CURRENTS],
            upper: ds.as_array(),
        }
    }
}

fn resolve_cycles(
    name: &str,
    cycles: Option<u32>,
    ns: Option<f64>,
    tck_ns: f64,
    round_up: bool,
) -> Result<u32, DeviceError> {
    match (cycles, ns) {
        (Some(_), Some(_)) => Err(invalid(format!(
            "{name} given both in cycles and in ns; pick one"
        ))),
        (Some(c), None) => Ok(c),
        (None, Some(ns)) => {
            if !(ns.is_finite() && ns > 0.0) {
                return Err(invalid(format!("{name}_ns must be positive")));
            }
            let cycles = ns / tck_ns;
            let cycles = if round_up { cycles.ceil() } else { cycles.floor() };
            if cycles < 1.0 || cycles > f64::from(u32::MAX) {
                return Err(invalid(format!("{name}_ns out of range")));
            }
            Ok(cycles as u32)
        }
        (None, None) => Err(invalid(format!(
            "{name} missing: give timings_cycles.{name} or {name}_ns"
        ))),
    }
}

/// Number of fitted currents (activate, precharge, active standby, read, write).
pub const N_CURRENTS: usize = 5;

/// Identifies one of the five calibrated currents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurrentKind {
    Act,
    Pre,
    Asb,
    Rd,
    Wr,
}

impl CurrentKind {
    pub const ALL: [CurrentKind; N_CURRENTS] = [
        CurrentKind::Act,
        CurrentKind::Pre,
        CurrentKind::Asb,
        CurrentKind::Rd,
        CurrentKind::Wr,
    ];

    pub fn index(self) -> usize {
        match self {
            CurrentKind::Act => 0,
            CurrentKind::Pre => 1,
            CurrentKind::Asb => 2,
            CurrentKind::Rd => 3,
            CurrentKind::Wr => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CurrentKind::Act => "i_act",
            CurrentKind::Pre => "i_pre",
            CurrentKind::Asb => "i_asb",
            CurrentKind::Rd => "i_rd",
            CurrentKind::Wr => "i_wr",
        }
    }
}

impl fmt::Display for CurrentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The five model currents plus the constant energy offset fitted alongside
/// them. Amperes and joules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedCurrents {
    pub i_act: f64,
    pub i_pre: f64,
    pub i_asb: f64,
    pub i_rd: f64,
    pub i_wr: f64,
    pub intercept_j: f64,
}

impl CalibratedCurrents {
    /// Currents in `CurrentKind` order, intercept excluded.
    pub fn as_array(&self) -> [f64; N_CURRENTS] {
        [self.i_act, self.i_pre, self.i_asb, self.i_rd, self.i_wr]
    }

    pub fn from_array(currents: [f64; N_CURRENTS], intercept_j: f64) -> Self {
        CalibratedCurrents {
            i_act: currents[0],
            i_pre: currents[1],
            i_asb: currents[2],
            i_rd: currents[3],
            i_wr: currents[4],
            intercept_j,
        }
    }

    pub fn get(&self, kind: CurrentKind) -> f64 {
        self.as_array()[kind.index()]
    }
}

/// Per-current box constraints for the calibration fit. The intercept is
/// bounded separately as `[0, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentBounds {
    pub lower: [f64; N_CURRENTS],
    pub upper: [f64; N_CURRENTS],
}

/// Writes a currents file: one `key = value` line per current, amperes, plus
/// the intercept in joules.
pub fn write_currents(currents: &CalibratedCurrents) -> String {
    let mut out = String::new();
    for kind in CurrentKind::ALL {
        out.push_str(&format!("{}_a = {:.17e}\n", kind.label(), currents.get(kind)));
    }
    out.push_str(&format!("intercept_j = {:.17e}\n", currents.intercept_j));
    out
}

/// Parses the `write_currents` format. Lines starting with `#` and blank
/// lines are skipped; every current must appear exactly once, the intercept
/// defaults to zero.
pub fn parse_currents(text: &str) -> Result<CalibratedCurrents, DeviceError> {
    let mut values: [Option<f64>; N_CURRENTS] = [None; N_CURRENTS];
    let mut intercept = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| DeviceError::CurrentsParse {
            line: idx + 1,
            reason: reason.to_string(),
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| err("value is not a number"))?;
        let slot = match key.trim() {
            "i_act_a" => &mut values[0],
            "i_pre_a" => &mut values[1],
            "i_asb_a" => &mut values[2],
            "i_rd_a" => &mut values[3],
            "i_wr_a" => &mut values[4],
            "intercept_j" => &mut intercept,
            other => return Err(err(&format!("unknown key {other:?}"))),
        };
        if slot.replace(value).is_some() {
            return Err(err("duplicate key"));
        }
    }
    let mut currents = [0.0; N_CURRENTS];
    for (kind, slot) in CurrentKind::ALL.iter().zip(values) {
        currents[kind.index()] = slot.ok_or(DeviceError::CurrentsParse {
            line: 0,
            reason: format!("missing {}_a", kind.label()),
        })?;
    }
    Ok(CalibratedCurrents::from_array(currents, intercept.unwrap_or(0.0)))
}
