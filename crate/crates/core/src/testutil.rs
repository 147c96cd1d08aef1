//! Shared fixtures for unit tests.

use rand::Rng;

use crate::device::DeviceSpec;
use crate::tracestats::CommandStats;

/// A DDR4-2400 8 GB 2Rx8 style part; values representative of common
/// datasheets, not tied to one vendor.
pub const DDR4_JSON: &str = r#"{
    "name": "ddr4-2400-8gb-2rx8",
    "ranks": 2,
    "bank_groups": 4,
    "banks_per_rank": 16,
    "capacity_per_dimm_bytes": 8589934592,
    "dimms_per_channel": 2,
    "vdd_v": 1.2,
    "tck_ns": 0.833,
    "burst_length": 8,
    "timings_cycles": {
        "trcd": 17, "trp": 17, "tras": 39, "trc": 56,
        "tccd": 4, "trtp": 10, "twr": 18, "twl": 12, "trl": 17
    },
    "trfc_ns": 260.0,
    "trefi_ns": 7800.0,
    "idd_a": {
        "idd0": 0.058, "idd2n": 0.037, "idd3n": 0.045,
        "idd4r": 0.150, "idd4w": 0.145, "idd5b": 0.235
    }
}"#;

pub fn ddr4() -> DeviceSpec {
    DeviceSpec::from_json(DDR4_JSON).unwrap()
}

/// Single-rank variant so rank-summed dwell equals plain trace length.
pub fn ddr4_single_rank() -> DeviceSpec {
    let json = DDR4_JSON
        .replace("\"ranks\": 2", "\"ranks\": 1")
        .replace("\"name\": \"ddr4-2400-8gb-2rx8\"", "\"name\": \"ddr4-2400-1r\"");
    DeviceSpec::from_json(&json).unwrap()
}

/// Random stats that a legal trace could have produced: dwell covers the
/// command windows and both standby sides add to `c_total * ranks`.
pub fn consistent_stats(rng: &mut impl Rng, dev: &DeviceSpec) -> CommandStats {
    stats_with_padding(rng, dev, false)
}

/// Like [`consistent_stats`] but with little idle time, the shape a
/// memory-bound benchmark produces. Current-dependent terms dominate.
pub fn busy_stats(rng: &mut impl Rng, dev: &DeviceSpec) -> CommandStats {
    stats_with_padding(rng, dev, true)
}

fn stats_with_padding(rng: &mut impl Rng, dev: &DeviceSpec, busy: bool) -> CommandStats {
    let t = &dev.timings;
    let n_act = rng.random_range(1..=2000u64);
    let n_pre = n_act;
    let n_rd = rng.random_range(0..=20_000u64);
    let n_wr = rng.random_range(0..=20_000u64);
    let burst = u64::from(dev.burst_length / 2);
    let active_span = u64::from(t.tras) * n_act + burst * (n_rd + n_wr);
    // Tie refresh to the trace scale so it stays a realistic energy share.
    let n_ref = if busy {
        rng.random_range(0..=active_span / u64::from(t.trefi) + 2)
    } else {
        rng.random_range(0..=50u64)
    };
    let min_act = active_span;
    let min_pre = u64::from(t.trp) * n_pre + u64::from(t.trfc) * n_ref;
    let (act_pad, pre_pad) = if busy {
        (rng.random_range(0..=min_act / 8 + 10), rng.random_range(0..=min_pre / 4 + 100))
    } else {
        (rng.random_range(0..=min_act / 2 + 1000), rng.random_range(0..=min_pre + 100_000))
    };
    let c_act_stdby = min_act + act_pad;
    let mut c_pre_stdby = min_pre + pre_pad;
    let ranks = u64::from(dev.ranks);
    let sum = c_act_stdby + c_pre_stdby;
    let c_total = sum.div_ceil(ranks);
    c_pre_stdby += c_total * ranks - sum;
    CommandStats {
        n_act,
        n_pre,
        n_rd,
        n_wr,
        n_ref,
        c_total,
        c_act_stdby,
        c_pre_stdby,
        per_bank: Vec::new(),
    }
}
