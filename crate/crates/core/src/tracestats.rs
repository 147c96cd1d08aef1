//! Command-count and standby-dwell reduction of traces, plus the trace file
//! format.
//!
//! Trace files are ASCII, one `<cycle>,<CMD>,<rank>,<bank_group>,<bank>` line
//! per command with `#` comments. Row and column are intentionally absent:
//! the reduction only needs command kinds and bank occupancy. The writer
//! records the trace end as a `# end_cycle: <n>` header; traces from other
//! tools that lack it fall back to the last command cycle plus one.
//!
//! Dwell accounting uses half-open intervals: a rank is in active standby
//! from the ACT that opens its first bank (inclusive) to the PRE that closes
//! its last (exclusive), and in precharge standby otherwise, refresh windows
//! included. Both sides are accumulated independently and must add up to
//! `c_total * ranks`.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::device::DeviceSpec;
use crate::memctrl::{check_timing, CmdKind, Command, CommandTrace, TimingViolation};

#[derive(Debug, Error)]
pub enum TraceStatsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse trace: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace is not sorted: line {line}: cycle {cycle} after {prev}")]
    NonMonotonic { line: usize, cycle: u64, prev: u64 },
    #[error("trace breaks timing: {count} violations, first: {first}")]
    IllegalTrace { count: usize, first: Box<TimingViolation> },
}

/// Per-bank activity, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerBankStats {
    pub rank: u32,
    pub bank_group: u32,
    pub bank: u32,
    pub n_act: u64,
    pub n_rd: u64,
    pub n_wr: u64,
    pub open_cycles: u64,
}

/// Everything the energy model needs to know about a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandStats {
    pub n_act: u64,
    /// Bank closes; a PREA counts once per bank it actually closed.
    pub n_pre: u64,
    pub n_rd: u64,
    pub n_wr: u64,
    pub n_ref: u64,
    /// Trace length in cycles (`end_cycle`).
    pub c_total: u64,
    /// Active-standby cycles summed over ranks.
    pub c_act_stdby: u64,
    /// Precharge-standby cycles summed over ranks.
    pub c_pre_stdby: u64,
    /// Per-bank breakdown, sorted by (rank, bank_group, bank). Empty for
    /// stats parsed back from CSV rows.
    pub per_bank: Vec<PerBankStats>,
}

/// Reduces a trace to command counts and dwell cycles. With `strict` set,
/// traces that fail `check_timing` are rejected; otherwise they are reduced
/// as-is. Comment lines never reach this function, so it is trivially
/// insensitive to them.
pub fn reduce(trace: &CommandTrace, strict: bool) -> Result<CommandStats, TraceStatsError> {
    if strict {
        let violations = check_timing(trace);
        if let Some(first) = violations.first() {
            return Err(TraceStatsError::IllegalTrace {
                count: violations.len(),
                first: Box::new(first.clone()),
            });
        }
    }

    let device = &trace.device;
    let banks_per_group = device.banks_per_rank / device.bank_groups;
    let bank_index = |rank: u32, bg: u32, bank: u32| -> usize {
        (rank * device.banks_per_rank + bg * banks_per_group + bank) as usize
    };
    let n_banks = (device.ranks * device.banks_per_rank) as usize;

    #[derive(Clone, Copy, Default)]
    struct Bank {
        open_since: Option<u64>,
        n_act: u64,
        n_rd: u64,
        n_wr: u64,
        open_cycles: u64,
    }
    #[derive(Clone, Copy, Default)]
    struct Rank {
        open_banks: u32,
        last_edge: u64,
        act_cycles: u64,
        pre_cycles: u64,
    }

    let mut banks = vec![Bank::default(); n_banks];
    let mut ranks = vec![Rank::default(); device.ranks as usize];
    let mut stats = CommandStats {
        n_act: 0,
        n_pre: 0,
        n_rd: 0,
        n_wr: 0,
        n_ref: 0,
        c_total: 0,
        c_act_stdby: 0,
        c_pre_stdby: 0,
        per_bank: Vec::new(),
    };
    let mut last_cycle = 0u64;

    let close_bank = |banks: &mut Vec<Bank>, ranks: &mut Vec<Rank>, idx: usize, rank: usize, cycle: u64| {
        let b = &mut banks[idx];
        if let Some(since) = b.open_since.take() {
            b.open_cycles += cycle - since;
            let r = &mut ranks[rank];
            r.open_banks -= 1;
            if r.open_banks == 0 {
                r.act_cycles += cycle - r.last_edge;
                r.last_edge = cycle;
            }
            true
        } else {
            false
        }
    };

    for cmd in &trace.commands {
        last_cycle = last_cycle.max(cmd.cycle);
        match cmd.kind {
            CmdKind::Act => {
                stats.n_act += 1;
                let idx = bank_index(cmd.rank, cmd.bank_group, cmd.bank);
                if banks[idx].open_since.is_none() {
                    banks[idx].open_since = Some(cmd.cycle);
                    banks[idx].n_act += 1;
                    let r = &mut ranks[cmd.rank as usize];
                    if r.open_banks == 0 {
                        r.pre_cycles += cmd.cycle - r.last_edge;
                        r.last_edge = cmd.cycle;
                    }
                    r.open_banks += 1;
                } else {
                    // Double ACT: illegal, counted but no dwell transition.
                    banks[idx].n_act += 1;
                }
            }
            CmdKind::Pre => {
                let idx = bank_index(cmd.rank, cmd.bank_group, cmd.bank);
                if close_bank(&mut banks, &mut ranks, idx, cmd.rank as usize, cmd.cycle) {
                    stats.n_pre += 1;
                }
            }
            CmdKind::Prea => {
                for bg in 0..device.bank_groups {
                    for bank in 0..banks_per_group {
                        let idx = bank_index(cmd.rank, bg, bank);
                        if close_bank(&mut banks, &mut ranks, idx, cmd.rank as usize, cmd.cycle) {
                            stats.n_pre += 1;
                        }
                    }
                }
            }
            CmdKind::Rd => {
                stats.n_rd += 1;
                banks[bank_index(cmd.rank, cmd.bank_group, cmd.bank)].n_rd += 1;
            }
            CmdKind::Wr => {
                stats.n_wr += 1;
                banks[bank_index(cmd.rank, cmd.bank_group, cmd.bank)].n_wr += 1;
            }
            CmdKind::Ref => stats.n_ref += 1,
        }
    }

    let end = trace.end_cycle.max(last_cycle);
    stats.c_total = end;
    for rank in 0..device.ranks {
        for bg in 0..device.bank_groups {
            for bank in 0..banks_per_group {
                let idx = bank_index(rank, bg, bank);
                let b = &mut banks[idx];
                if let Some(since) = b.open_since.take() {
                    b.open_cycles += end - since;
                    let r = &mut ranks[rank as usize];
                    r.open_banks -= 1;
                    if r.open_banks == 0 {
                        r.act_cycles += end - r.last_edge;
                        r.last_edge = end;
                    }
                }
            }
        }
        let r = &mut ranks[rank as usize];
        debug_assert_eq!(r.open_banks, 0);
        r.pre_cycles += end - r.last_edge;
        r.last_edge = end;
        stats.c_act_stdby += r.act_cycles;
        stats.c_pre_stdby += r.pre_cycles;
    }

    for rank in 0..device.ranks {
        for bg in 0..device.bank_groups {
            for bank in 0..banks_per_group {
                let b = &banks[bank_index(rank, bg, bank)];
                if b.n_act + b.n_rd + b.n_wr + b.open_cycles > 0 {
                    stats.per_bank.push(PerBankStats {
                        rank,
                        bank_group: bg,
                        bank,
                        n_act: b.n_act,
                        n_rd: b.n_rd,
                        n_wr: b.n_wr,
                        open_cycles: b.open_cycles,
                    });
                }
            }
        }
    }
    Ok(stats)
}

/// Serialises a trace in the line format above, end marker included.
pub fn write_trace(trace: &CommandTrace, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "# end_cycle: {}", trace.end_cycle)?;
    for c in &trace.commands {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.cycle,
            c.kind.mnemonic(),
            c.rank,
            c.bank_group,
            c.bank
        )?;
    }
    Ok(())
}

pub fn save_trace(trace: &CommandTrace, path: impl AsRef<Path>) -> Result<(), TraceStatsError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("vec write cannot fail");
    std::fs::write(path, buf).map_err(|source| TraceStatsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses the trace format. Cycles must be non-decreasing; row and column
/// come back as zero. Without an `# end_cycle:` header the end is taken as
/// the last command cycle plus one.
pub fn parse_trace(text: &str, device: &DeviceSpec) -> Result<CommandTrace, TraceStatsError> {
    let mut commands: Vec<Command> = Vec::new();
    let mut end_cycle: Option<u64> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        let err = |reason: String| TraceStatsError::Parse { line: lineno, reason };
        if let Some(rest) = line.strip_prefix("# end_cycle:") {
            let n: u64 = rest
                .trim()
                .parse()
                .map_err(|_| err("bad end_cycle value".to_string()))?;
            if end_cycle.replace(n).is_some() {
                return Err(err("end_cycle given twice".to_string()));
            }
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let cycle: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad cycle {:?}", fields[0])))?;
        let kind = CmdKind::from_mnemonic(fields[1])
            .ok_or_else(|| err(format!("unknown command {:?}", fields[1])))?;
        let mut idx3 = [0u32; 3];
        for (slot, field) in idx3.iter_mut().zip(&fields[2..]) {
            *slot = field
                .parse()
                .map_err(|_| err(format!("bad index {field:?}")))?;
        }
        if let Some(prev) = commands.last() {
            if cycle < prev.cycle {
                return Err(TraceStatsError::NonMonotonic {
                    line: lineno,
                    cycle,
                    prev: prev.cycle,
                });
            }
        }
        commands.push(Command {
            cycle,
            kind,
            rank: idx3[0],
            bank_group: idx3[1],
            bank: idx3[2],
            row: 0,
            column: 0,
        });
    }
    let end_cycle = end_cycle.unwrap_or_else(|| commands.last().map_or(0, |c| c.cycle + 1));
    Ok(CommandTrace {
        device: device.clone(),
        commands,
        end_cycle,
    })
}

pub fn load_trace(path: impl AsRef<Path>, device: &DeviceSpec) -> Result<CommandTrace, TraceStatsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TraceStatsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(&text, device)
}

pub const STATS_CSV_HEADER: &str = "id,n_act,n_pre,n_rd,n_wr,n_ref,c_total,c_act_stdby,c_pre_stdby";

impl CommandStats {
    pub fn to_csv_row(&self, id: &str) -> String {
        format!(
            "{id},{},{},{},{},{},{},{},{}",
            self.n_act,
            self.n_pre,
            self.n_rd,
            self.n_wr,
            self.n_ref,
            self.c_total,
            self.c_act_stdby,
            self.c_pre_stdby
        )
    }
}

/// Parses the `STATS_CSV_HEADER` format: one `(id, stats)` per line, header
/// optional, `per_bank` left empty.
pub fn parse_stats_csv(text: &str) -> Result<Vec<(String, CommandStats)>, TraceStatsError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line == STATS_CSV_HEADER {
            continue;
        }
        let err = |reason: String| TraceStatsError::Parse { line: idx + 1, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, got {}", fields.len())));
        }
        let mut nums = [0u64; 8];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| err(format!("bad count {field:?}")))?;
        }
        rows.push((
            fields[0].to_string(),
            CommandStats {
                n_act: nums[0],
                n_pre: nums[1],
                n_rd: nums[2],
                n_wr: nums[3],
                n_ref: nums[4],
                c_total: nums[5],
                c_act_stdby: nums[6],
                c_pre_stdby: nums[7],
                per_bank: Vec::new(),
            },
        ));
    }
    Ok(rows)
}
