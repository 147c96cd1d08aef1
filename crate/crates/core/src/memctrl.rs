//! Open-page command scheduling and an independent timing validator.
//!
//! The controller model is deliberately simple: one channel, in-order,
//! a single request in flight, open-page row policy. Rows stay open until a
//! conflicting row needs the bank, a refresh closes everything, or the trace
//! drains. All-bank refreshes ride a fixed `k * tREFI` grid: preparation
//! (PREA where needed) starts early enough that every REF lands on its grid
//! slot, which keeps consecutive REF gaps at tREFI exactly and the REF count
//! within one of `end_cycle / tREFI`. During a REF's tRFC window the channel
//! is quiet apart from the other ranks' REF commands.
//!
//! `check_timing` re-derives legality from the trace alone and never trusts
//! the scheduler, so scheduler bugs show up as violations instead of being
//! mirrored in the checker.

use std::fmt;

use thiserror::Error;

use crate::addrmap::{AddrMapError, AddressMapping};
use crate::device::{DeviceSpec, Timings};
use crate::workload::{ReqKind, Request};

#[derive(Debug, Error)]
pub enum SchedError {
    #[error(transparent)]
    Mapping(#[from] AddrMapError),
    #[error("refresh cannot meet its deadline: tREFI = {trefi} too small for tRFC = {trfc} plus close overhead {overhead}")]
    RefreshInfeasible { trefi: u64, trfc: u64, overhead: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmdKind {
    Act,
    Pre,
    Prea,
    Rd,
    Wr,
    Ref,
}

impl CmdKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CmdKind::Act => "ACT",
            CmdKind::Pre => "PRE",
            CmdKind::Prea => "PREA",
            CmdKind::Rd => "RD",
            CmdKind::Wr => "WR",
            CmdKind::Ref => "REF",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<CmdKind> {
        Some(match s {
            "ACT" => CmdKind::Act,
            "PRE" => CmdKind::Pre,
            "PREA" => CmdKind::Prea,
            "RD" => CmdKind::Rd,
            "WR" => CmdKind::Wr,
            "REF" => CmdKind::Ref,
            _ => return None,
        })
    }
}

impl fmt::Display for CmdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// One DDR command. REF and PREA are rank scoped and keep bank fields zero;
/// row/column are bookkeeping only and are dropped by the trace file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Command {
    pub cycle: u64,
    pub kind: CmdKind,
    pub rank: u32,
    pub bank_group: u32,
    pub bank: u32,
    pub row: u64,
    pub column: u64,
}

/// A scheduled command sequence, non-decreasing in cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandTrace {
    pub device: DeviceSpec,
    pub commands: Vec<Command>,
    /// Cycle after the last command completes its timing window.
    pub end_cycle: u64,
}

impl CommandTrace {
    pub fn count(&self, kind: CmdKind) -> u64 {
        self.commands.iter().filter(|c| c.kind == kind).count() as u64
    }
}

fn write_recovery(t: &Timings, burst: u32) -> u64 {
    u64::from(t.twl) + u64::from(burst / 2) + u64::from(t.twr)
}

fn completion_window(t: &Timings, burst: u32, kind: CmdKind) -> u64 {
    match kind {
        CmdKind::Act => u64::from(t.tras),
        CmdKind::Pre | CmdKind::Prea => u64::from(t.trp),
        CmdKind::Rd => u64::from(t.trl) + u64::from(burst / 2),
        CmdKind::Wr => write_recovery(t, burst),
        CmdKind::Ref => u64::from(t.trfc),
    }
}

/// Cycles needed to close every bank and issue REF from an arbitrary state;
/// refresh preparation starts this far ahead of the tREFI grid slot.
fn refresh_headroom(t: &Timings, burst: u32) -> u64 {
    // Worst case between a request's first command and the rank being
    // refreshable: PRE, ACT tRP later, CAS tRCD after that, then the longer
    // of tRAS and the CAS-to-precharge recovery, then the PREA's tRP. The
    // slack covers bus-slot serialisation.
    let serve = u64::from(t.trp) + u64::from(t.tras).max(u64::from(t.trcd) + write_recovery(t, burst));
    serve + u64::from(t.trp) + 4
}

#[derive(Debug, Clone, Copy, Default)]
struct BankState {
    open_row: Option<u64>,
    act_cycle: u64,
    earliest_act: u64,
    earliest_col: u64,
    earliest_pre: u64,
}

struct Scheduler<'a> {
    device: &'a DeviceSpec,
    banks: Vec<BankState>,
    open_banks: Vec<u32>,
    /// Latest column command cycle per rank, for tCCD.
    last_col: Vec<Option<u64>>,
    /// Global quiet window after any REF; only REF may issue inside.
    blackout: u64,
    /// Command bus cursor: next command issues at or after this cycle.
    next_free: u64,
    refresh_round: u64,
    completion: u64,
    commands: Vec<Command>,
}

impl<'a> Scheduler<'a> {
    fn new(device: &'a DeviceSpec) -> Self {
        let n_banks = (device.ranks * device.banks_per_rank) as usize;
        Scheduler {
            device,
            banks: vec![BankState::default(); n_banks],
            open_banks: vec![0; device.ranks as usize],
            last_col: vec![None; device.ranks as usize],
            blackout: 0,
            next_free: 0,
            refresh_round: 0,
            completion: 0,
            commands: Vec::new(),
        }
    }

    fn bank_index(&self, rank: u32, bg: u32, bank: u32) -> usize {
        let banks_per_group = self.device.banks_per_rank / self.device.bank_groups;
        (rank * self.device.banks_per_rank + bg * banks_per_group + bank) as usize
    }

    fn issue(&mut self, earliest: u64, kind: CmdKind, rank: u32, bg: u32, bank: u32, row: u64, column: u64) -> u64 {
        let cycle = earliest.max(self.next_free);
        self.next_free = cycle + 1;
        let t = &self.device.timings;
        self.completion = self
            .completion
            .max(cycle + completion_window(t, self.device.burst_length, kind));
        self.commands.push(Command {
            cycle,
            kind,
            rank,
            bank_group: bg,
            bank,
            row,
            column,
        });
        cycle
    }

    /// Cycle at which the next command for this request would issue, given
    /// the current state. Used to decide whether refresh goes first.
    fn first_command_cycle(&self, rank: u32, bg: u32, bank: u32, row: u64, kind: ReqKind) -> u64 {
        let t = &self.device.timings;
        let b = &self.banks[self.bank_index(rank, bg, bank)];
        let candidate = match b.open_row {
            None => b.earliest_act,
            Some(r) if r != row => b.earliest_pre,
            Some(_) => {
                let ccd = self.last_col[rank as usize]
                    .map(|c| c + u64::from(t.tccd))
                    .unwrap_or(0);
                let _ = kind;
                b.earliest_col.max(ccd)
            }
        };
        candidate.max(self.blackout).max(self.next_free)
    }

    fn refresh_deadline(&self) -> u64 {
        (self.refresh_round + 1) * u64::from(self.device.timings.trefi)
    }

    /// Closes every rank and refreshes all of them, first REF on the tREFI
    /// grid slot, one command per cycle after that.
    fn refresh(&mut self) {
        let t = self.device.timings;
        let deadline = self.refresh_deadline();
        let mut ready = vec![0u64; self.device.ranks as usize];
        for rank in 0..self.device.ranks {
            if self.open_banks[rank as usize] == 0 {
                continue;
            }
            let mut earliest = self.blackout;
            for bg in 0..self.device.bank_groups {
                for bank in 0..self.device.banks_per_rank / self.device.bank_groups {
                    let b = &self.banks[self.bank_index(rank, bg, bank)];
                    if b.open_row.is_some() {
                        earliest = earliest.max(b.earliest_pre);
                    }
                }
            }
            let cycle = self.issue(earliest, CmdKind::Prea, rank, 0, 0, 0, 0);
            self.close_rank(rank, cycle);
            ready[rank as usize] = cycle + u64::from(t.trp);
        }
        for rank in 0..self.device.ranks {
            // REF is exempt from the blackout so multi-rank refreshes stack.
            let cycle = self.issue(ready[rank as usize].max(deadline), CmdKind::Ref, rank, 0, 0, 0, 0);
            self.blackout = self.blackout.max(cycle + u64::from(t.trfc));
        }
        self.refresh_round += 1;
    }

    fn close_rank(&mut self, rank: u32, prea_cycle: u64) {
        let t = self.device.timings;
        for bg in 0..self.device.bank_groups {
            for bank in 0..self.device.banks_per_rank / self.device.bank_groups {
                let idx = self.bank_index(rank, bg, bank);
                let b = &mut self.banks[idx];
                b.open_row = None;
                b.earliest_act = b.earliest_act.max(prea_cycle + u64::from(t.trp));
            }
        }
        self.open_banks[rank as usize] = 0;
    }

    fn serve(&mut self, rank: u32, bg: u32, bank: u32, row: u64, column: u64, kind: ReqKind) {
        let t = self.device.timings;
        let idx = self.bank_index(rank, bg, bank);

        if let Some(open) = self.banks[idx].open_row {
            if open != row {
                let earliest = self.banks[idx].earliest_pre.max(self.blackout);
                let cycle = self.issue(earliest, CmdKind::Pre, rank, bg, bank, open, 0);
                let b = &mut self.banks[idx];
                b.open_row = None;
                b.earliest_act = b.earliest_act.max(cycle + u64::from(t.trp));
                self.open_banks[rank as usize] -= 1;
            }
        }

        if self.banks[idx].open_row.is_none() {
            let earliest = self.banks[idx].earliest_act.max(self.blackout);
            let cycle = self.issue(earliest, CmdKind::Act, rank, bg, bank, row, 0);
            let b = &mut self.banks[idx];
            b.open_row = Some(row);
            b.act_cycle = cycle;
            b.earliest_col = cycle + u64::from(t.trcd);
            b.earliest_pre = cycle + u64::from(t.tras);
            b.earliest_act = cycle + u64::from(t.trc);
            self.open_banks[rank as usize] += 1;
        }

        let ccd = self.last_col[rank as usize]
            .map(|c| c + u64::from(t.tccd))
            .unwrap_or(0);
        let earliest = self.banks[idx].earliest_col.max(ccd).max(self.blackout);
        let cmd = match kind {
            ReqKind::Read => CmdKind::Rd,
            ReqKind::Write => CmdKind::Wr,
        };
        let cycle = self.issue(earliest, cmd, rank, bg, bank, row, column);
        self.last_col[rank as usize] = Some(cycle);
        let recovery = match kind {
            ReqKind::Read => u64::from(t.trtp),
            ReqKind::Write => write_recovery(&t, self.device.burst_length),
        };
        let b = &mut self.banks[idx];
        b.earliest_pre = b.earliest_pre.max(cycle + recovery);
    }

    fn drain(&mut self) {
        for rank in 0..self.device.ranks {
            if self.open_banks[rank as usize] == 0 {
                continue;
            }
            let mut earliest = self.blackout;
            for bg in 0..self.device.bank_groups {
                for bank in 0..self.device.banks_per_rank / self.device.bank_groups {
                    let b = &self.banks[self.bank_index(rank, bg, bank)];
                    if b.open_row.is_some() {
                        earliest = earliest.max(b.earliest_pre);
                    }
                }
            }
            let cycle = self.issue(earliest, CmdKind::Prea, rank, 0, 0, 0, 0);
            self.close_rank(rank, cycle);
        }
    }
}

/// Schedules a request stream into a timing-legal command trace. The mapping
/// must match the device geometry; traces always end fully precharged.
pub fn schedule(
    requests: impl IntoIterator<Item = Request>,
    mapping: &AddressMapping,
    device: &DeviceSpec,
) -> Result<CommandTrace, SchedError> {
    mapping.check_device(device)?;
    let t = &device.timings;
    let overhead = refresh_headroom(t, device.burst_length) + u64::from(device.ranks) + 2;
    if u64::from(t.trefi) <= u64::from(t.trfc) + overhead {
        return Err(SchedError::RefreshInfeasible {
            trefi: u64::from(t.trefi),
            trfc: u64::from(t.trfc),
            overhead,
        });
    }
    let headroom = refresh_headroom(t, device.burst_length);

    let mut sched = Scheduler::new(device);
    for req in requests {
        let coord = mapping.decompose(req.addr)?;
        let (rank, bg, bank) = (coord.rank as u32, coord.bank_group as u32, coord.bank as u32);
        loop {
            let candidate = sched.first_command_cycle(rank, bg, bank, coord.row, req.kind);
            if candidate + headroom >= sched.refresh_deadline() {
                sched.refresh();
            } else {
                break;
            }
        }
        sched.serve(rank, bg, bank, coord.row, coord.column, req.kind);
    }
    sched.drain();
    Ok(CommandTrace {
        device: device.clone(),
        commands: sched.commands,
        end_cycle: sched.completion,
    })
}

/// One broken timing relation found by `check_timing`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingViolation {
    /// Rule name: tRCD, tRAS, tRTP, tWR, tRP, tCCD, tRC, tRFC, tREFI or
    /// sequence (command makes no sense in the bank's current state).
    pub rule: &'static str,
    /// The command establishing the constraint, where one exists.
    pub earlier: Option<Command>,
    /// The command that violated it.
    pub later: Command,
    pub required: u64,
    pub actual: u64,
}

impl fmt::Display for TimingViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at cycle {}: {} needs {} cycles, got {}",
            self.later.kind, self.later.cycle, self.rule, self.required, self.actual
        )?;
        if let Some(e) = &self.earlier {
            write!(f, " (after {} at cycle {})", e.kind, e.cycle)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CheckBank {
    open: bool,
    last_act: Option<Command>,
    last_pre: Option<Command>,
    last_rd: Option<Command>,
    last_wr: Option<Command>,
}

/// Validates a trace against the core DDR4 rules. Pure and deterministic;
/// returns every violation in scan order. Row and column fields are ignored
/// so traces read back from files check identically.
pub fn check_timing(trace: &CommandTrace) -> Vec<TimingViolation> {
    let device = &trace.device;
    let t = &device.timings;
    let burst = device.burst_length;
    let n_banks = (device.ranks * device.banks_per_rank) as usize;
    let banks_per_group = device.banks_per_rank / device.bank_groups;
    let bank_index = |rank: u32, bg: u32, bank: u32| -> usize {
        (rank * device.banks_per_rank + bg * banks_per_group + bank) as usize
    };

    let mut banks = vec![CheckBank::default(); n_banks];
    let mut last_col: Vec<Option<Command>> = vec![None; device.ranks as usize];
    let mut last_ref: Vec<Option<Command>> = vec![None; device.ranks as usize];
    let mut blackout: Option<(Command, u64)> = None;
    let mut violations = Vec::new();

    let check_gap =
        |violations: &mut Vec<TimingViolation>, rule: &'static str, earlier: Option<Command>, later: &Command, required: u64| {
            if let Some(e) = earlier {
                let actual = later.cycle.saturating_sub(e.cycle);
                if actual < required {
                    violations.push(TimingViolation {
                        rule,
                        earlier: Some(e),
                        later: *later,
                        required,
                        actual,
                    });
                }
            }
        };

    for cmd in &trace.commands {
        if cmd.kind != CmdKind::Ref {
            if let Some((ref_cmd, until)) = blackout {
                if cmd.cycle < until {
                    violations.push(TimingViolation {
                        rule: "tRFC",
                        earlier: Some(ref_cmd),
                        later: *cmd,
                        required: u64::from(t.trfc),
                        actual: cmd.cycle - ref_cmd.cycle,
                    });
                }
            }
        }

        match cmd.kind {
            CmdKind::Act => {
                let idx = bank_index(cmd.rank, cmd.bank_group, cmd.bank);
                let b = banks[idx];
                if b.open {
                    violations.push(TimingViolation {
                        rule: "sequence",
                        earlier: b.last_act,
                        later: *cmd,
                        required: 0,
                        actual: 0,
                    });
                }
                check_gap(&mut violations, "tRC", b.last_act, cmd, u64::from(t.trc));
                check_gap(&mut violations, "tRP", b.last_pre, cmd, u64::from(t.trp));
                let b = &mut banks[idx];
                b.open = true;
                b.last_act = Some(*cmd);
            }
            CmdKind::Pre => {
                let idx = bank_index(cmd.rank, cmd.bank_group, cmd.bank);
                let b = banks[idx];
                if b.open {
                    check_gap(&mut violations, "tRAS", b.last_act, cmd, u64::from(t.tras));
                    check_gap(&mut violations, "tRTP", b.last_rd, cmd, u64::from(t.trtp));
                    check_gap(&mut violations, "tWR", b.last_wr, cmd, write_recovery(t, burst));
                }
                let b = &mut banks[idx];
                b.open = false;
                b.last_pre = Some(*cmd);
            }
            CmdKind::Prea => {
                for bg in 0..device.bank_groups {
                    for bank in 0..banks_per_group {
                        let idx = bank_index(cmd.rank, bg, bank);
                        let b = banks[idx];
                        if b.open {
                            check_gap(&mut violations, "tRAS", b.last_act, cmd, u64::from(t.tras));
                            check_gap(&mut violations, "tRTP", b.last_rd, cmd, u64::from(t.trtp));
                            check_gap(&mut violations, "tWR", b.last_wr, cmd, write_recovery(t, burst));
                        }
                        let b = &mut banks[idx];
                        b.open = false;
                        b.last_pre = Some(*cmd);
                    }
                }
            }
            CmdKind::Rd | CmdKind::Wr => {
                let idx = bank_index(cmd.rank, cmd.bank_group, cmd.bank);
                let b = banks[idx];
                if !b.open {
                    violations.push(TimingViolation {
                        rule: "sequence",
                        earlier: b.last_pre,
                        later: *cmd,
                        required: 0,
                        actual: 0,
                    });
                }
                check_gap(&mut violations, "tRCD", b.last_act, cmd, u64::from(t.trcd));
                check_gap(
                    &mut violations,
                    "tCCD",
                    last_col[cmd.rank as usize],
                    cmd,
                    u64::from(t.tccd),
                );
                let b = &mut banks[idx];
                match cmd.kind {
                    CmdKind::Rd => b.last_rd = Some(*cmd),
                    _ => b.last_wr = Some(*cmd),
                }
                last_col[cmd.rank as usize] = Some(*cmd);
            }
            CmdKind::Ref => {
                let open = (0..device.bank_groups)
                    .flat_map(|bg| (0..banks_per_group).map(move |b| (bg, b)))
                    .any(|(bg, b)| banks[bank_index(cmd.rank, bg, b)].open);
                if open {
                    violations.push(TimingViolation {
                        rule: "sequence",
                        earlier: None,
                        later: *cmd,
                        required: 0,
                        actual: 0,
                    });
                }
                if let Some(prev) = last_ref[cmd.rank as usize] {
                    let gap = cmd.cycle - prev.cycle;
                    if gap > u64::from(t.trefi) {
                        violations.push(TimingViolation {
                            rule: "tREFI",
                            earlier: Some(prev),
                            later: *cmd,
                            required: u64::from(t.trefi),
                            actual: gap,
                        });
                    }
                }
                last_ref[cmd.rank as usize] = Some(*cmd);
                let until = cmd.cycle + u64::from(t.trfc);
                if blackout.map_or(true, |(_, u)| until > u) {
                    blackout = Some((*cmd, until));
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrmap::AddressMapping;
    use crate::testutil::{ddr4, ddr4_single_rank};
    use crate::workload::{contiguous_bases, generate, KernelKind, LINE_BYTES};

    fn trace_for(kind: KernelKind, array_len: u64) -> CommandTrace {
        let dev = ddr4();
        let mapping = AddressMapping::standard(&dev, 8192).unwrap();
        let stream = generate(kind, array_len, LINE_BYTES, contiguous_bases(0, array_len), false).unwrap();
        schedule(&stream, &mapping, &dev).unwrap()
    }

    #[test]
    fn single_read_uses_act_rd_prea() {
        let dev = ddr4_single_rank();
        let mapping = AddressMapping::standard(&dev, 8192).unwrap();
        let stream = generate(KernelKind::Read, 8, LINE_BYTES, [0, 0, 0], false).unwrap();
        let trace = schedule(&stream, &mapping, &dev).unwrap();
        let kinds: Vec<CmdKind> = trace.commands.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, vec![CmdKind::Act, CmdKind::Rd, CmdKind::Prea]);
        assert_eq!(trace.commands[0].cycle, 0);
        assert_eq!(
            trace.commands[1].cycle - trace.commands[0].cycle,
            u64::from(dev.timings.trcd),
            "RD sits exactly tRCD after ACT"
        );
        let prea = trace.commands[2];
        assert!(prea.cycle >= u64::from(dev.timings.tras));
        assert_eq!(trace.end_cycle, prea.cycle + u64::from(dev.timings.trp));
        assert!(check_timing(&trace).is_empty());
    }

    #[test]
    fn same_row_reads_share_one_activate() {
        let dev = ddr4_single_rank();
        let mapping = AddressMapping::standard(&dev, 8192).unwrap();
        let stream = generate(KernelKind::Read, 16, LINE_BYTES, [0, 0, 0], false).unwrap();
        let trace = schedule(&stream, &mapping, &dev).unwrap();
        let kinds: Vec<CmdKind> = trace.commands.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, vec![CmdKind::Act, CmdKind::Rd, CmdKind::Rd, CmdKind::Prea]);
        assert_eq!(
            trace.commands[2].cycle - trace.commands[1].cycle,
            u64::from(dev.timings.tccd)
        );
        assert!(check_timing(&trace).is_empty());
    }

    #[test]
    fn row_conflict_precharges_first() {
        let dev = ddr4_single_rank();
        let mapping = AddressMapping::standard(&dev, 8192).unwrap();
        // Same bank, rows 0 and 1: 8 KB rows, 4 bank-group bits above them.
        let row_stride = 8192 * u64::from(dev.banks_per_rank);
        let reqs = vec![
            Request { kind: ReqKind::Read, addr: 0 },
            Request { kind: ReqKind::Read, addr: row_stride },
        ];
        let trace = schedule(reqs, &mapping, &dev).unwrap();
        let kinds: Vec<CmdKind> = trace.commands.iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            vec![CmdKind::Act, CmdKind::Rd, CmdKind::Pre, CmdKind::Act, CmdKind::Rd, CmdKind::Prea]
        );
        let (act, pre, act2) = (trace.commands[0], trace.commands[2], trace.commands[3]);
        assert!(pre.cycle >= act.cycle + u64::from(dev.timings.tras));
        assert!(act2.cycle >= pre.cycle + u64::from(dev.timings.trp));
        assert!(act2.cycle >= act.cycle + u64::from(dev.timings.trc));
        assert!(check_timing(&trace).is_empty());
    }

    #[test]
    fn write_recovery_delays_the_precharge() {
        let dev = ddr4_single_rank();
        let mapping = AddressMapping::standard(&dev, 8192).unwrap();
        let stream = generate(KernelKind::Assign, 8, LINE_BYTES, [0, 0, 0], false).unwrap();
        let trace = schedule(&stream, &mapping, &dev).unwrap();
        let wr = trace.commands.iter().find(|c| c.kind == CmdKind::Wr).unwrap();
        let prea = trace.commands.iter().find(|c| c.kind == CmdKind::Prea).unwrap();
        let t = &dev.timings;
        assert!(prea.cycle >= wr.cycle + u64::from(t.twl) + u64::from(dev.burst_length / 2) + u64::from(t.twr));
        assert!(check_timing(&trace).is_empty());
    }

    #[test]
    fn sequential_read_activates_once_per_row() {
        // 2^17 doubles = 1 MiB = 16384 lines; 8 KB rows hold 128 lines each.
        let trace = trace_for(KernelKind::Read, 1 << 17);
        assert_eq!(trace.count(CmdKind::Rd), 16384);
        // Each refresh round closes the row in flight, which then reopens.
        let rounds = trace
            .commands
            .iter()
            .filter(|c| c.kind == CmdKind::Ref && c.rank == 0)
            .count() as u64;
        let acts = trace.count(CmdKind::Act);
        let rows = 16384 / 128;
        assert!(
            acts >= rows && acts <= rows + rounds,
            "acts {acts} outside [{rows}, {}]",
            rows + rounds
        );
        assert!(check_timing(&trace).is_empty());
    }

    #[test]
    fn refreshes_ride_the_trefi_grid() {
        let trace = trace_for(KernelKind::Addition, 1 << 18);
        let dev = &trace.device;
        let trefi = u64::from(dev.timings.trefi);
        assert!(trace.end_cycle > 3 * trefi, "trace long enough to refresh");
        for rank in 0..dev.ranks {
            let refs: Vec<u64> = trace
                .commands
                .iter()
                .filter(|c| c.kind == CmdKind::Ref && c.rank == rank)
                .map(|c| c.cycle)
                .collect();
            let expect = trace.end_cycle / trefi;
            assert!(
                (refs.len() as i64 - expect as i64).abs() <= 1,
                "rank {rank}: {} refreshes vs end/trefi = {expect}",
                refs.len()
            );
            for pair in refs.windows(2) {
                assert!(pair[1] - pair[0] <= trefi, "rank {rank} REF gap over tREFI");
            }
        }
        assert!(check_timing(&trace).is_empty());
    }

    #[test]
    fn scheduling_is_deterministic() {
        let a = trace_for(KernelKind::Triad, 1 << 14);
        let b = trace_for(KernelKind::Triad, 1 << 14);
        assert_eq!(a, b);
    }

    fn cmd(cycle: u64, kind: CmdKind) -> Command {
        Command {
            cycle,
            kind,
            rank: 0,
            bank_group: 0,
            bank: 0,
            row: 0,
            column: 0,
        }
    }

    #[test]
    fn checker_flags_a_short_trcd() {
        let dev = ddr4_single_rank();
        let trace = CommandTrace {
            device: dev.clone(),
            commands: vec![cmd(0, CmdKind::Act), cmd(1, CmdKind::Rd)],
            end_cycle: 100,
        };
        let violations = check_timing(&trace);
        assert_eq!(violations.len(), 1, "{violations:?}");
        let v = &violations[0];
        assert_eq!(v.rule, "tRCD");
        assert_eq!(v.required, u64::from(dev.timings.trcd));
        assert_eq!(v.actual, 1);
        assert_eq!(v.earlier.unwrap().kind, CmdKind::Act);
    }

    #[test]
    fn checker_flags_commands_inside_a_refresh_window() {
        let dev = ddr4_single_rank();
        let trace = CommandTrace {
            device: dev.clone(),
            commands: vec![cmd(0, CmdKind::Ref), cmd(5, CmdKind::Act)],
            end_cycle: 1000,
        };
        let violations = check_timing(&trace);
        assert!(violations.iter().any(|v| v.rule == "tRFC"), "{violations:?}");
    }

    #[test]
    fn checker_flags_column_commands_to_closed_banks() {
        let dev = ddr4_single_rank();
        let trace = CommandTrace {
            device: dev,
            commands: vec![cmd(0, CmdKind::Rd)],
            end_cycle: 10,
        };
        let violations = check_timing(&trace);
        assert!(violations.iter().any(|v| v.rule == "sequence"), "{violations:?}");
    }

    #[test]
    fn checker_flags_tccd_and_trefi() {
        let dev = ddr4_single_rank();
        let t = dev.timings;
        let mut c1 = cmd(u64::from(t.trcd), CmdKind::Rd);
        let mut c2 = cmd(u64::from(t.trcd) + 1, CmdKind::Rd);
        c1.bank = 0;
        c2.bank = 1;
        let trace = CommandTrace {
            device: dev.clone(),
            commands: vec![
                cmd(0, CmdKind::Act),
                {
                    let mut a = cmd(0, CmdKind::Act);
                    a.bank = 1;
                    a.cycle = 1;
                    a
                },
                c1,
                c2,
            ],
            end_cycle: 100,
        };
        let violations = check_timing(&trace);
        assert!(violations.iter().any(|v| v.rule == "tCCD"), "{violations:?}");

        let trefi = u64::from(t.trefi);
        let far = CommandTrace {
            device: dev,
            commands: vec![cmd(0, CmdKind::Ref), cmd(2 * trefi, CmdKind::Ref)],
            end_cycle: 3 * trefi,
        };
        let violations = check_timing(&far);
        assert!(violations.iter().any(|v| v.rule == "tREFI"), "{violations:?}");
    }

    #[test]
    fn rejects_infeasible_refresh_window() {
        let mut dev = ddr4_single_rank();
        dev.timings.trefi = dev.timings.trfc; // cannot fit a refresh cadence
        let mapping = AddressMapping::standard(&dev, 8192).unwrap();
        let stream = generate(KernelKind::Read, 8, LINE_BYTES, [0, 0, 0], false).unwrap();
        let err = schedule(&stream, &mapping, &dev).unwrap_err();
        assert!(matches!(err, SchedError::RefreshInfeasible { .. }), "{err}");
    }
}
