//! Physical-address to DRAM-coordinate mapping.
//!
//! Every output bit (channel, rank, bank group, bank, row, column) is an
//! affine function over GF(2) of the physical address bits: the XOR of a
//! subset of address bits, optionally inverted. That covers linear bank
//! interleaving schemes as well as plain bit slicing, and it makes the
//! reverse problem (recovering an unknown mapping from observed
//! address/coordinate samples) a Gaussian elimination.
//!
//! Mapping files are line oriented:
//!
//! ```text
//! # 8 GB DIMM, open-page layout
//! address_bits = 33
//! rank.0 = xor(a18)
//! bank.0 = xor(a15, a21) +1
//! column.0 = xor(a0)
//! ```
//!
//! `+1` marks an inverted bit and `xor()` is the constant function. Bits of
//! one coordinate must be numbered contiguously from zero.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::device::DeviceSpec;

#[derive(Debug, Error)]
pub enum AddrMapError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse mapping: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid mapping: {0}")]
    Invalid(String),
    #[error("mapping does not fit device: {0}")]
    DeviceMismatch(String),
    #[error("address {addr:#x} needs more than {address_bits} address bits")]
    AddressOutOfRange { addr: u64, address_bits: u32 },
    #[error("sample {index}: {coord} value {value} does not fit in {width} bits")]
    SampleOutOfRange {
        index: usize,
        coord: Coord,
        value: u64,
        width: u32,
    },
    #[error("samples are inconsistent: no XOR function produces {coord} bit {bit}")]
    Inconsistent { coord: Coord, bit: u32 },
}

/// The six coordinate fields, in file and report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coord {
    Channel,
    Rank,
    BankGroup,
    Bank,
    Row,
    Column,
}

pub const N_COORDS: usize = 6;

impl Coord {
    pub const ALL: [Coord; N_COORDS] = [
        Coord::Channel,
        Coord::Rank,
        Coord::BankGroup,
        Coord::Bank,
        Coord::Row,
        Coord::Column,
    ];

    pub fn index(self) -> usize {
        match self {
            Coord::Channel => 0,
            Coord::Rank => 1,
            Coord::BankGroup => 2,
            Coord::Bank => 3,
            Coord::Row => 4,
            Coord::Column => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Coord::Channel => "channel",
            Coord::Rank => "rank",
            Coord::BankGroup => "bank_group",
            Coord::Bank => "bank",
            Coord::Row => "row",
            Coord::Column => "column",
        }
    }

    fn from_label(s: &str) -> Option<Coord> {
        Coord::ALL.into_iter().find(|c| c.label() == s)
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One output bit: XOR of the address bits in `mask`, inverted if `invert`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitFunc {
    pub mask: u64,
    pub invert: bool,
}

impl BitFunc {
    pub fn eval(&self, addr: u64) -> u64 {
        (u64::from((addr & self.mask).count_ones()) ^ u64::from(self.invert)) & 1
    }
}

/// Decomposed DRAM coordinates of one physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DramCoord {
    pub channel: u64,
    pub rank: u64,
    pub bank_group: u64,
    pub bank: u64,
    pub row: u64,
    pub column: u64,
}

impl DramCoord {
    pub fn get(&self, coord: Coord) -> u64 {
        match coord {
            Coord::Channel => self.channel,
            Coord::Rank => self.rank,
            Coord::BankGroup => self.bank_group,
            Coord::Bank => self.bank,
            Coord::Row => self.row,
            Coord::Column => self.column,
        }
    }

    fn set(&mut self, coord: Coord, value: u64) {
        match coord {
            Coord::Channel => self.channel = value,
            Coord::Rank => self.rank = value,
            Coord::BankGroup => self.bank_group = value,
            Coord::Bank => self.bank = value,
            Coord::Row => self.row = value,
            Coord::Column => self.column = value,
        }
    }
}

/// Bit widths per coordinate; equals the mask-vector lengths of a mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordWidths {
    pub channel: u32,
    pub rank: u32,
    pub bank_group: u32,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
}

impl CoordWidths {
    pub fn get(&self, coord: Coord) -> u32 {
        match coord {
            Coord::Channel => self.channel,
            Coord::Rank => self.rank,
            Coord::BankGroup => self.bank_group,
            Coord::Bank => self.bank,
            Coord::Row => self.row,
            Coord::Column => self.column,
        }
    }

    pub fn total(&self) -> u32 {
        Coord::ALL.iter().map(|&c| self.get(c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressMapping {
    address_bits: u32,
    masks: [Vec<BitFunc>; N_COORDS],
}

impl AddressMapping {
    pub fn new(address_bits: u32, masks: [Vec<BitFunc>; N_COORDS]) -> Result<Self, AddrMapError> {
        if address_bits == 0 || address_bits > 63 {
            return Err(AddrMapError::Invalid(format!(
                "address_bits must be in 1..=63, got {address_bits}"
            )));
        }
        let mapping = AddressMapping { address_bits, masks };
        let limit = 1u64 << address_bits;
        for (coord, funcs) in mapping.iter_coords() {
            for (bit, f) in funcs.iter().enumerate() {
                if f.mask >= limit {
                    return Err(AddrMapError::Invalid(format!(
                        "{coord}.{bit} references address bits past bit {}",
                        address_bits - 1
                    )));
                }
            }
        }
        Ok(mapping)
    }

    pub fn address_bits(&self) -> u32 {
        self.address_bits
    }

    pub fn funcs(&self, coord: Coord) -> &[BitFunc] {
        &self.masks[coord.index()]
    }

    pub fn iter_coords(&self) -> impl Iterator<Item = (Coord, &Vec<BitFunc>)> {
        Coord::ALL.iter().map(move |&c| (c, &self.masks[c.index()]))
    }

    pub fn widths(&self) -> CoordWidths {
        CoordWidths {
            channel: self.masks[0].len() as u32,
            rank: self.masks[1].len() as u32,
            bank_group: self.masks[2].len() as u32,
            bank: self.masks[3].len() as u32,
            row: self.masks[4].len() as u32,
            column: self.masks[5].len() as u32,
        }
    }

    pub fn decompose(&self, addr: u64) -> Result<DramCoord, AddrMapError> {
        if self.address_bits < 64 && addr >> self.address_bits != 0 {
            return Err(AddrMapError::AddressOutOfRange {
                addr,
                address_bits: self.address_bits,
            });
        }
        let mut out = DramCoord::default();
        for (coord, funcs) in self.iter_coords() {
            let mut value = 0u64;
            for (bit, f) in funcs.iter().enumerate() {
                value |= f.eval(addr) << bit;
            }
            out.set(coord, value);
        }
        Ok(out)
    }

    /// Checks that the mapping addresses exactly the geometry of `device`:
    /// coordinate widths match rank/bank counts and nothing but the column
    /// uses the cache-line offset bits.
    pub fn check_device(&self, device: &DeviceSpec) -> Result<(), AddrMapError> {
        let mismatch = |msg: String| Err(AddrMapError::DeviceMismatch(msg));
        if !device.ranks.is_power_of_two() {
            return mismatch(format!("rank count {} is not a power of two", device.ranks));
        }
        let w = self.widths();
        let want_rank = device.ranks.ilog2();
        let want_bg = device.bank_groups.ilog2();
        let want_bank = (device.banks_per_rank / device.bank_groups).ilog2();
        if w.rank != want_rank {
            return mismatch(format!("rank width {} != log2(ranks) = {want_rank}", w.rank));
        }
        if w.bank_group != want_bg {
            return mismatch(format!(
                "bank_group width {} != log2(bank_groups) = {want_bg}",
                w.bank_group
            ));
        }
        if w.bank != want_bank {
            return mismatch(format!(
                "bank width {} != log2(banks_per_rank / bank_groups) = {want_bank}",
                w.bank
            ));
        }
        // One burst stays within one row: the line offset bits may only feed
        // the column.
        let line_mask = u64::from(device.burst_length) * 8 - 1;
        for (coord, funcs) in self.iter_coords() {
            if coord == Coord::Column {
                continue;
            }
            for (bit, f) in funcs.iter().enumerate() {
                if f.mask & line_mask != 0 {
                    return mismatch(format!(
                        "{coord}.{bit} uses cache-line offset address bits"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Open-page friendly linear layout over one DIMM: column bits lowest
    /// (line offset included), then bank group, bank, rank, row. Consecutive
    /// lines sweep a row before moving to the next bank group.
    pub fn standard(device: &DeviceSpec, row_bytes: u64) -> Result<Self, AddrMapError> {
        if !row_bytes.is_power_of_two() || row_bytes < u64::from(device.burst_length) * 8 {
            return Err(AddrMapError::Invalid(format!(
                "row_bytes {row_bytes} must be a power of two covering one burst"
            )));
        }
        if !device.ranks.is_power_of_two() {
            return Err(AddrMapError::Invalid(format!(
                "rank count {} is not a power of two",
                device.ranks
            )));
        }
        if !device.capacity_per_dimm_bytes.is_power_of_two() {
            return Err(AddrMapError::Invalid(
                "capacity_per_dimm_bytes is not a power of two".to_string(),
            ));
        }
        let col = row_bytes.ilog2();
        let bg = device.bank_groups.ilog2();
        let bank = (device.banks_per_rank / device.bank_groups).ilog2();
        let rank = device.ranks.ilog2();
        let address_bits = device.capacity_per_dimm_bytes.ilog2();
        let fixed = col + bg + bank + rank;
        if address_bits <= fixed {
            return Err(AddrMapError::Invalid(format!(
                "capacity of {address_bits} address bits leaves no row bits"
            )));
        }
        let row = address_bits - fixed;
        let mut masks: [Vec<BitFunc>; N_COORDS] = Default::default();
        let mut next = 0u32;
        for (coord, width) in [
            (Coord::Column, col),
            (Coord::BankGroup, bg),
            (Coord::Bank, bank),
            (Coord::Rank, rank),
            (Coord::Row, row),
        ] {
            let funcs = &mut masks[coord.index()];
            for bit in 0..width {
                funcs.push(BitFunc {
                    mask: 1u64 << (next + bit),
                    invert: false,
                });
            }
            next += width;
        }
        AddressMapping::new(address_bits, masks)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AddrMapError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AddrMapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, AddrMapError> {
        let mut address_bits: Option<u32> = None;
        let mut pending: [Vec<(u32, BitFunc, usize)>; N_COORDS] = Default::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let err = |reason: String| AddrMapError::Parse { line: lineno, reason };
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| err("expected '='".to_string()))?;
            let (lhs, rhs) = (lhs.trim(), rhs.trim());
            if lhs == "address_bits" {
                let n: u32 = rhs.parse().map_err(|_| err("bad address_bits".to_string()))?;
                if address_bits.replace(n).is_some() {
                    return Err(err("address_bits given twice".to_string()));
                }
                continue;
            }
            let (coord_s, bit_s) = lhs
                .split_once('.')
                .ok_or_else(|| err("expected coord.bit".to_string()))?;
            let coord = Coord::from_label(coord_s.trim())
                .ok_or_else(|| err(format!("unknown coordinate {coord_s:?}")))?;
            let bit: u32 = bit_s
                .trim()
                .parse()
                .map_err(|_| err("bad bit index".to_string()))?;
            let (body, invert) = match rhs.strip_suffix("+1") {
                Some(body) => (body.trim(), true),
                None => (rhs, false),
            };
            let body = body
                .strip_prefix("xor(")
                .and_then(|b| b.strip_suffix(')'))
                .ok_or_else(|| err("expected xor(...)".to_string()))?;
            let mut mask = 0u64;
            for term in body.split(',') {
                let term = term.trim();
                if term.is_empty() {
                    continue;
                }
                let n: u32 = term
                    .strip_prefix('a')
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err(format!("bad term {term:?}, expected a<N>")))?;
                if n > 63 {
                    return Err(err(format!("address bit a{n} out of range")));
                }
                mask |= 1u64 << n;
            }
            if pending[coord.index()].iter().any(|(b, _, _)| *b == bit) {
                return Err(err(format!("{coord}.{bit} defined twice")));
            }
            pending[coord.index()].push((bit, BitFunc { mask, invert }, lineno));
        }
        let address_bits = address_bits.ok_or(AddrMapError::Parse {
            line: 0,
            reason: "missing address_bits = <n>".to_string(),
        })?;
        let mut masks: [Vec<BitFunc>; N_COORDS] = Default::default();
        for coord in Coord::ALL {
            let mut defs = std::mem::take(&mut pending[coord.index()]);
            defs.sort_by_key(|(bit, _, _)| *bit);
            for (want, (bit, f, lineno)) in defs.iter().enumerate() {
                if *bit != want as u32 {
                    return Err(AddrMapError::Parse {
                        line: *lineno,
                        reason: format!("{coord} bits are not contiguous from 0"),
                    });
                }
                masks[coord.index()].push(*f);
            }
        }
        AddressMapping::new(address_bits, masks)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("address_bits = {}\n", self.address_bits));
        for (coord, funcs) in self.iter_coords() {
            for (bit, f) in funcs.iter().enumerate() {
                let terms: Vec<String> = (0..64)
                    .filter(|b| f.mask >> b & 1 == 1)
                    .map(|b| format!("a{b}"))
                    .collect();
                let invert = if f.invert { " +1" } else { "" };
                out.push_str(&format!(
                    "{coord}.{bit} = xor({}){invert}\n",
                    terms.join(", ")
                ));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AddrMapError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| AddrMapError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Outcome of `infer_mapping`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceReport {
    /// GF(2) rank of the sample matrix (address bits plus constant column).
    pub rank: u32,
    /// Unknowns per output bit: `address_bits + 1`.
    pub n_unknowns: u32,
    /// `n_unknowns - rank`; zero means every output bit is unique.
    pub free_vars: u32,
    /// Output bits with multiple consistent solutions. The sample matrix is
    /// shared by all bits, so this is every bit or none.
    pub underdetermined: Vec<(Coord, u32)>,
}

#[derive(Debug, Clone)]
pub struct InferredMapping {
    pub mapping: AddressMapping,
    pub report: InferenceReport,
}

/// Rows are bit vectors over u64 limbs; column 0 is limb 0 bit 0.
struct Gf2Rows {
    rows: Vec<Vec<u64>>,
    limbs: usize,
}

impl Gf2Rows {
    fn new(columns: usize) -> Self {
        Gf2Rows {
            rows: Vec::new(),
            limbs: columns.div_ceil(64),
        }
    }

    fn push_row(&mut self, set_bits: impl Iterator<Item = usize>) {
        let mut row = vec![0u64; self.limbs];
        for col in set_bits {
            row[col / 64] |= 1u64 << (col % 64);
        }
        self.rows.push(row);
    }

    fn get(&self, row: usize, col: usize) -> bool {
        self.rows[row][col / 64] >> (col % 64) & 1 == 1
    }

    /// In-place reduced row echelon form, pivoting only on the first
    /// `pivot_cols` columns. Returns the pivot column per pivot row. The
    /// result is canonical for the row space, so sample order cannot change
    /// the inferred mapping.
    fn reduce(&mut self, pivot_cols: usize) -> Vec<usize> {
        let mut pivots = Vec::new();
        let mut r = 0;
        for col in 0..pivot_cols {
            let Some(pivot) = (r..self.rows.len()).find(|&i| self.get(i, col)) else {
                continue;
            };
            self.rows.swap(r, pivot);
            let pivot_row = self.rows[r].clone();
            for (i, row) in self.rows.iter_mut().enumerate() {
                if i != r && row[col / 64] >> (col % 64) & 1 == 1 {
                    for (dst, src) in row.iter_mut().zip(&pivot_row) {
                        *dst ^= src;
                    }
                }
            }
            pivots.push(col);
            r += 1;
            if r == self.rows.len() {
                break;
            }
        }
        pivots
    }
}

/// Recovers the XOR mapping from `(address, coordinates)` observations by
/// Gaussian elimination over GF(2), one affine function per output bit.
/// Underdetermined bits take the solution with all free variables zero
/// (fewest mask bits); contradictory samples are an error.
pub fn infer_mapping(
    samples: &[(u64, DramCoord)],
    widths: &CoordWidths,
    address_bits: u32,
) -> Result<InferredMapping, AddrMapError> {
    if address_bits == 0 || address_bits > 63 {
        return Err(AddrMapError::Invalid(format!(
            "address_bits must be in 1..=63, got {address_bits}"
        )));
    }
    let n_unknowns = address_bits as usize + 1;
    let out_bits: Vec<(Coord, u32)> = Coord::ALL
        .iter()
        .flat_map(|&c| (0..widths.get(c)).map(move |b| (c, b)))
        .collect();
    let columns = n_unknowns + out_bits.len();

    let mut sys = Gf2Rows::new(columns);
    for (index, &(addr, coord)) in samples.iter().enumerate() {
        if addr >> address_bits != 0 {
            return Err(AddrMapError::AddressOutOfRange { addr, address_bits });
        }
        for (c, value) in Coord::ALL.iter().map(|&c| (c, coord.get(c))) {
            let width = widths.get(c);
            if width < 64 && value >> width != 0 {
                return Err(AddrMapError::SampleOutOfRange {
                    index,
                    coord: c,
                    value,
                    width,
                });
            }
        }
        let addr_cols = (0..address_bits as usize).filter(move |&b| addr >> b & 1 == 1);
        let const_col = std::iter::once(address_bits as usize);
        let rhs_cols = out_bits
            .iter()
            .enumerate()
            .filter(|(_, &(c, b))| coord.get(c) >> b & 1 == 1)
            .map(|(j, _)| n_unknowns + j);
        sys.push_row(addr_cols.chain(const_col).chain(rhs_cols));
    }

    let pivots = sys.reduce(n_unknowns);
    let rank = pivots.len();

    // A zero coefficient row with a surviving RHS bit is a contradiction.
    for r in rank..sys.rows.len() {
        for (j, &(coord, bit)) in out_bits.iter().enumerate() {
            if sys.get(r, n_unknowns + j) {
                return Err(AddrMapError::Inconsistent { coord, bit });
            }
        }
    }

    let mut masks: [Vec<BitFunc>; N_COORDS] = Default::default();
    for (j, &(coord, _bit)) in out_bits.iter().enumerate() {
        let mut f = BitFunc {
            mask: 0,
            invert: false,
        };
        for (r, &pcol) in pivots.iter().enumerate() {
            if sys.get(r, n_unknowns + j) {
                if pcol == address_bits as usize {
                    f.invert = true;
                } else {
                    f.mask |= 1u64 << pcol;
                }
            }
        }
        masks[coord.index()].push(f);
    }

    let free_vars = n_unknowns as u32 - rank as u32;
    let underdetermined = if free_vars > 0 { out_bits.clone() } else { Vec::new() };
    Ok(InferredMapping {
        mapping: AddressMapping::new(address_bits, masks)?,
        report: InferenceReport {
            rank: rank as u32,
            n_unknowns: n_unknowns as u32,
            free_vars,
            underdetermined,
        },
    })
}
