//! STREAM-like request streams.
//!
//! Each kernel touches up to three arrays of doubles with a fixed per-element
//! access pattern; requests walk the arrays at a fixed byte stride (64 B, one
//! cache line, unless overridden). Streams are generated lazily so
//! 100M-element runs cost no memory, and regeneration is bit-identical.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

/// Bytes per array element (IEEE double).
pub const ELEMENT_SIZE: u64 = 8;

/// Cache line and default stride in bytes.
pub const LINE_BYTES: u64 = 64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("arrays {0} and {1} overlap")]
    Overlap(ArrayId, ArrayId),
    #[error("array {0} base {1:#x} is not {LINE_BYTES}-byte aligned")]
    Alignment(ArrayId, u64),
    #[error("stride {stride} must be a positive multiple of {ELEMENT_SIZE} dividing the array size {array_bytes}")]
    BadStride { stride: u64, array_bytes: u64 },
    #[error("array_len must be positive")]
    EmptyArray,
    #[error("unknown kernel {0:?}")]
    UnknownKernel(String),
    #[error("cannot parse stream: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// The seven kernels; per-element access lists follow the source loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `sum += a[j]`
    Read,
    /// `a[j] = 2`
    Assign,
    /// `b[j] = 2 * a[j]`
    Scale,
    /// `c[j] = a[j] + b[j]`
    Addition,
    /// `a[j] = b[j] + 2 * a[j]`
    Triad,
    /// `b[j] = a[j]`
    Copy,
    /// `a[j] = 2 * a[j]`
    SelfScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrayId {
    A,
    B,
    C,
}

impl fmt::Display for ArrayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArrayId::A => "a",
            ArrayId::B => "b",
            ArrayId::C => "c",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReqKind {
    Read,
    Write,
}

/// One memory request: 64 B transfer at `addr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub kind: ReqKind,
    pub addr: u64,
}

impl KernelKind {
    pub const ALL: [KernelKind; 7] = [
        KernelKind::Read,
        KernelKind::Assign,
        KernelKind::Scale,
        KernelKind::Addition,
        KernelKind::Triad,
        KernelKind::Copy,
        KernelKind::SelfScale,
    ];

    /// Per-element accesses in program order.
    pub fn accesses(self) -> &'static [(ArrayId, ReqKind)] {
        use ArrayId::*;
        use ReqKind::*;
        match self {
            KernelKind::Read => &[(A, Read)],
            KernelKind::Assign => &[(A, Write)],
            KernelKind::Scale => &[(A, Read), (B, Write)],
            KernelKind::Addition => &[(A, Read), (B, Read), (C, Write)],
            KernelKind::Triad => &[(B, Read), (A, Read), (A, Write)],
            KernelKind::Copy => &[(A, Read), (B, Write)],
            KernelKind::SelfScale => &[(A, Read), (A, Write)],
        }
    }

    pub fn arrays_used(self) -> &'static [ArrayId] {
        use ArrayId::*;
        match self {
            KernelKind::Read | KernelKind::Assign | KernelKind::SelfScale => &[A],
            KernelKind::Scale | KernelKind::Copy | KernelKind::Triad => &[A, B],
            KernelKind::Addition => &[A, B, C],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Read => "read",
            KernelKind::Assign => "assign",
            KernelKind::Scale => "scale",
            KernelKind::Addition => "addition",
            KernelKind::Triad => "triad",
            KernelKind::Copy => "copy",
            KernelKind::SelfScale => "self-scale",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['_', ' '], "-");
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || (*k == KernelKind::SelfScale && norm == "selfscale"))
            .ok_or_else(|| WorkloadError::UnknownKernel(s.to_string()))
    }
}

/// Lazily generated request stream for one kernel run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestStream {
    pub kind: KernelKind,
    /// Elements per array.
    pub array_len: u64,
    /// Byte distance between touched elements.
    pub stride: u64,
    /// Base physical address per array (a, b, c).
    pub array_bases: [u64; 3],
    /// Emit a read of the line before every write (read-for-ownership).
    pub rfo: bool,
}

/// Contiguous array placement starting at `base`: a, b, c back to back.
pub fn contiguous_bases(base: u64, array_len: u64) -> [u64; 3] {
    let size = array_len * ELEMENT_SIZE;
    [base, base + size, base + 2 * size]
}

pub fn generate(
    kind: KernelKind,
    array_len: u64,
    stride: u64,
    array_bases: [u64; 3],
    rfo: bool,
) -> Result<RequestStream, WorkloadError> {
    if array_len == 0 {
        return Err(WorkloadError::EmptyArray);
    }
    let array_bytes = array_len * ELEMENT_SIZE;
    if stride == 0 || stride % ELEMENT_SIZE != 0 || array_bytes % stride != 0 {
        return Err(WorkloadError::BadStride { stride, array_bytes });
    }
    let used = kind.arrays_used();
    for &id in used {
        let base = array_bases[array_index(id)];
        if base % LINE_BYTES != 0 {
            return Err(WorkloadError::Alignment(id, base));
        }
    }
    for (i, &x) in used.iter().enumerate() {
        for &y in &used[i + 1..] {
            let (bx, by) = (array_bases[array_index(x)], array_bases[array_index(y)]);
            if bx < by + array_bytes && by < bx + array_bytes {
                return Err(WorkloadError::Overlap(x, y));
            }
        }
    }
    Ok(RequestStream {
        kind,
        array_len,
        stride,
        array_bases,
        rfo,
    })
}

fn array_index(id: ArrayId) -> usize {
    match id {
        ArrayId::A => 0,
        ArrayId::B => 1,
        ArrayId::C => 2,
    }
}

impl RequestStream {
    /// Touched elements per array.
    pub fn iterations(&self) -> u64 {
        self.array_len * ELEMENT_SIZE / self.stride
    }

    fn requests_per_iteration(&self) -> u64 {
        let accesses = self.kind.accesses();
        let writes = accesses.iter().filter(|(_, k)| *k == ReqKind::Write).count();
        (accesses.len() + if self.rfo { writes } else { 0 }) as u64
    }

    /// Total request count; closed form, the iterator yields exactly this.
    pub fn len(&self) -> u64 {
        self.iterations() * self.requests_per_iteration()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> StreamIter<'_> {
        StreamIter {
            stream: self,
            iteration: 0,
            step: 0,
        }
    }

    /// Reads per write as a reduced ratio (reads, writes), RFO included.
    pub fn rw_ratio(&self) -> (u64, u64) {
        let mut reads = 0u64;
        let mut writes = 0u64;
        for &(_, kind) in self.kind.accesses() {
            match kind {
                ReqKind::Read => reads += 1,
                ReqKind::Write => {
                    if self.rfo {
                        reads += 1;
                    }
                    writes += 1;
                }
            }
        }
        (reads, writes)
    }
}

impl<'a> IntoIterator for &'a RequestStream {
    type Item = Request;
    type IntoIter = StreamIter<'a>;

    fn into_iter(self) -> StreamIter<'a> {
        self.iter()
    }
}

/// Steps through (iteration, access) pairs; pure function of its position.
pub struct StreamIter<'a> {
    stream: &'a RequestStream,
    iteration: u64,
    /// Index into the per-iteration request list (RFO reads included).
    step: u64,
}

impl Iterator for StreamIter<'_> {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        let s = self.stream;
        if self.iteration >= s.iterations() {
            return None;
        }
        let offset = self.iteration * s.stride;
        let mut remaining = self.step;
        self.step += 1;
        if self.step == s.requests_per_iteration() {
            self.step = 0;
            self.iteration += 1;
        }
        for &(array, kind) in s.kind.accesses() {
            let addr = s.array_bases[array_index(array)] + offset;
            let expanded: &[ReqKind] = match (kind, s.rfo) {
                (ReqKind::Write, true) => &[ReqKind::Read, ReqKind::Write],
                (ReqKind::Read, _) => &[ReqKind::Read],
                (ReqKind::Write, false) => &[ReqKind::Write],
            };
            for &k in expanded {
                if remaining == 0 {
                    return Some(Request { kind: k, addr });
                }
                remaining -= 1;
            }
        }
        unreachable!("step index inside requests_per_iteration")
    }
}

/// Writes `type,address` CSV; one line per request.
pub fn write_stream_csv(
    requests: impl IntoIterator<Item = Request>,
    out: &mut impl Write,
) -> io::Result<()> {
    writeln!(out, "type,address")?;
    for r in requests {
        let kind = match r.kind {
            ReqKind::Read => "READ",
            ReqKind::Write => "WRITE",
        };
        writeln!(out, "{kind},{}", r.addr)?;
    }
    Ok(())
}

/// Parses the `write_stream_csv` format. The header line is optional and `#`
/// comments are skipped.
pub fn read_stream_csv(input: impl BufRead) -> Result<Vec<Request>, WorkloadError> {
    let mut requests = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "type,address" {
            continue;
        }
        let err = |reason: &str| WorkloadError::Parse {
            line: idx + 1,
            reason: reason.to_string(),
        };
        let (kind, addr) = line.split_once(',').ok_or_else(|| err("expected type,address"))?;
        let kind = match kind.trim() {
            "READ" => ReqKind::Read,
            "WRITE" => ReqKind::Write,
            other => return Err(err(&format!("unknown request type {other:?}"))),
        };
        let addr: u64 = addr
            .trim()
            .parse()
            .map_err(|_| err("address is not an unsigned integer"))?;
        requests.push(Request { kind, addr });
    }
    Ok(requests)
}
