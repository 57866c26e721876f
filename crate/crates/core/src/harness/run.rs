//! Replays a trace against a fresh heap and checker.

use std::collections::HashMap;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use super::trace::TraceEvent;
use crate::arena::{Heap, HeapConfig, HeapError, Placement, DEFAULT_ARENA_BASE};
use crate::checker::{AccessRequest, CheckCounts, Checker, Verdict, VerdictKind};
use crate::frame_math::VirtualAddress;
use crate::metadata::HEADER_SIZE;
use crate::tagging::TaggedPointer;

const MIN_ARENA: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArenaSize {
    /// Smallest power of two covering the trace's worst-case usage.
    Auto,
    Fixed(u64),
}

impl FromStr for ArenaSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ArenaSize::Auto);
        }
        let parsed = match s.strip_prefix("0x") {
            Some(hex) => u64::from_str_radix(hex, 16),
            None => s.parse(),
        };
        parsed
            .map(ArenaSize::Fixed)
            .map_err(|_| format!("invalid arena size `{s}` (bytes or `auto`)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub arena_base: VirtualAddress,
    pub arena_size: ArenaSize,
    pub pad_bytes: u64,
    pub arith_checks: bool,
    pub fail_on_violation: bool,
    pub placement: Placement,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arena_base: DEFAULT_ARENA_BASE,
            arena_size: ArenaSize::Auto,
            pad_bytes: 1,
            arith_checks: false,
            fail_on_violation: false,
            placement: Placement::Bump,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(HeapError),
    #[error("event {index} ({op}): {source}")]
    Event {
        index: usize,
        op: &'static str,
        source: HeapError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VerdictCounts {
    pub ok: u64,
    pub overflow: u64,
    pub underflow: u64,
    pub out_of_frame: u64,
    pub use_after_free: u64,
    pub double_free: u64,
    pub untracked: u64,
}

impl VerdictCounts {
    pub fn add(&mut self, kind: VerdictKind) {
        *self.slot(kind) += 1;
    }

    fn slot(&mut self, kind: VerdictKind) -> &mut u64 {
        match kind {
            VerdictKind::Ok => &mut self.ok,
            VerdictKind::Overflow => &mut self.overflow,
            VerdictKind::Underflow => &mut self.underflow,
            VerdictKind::OutOfFrame => &mut self.out_of_frame,
            VerdictKind::UseAfterFree => &mut self.use_after_free,
            VerdictKind::DoubleFree => &mut self.double_free,
            VerdictKind::Untracked => &mut self.untracked,
        }
    }

    pub fn get(&self, kind: VerdictKind) -> u64 {
        let mut c = *self;
        *c.slot(kind)
    }

    pub fn violations(&self) -> u64 {
        VerdictKind::ALL
            .iter()
            .filter(|k| k.is_violation())
            .map(|&k| self.get(k))
            .sum()
    }
}

/// Space use at the point of peak live payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overhead {
    pub header_bytes: u64,
    pub table_bytes: u64,
    pub payload_bytes: u64,
    /// `(header + table + payload) / payload`; 1.0 when nothing was live.
    pub ratio: f64,
}

impl Overhead {
    fn new(header_bytes: u64, table_bytes: u64, payload_bytes: u64) -> Self {
        let ratio = if payload_bytes == 0 {
            1.0
        } else {
            (header_bytes + table_bytes + payload_bytes) as f64 / payload_bytes as f64
        };
        Overhead {
            header_bytes,
            table_bytes,
            payload_bytes,
            ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventOutcome {
    pub event: usize,
    pub op: &'static str,
    /// `None` for events that perform no check.
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub verdicts: VerdictCounts,
    pub overhead: Overhead,
    pub checks: CheckCounts,
    pub arena_size: u64,
    pub events: Vec<EventOutcome>,
}

impl RunReport {
    pub fn violations(&self) -> impl Iterator<Item = (usize, &Verdict)> {
        self.events
            .iter()
            .filter_map(|e| e.verdict.as_ref().map(|v| (e.event, v)))
            .filter(|(_, v)| v.is_violation())
    }

    /// Process exit status for this run under `config`.
    pub fn exit_code(&self, config: &RunConfig) -> i32 {
        if config.fail_on_violation && self.verdicts.violations() > 0 {
            1
        } else {
            0
        }
    }
}

/// Worst-case bump usage of a trace, rounded up to a power of two.
pub fn required_arena_bytes(events: &[TraceEvent], config: &RunConfig) -> u64 {
    let gap = match config.placement {
        Placement::Bump => 0,
        Placement::RandomGaps { max_gap, .. } => max_gap,
    };
    let block = |lead: u64, size: u64| lead + size + 2 * 16 + gap;
    let total: u64 = events
        .iter()
        .map(|ev| match ev {
            TraceEvent::Alloc { size, .. } => block(HEADER_SIZE, *size),
            TraceEvent::Realloc { new_size, .. } => block(HEADER_SIZE, *new_size),
            TraceEvent::AllocArray {
                count, elem_size, ..
            } => block(
                HEADER_SIZE.div_ceil(*elem_size) * elem_size,
                count.saturating_mul(*elem_size),
            ),
            _ => 0,
        })
        .fold(0u64, u64::saturating_add)
        .saturating_add(config.pad_bytes);
    total
        .max(MIN_ARENA)
        .checked_next_power_of_two()
        .unwrap_or(u64::MAX)
}

struct Engine<'c> {
    config: &'c RunConfig,
    heap: Heap,
    checker: Checker,
    ptrs: HashMap<String, TaggedPointer>,
    counts: VerdictCounts,
    peak: Overhead,
}

impl Engine<'_> {
    fn ptr(&self, id: &str) -> TaggedPointer {
        // parse_trace guarantees ids are defined before use
        self.ptrs[id]
    }

    fn at(&self, id: &str, offset: i64) -> Option<TaggedPointer> {
        self.ptr(id).checked_offset(offset)
    }

    fn escaped(&self, id: &str, size: u64) -> Verdict {
        Verdict::new(VerdictKind::OutOfFrame, self.ptr(id).address()).with_access_size(size)
    }

    fn step(&mut self, ev: &TraceEvent, index: usize) -> Result<Option<Verdict>, HeapError> {
        let v = match ev {
            TraceEvent::Alloc { id, size, type_id } => {
                let (_, p) = self.heap.alloc(*size, *type_id)?;
                self.ptrs.insert(id.clone(), p);
                None
            }
            TraceEvent::AllocArray {
                id,
                count,
                elem_size,
            } => {
                let (_, p) = self.heap.alloc_array(*count, *elem_size, 0)?;
                self.ptrs.insert(id.clone(), p);
                None
            }
            TraceEvent::Realloc { id, new_size } => {
                match self.heap.realloc(self.ptr(id), *new_size) {
                    Ok((rec, p)) => {
                        self.ptrs.insert(id.clone(), p);
                        Some(Verdict::new(VerdictKind::Ok, rec.obj_base).with_alloc(Some(rec.id)))
                    }
                    Err(HeapError::Rejected(v)) => Some(v),
                    Err(e) => return Err(e),
                }
            }
            TraceEvent::Free { id } => {
                let p = self.ptr(id);
                Some(self.checker.check_free(&mut self.heap, p))
            }
            TraceEvent::Load {
                id,
                offset,
                access_size,
            }
            | TraceEvent::Store {
                id,
                offset,
                access_size,
            } => {
                let is_store = matches!(ev, TraceEvent::Store { .. });
                let Some(p) = self.at(id, *offset) else {
                    return Ok(Some(self.escaped(id, *access_size)));
                };
                let req = AccessRequest {
                    tagged: p,
                    access_size: *access_size,
                    is_store,
                };
                let (v, addr) = self.checker.check_access(&self.heap, req);
                if v.is_ok() {
                    let mem = self.heap.memory_mut();
                    if is_store {
                        mem.fill(addr, *access_size, (index as u8) | 1);
                    } else {
                        let mut buf = vec![0u8; *access_size as usize];
                        mem.read(addr, &mut buf);
                    }
                }
                Some(v)
            }
            TraceEvent::PtrAdd { id, offset } => {
                if !self.config.arith_checks {
                    return Ok(None);
                }
                let old = self.ptr(id);
                match old.checked_offset(*offset) {
                    Some(new) => Some(self.checker.check_arith(old, new)),
                    None => Some(self.escaped(id, 0)),
                }
            }
            TraceEvent::Memcpy { dst, src, n } | TraceEvent::Strncpy { dst, src, n } => {
                let (d, s) = (self.ptr(dst), self.ptr(src));
                let v = self.checker.check_bounded_pair(&self.heap, d, s, *n);
                if v.is_ok() {
                    self.heap.memory_mut().copy(s.address(), d.address(), *n);
                }
                Some(v)
            }
            TraceEvent::Strcpy { dst, src, srclen } => {
                let (d, s) = (self.ptr(dst), self.ptr(src));
                let v = self.checker.check_strcpy(&self.heap, d, s, *srclen);
                if v.is_ok() {
                    let mem = self.heap.memory_mut();
                    mem.copy(s.address(), d.address(), *srclen);
                    mem.write(VirtualAddress::new(d.address().value() + srclen), &[0]);
                }
                Some(v)
            }
            TraceEvent::ScopeBegin => {
                self.heap.scope_begin();
                None
            }
            TraceEvent::ScopeEnd => {
                self.heap.scope_end()?;
                None
            }
        };
        Ok(v)
    }

    fn observe_peak(&mut self) {
        let s = self.heap.stats();
        if s.live_payload_bytes > self.peak.payload_bytes {
            self.peak = Overhead::new(s.header_bytes, s.table_bytes, s.live_payload_bytes);
        }
    }
}

/// Executes `events` in order. Violations are data in the report; only
/// configuration problems and allocator failures (exhaustion, unbalanced
/// scopes) abort the run.
pub fn run_trace(events: &[TraceEvent], config: &RunConfig) -> Result<RunReport, RunError> {
    let arena_size = match config.arena_size {
        ArenaSize::Fixed(n) => n,
        ArenaSize::Auto => required_arena_bytes(events, config),
    };
    let heap = Heap::new(HeapConfig {
        arena_base: config.arena_base,
        arena_size,
        pad_bytes: config.pad_bytes,
        placement: config.placement,
    })
    .map_err(RunError::Config)?;
    let table_bytes = heap.table().footprint_bytes();

    let mut engine = Engine {
        config,
        heap,
        checker: Checker::new(),
        ptrs: HashMap::new(),
        counts: VerdictCounts::default(),
        peak: Overhead::new(0, table_bytes, 0),
    };
    let mut outcomes = Vec::with_capacity(events.len());
    for (index, ev) in events.iter().enumerate() {
        let verdict = engine.step(ev, index).map_err(|source| RunError::Event {
            index,
            op: ev.op(),
            source,
        })?;
        if let Some(v) = &verdict {
            engine.counts.add(v.kind);
        }
        engine.observe_peak();
        outcomes.push(EventOutcome {
            event: index,
            op: ev.op(),
            verdict,
        });
    }
    Ok(RunReport {
        verdicts: engine.counts,
        overhead: engine.peak,
        checks: engine.checker.counts(),
        arena_size,
        events: outcomes,
    })
}
