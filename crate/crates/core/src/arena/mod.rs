//! Simulated 48-bit arena with a metadata-tracking allocator.
//!
//! Every allocation gets a 16-byte header right below its base. The region
//! from the header through the last object byte plus `pad_bytes` imaginary
//! bytes decides the wrapper frame. Frames up to a slot (`n <= 15`) give a
//! small-framed pointer carrying the header's slot offset; larger frames give
//! a big-framed pointer carrying `n` and a division table entry.

mod memory;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use memory::Memory;

use crate::checker::{Verdict, VerdictKind};
use crate::frame_math::{wrapper_frame, VirtualAddress, WrapperFrame, ADDRESS_BITS, SLOT_BITS};
use crate::metadata::{header_lookup, DivisionTable, Header, LookupError, TableError, HEADER_SIZE};
use crate::tagging::{encode_big, encode_small, untag, TagKind, TaggedPointer};

/// Default arena base: nonzero, and aligned well beyond any arena size we
/// accept so every wrapper frame inside the arena starts inside it.
pub const DEFAULT_ARENA_BASE: VirtualAddress = VirtualAddress::new(1 << 44);
/// Largest arena accepted.
pub const MAX_ARENA_SIZE: u64 = 1 << 44;

const ALIGN: u64 = 16;

fn align_up(v: u64) -> u64 {
    (v + ALIGN - 1) & !(ALIGN - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct AllocId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameClass {
    Small,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationRecord {
    pub id: AllocId,
    /// Start of the storage block; differs from the header only for arrays
    /// whose element size does not divide 16.
    pub block_base: VirtualAddress,
    pub header_addr: VirtualAddress,
    pub obj_base: VirtualAddress,
    pub raw_size: u64,
    pub type_id: u32,
    pub frame: WrapperFrame,
    pub class: FrameClass,
    pub tagged: TaggedPointer,
    pub live: bool,
    pub scope: Option<usize>,
}

impl AllocationRecord {
    /// Last real object byte.
    pub fn last_byte(&self) -> VirtualAddress {
        VirtualAddress::new(self.obj_base.value() + self.raw_size - 1)
    }

    /// True iff `[addr, addr + len)` lies within the object's real bytes.
    pub fn covers(&self, addr: VirtualAddress, len: u64) -> bool {
        len >= 1 && addr >= self.obj_base && addr.value() + (len - 1) <= self.last_byte().value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Objects packed back to back on 16-byte boundaries.
    Bump,
    /// A seeded random gap of up to `max_gap` bytes (multiple of 16) before
    /// each allocation.
    RandomGaps { seed: u64, max_gap: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapConfig {
    pub arena_base: VirtualAddress,
    pub arena_size: u64,
    /// Imaginary tail bytes included when choosing the wrapper frame.
    pub pad_bytes: u64,
    pub placement: Placement,
}

impl HeapConfig {
    pub fn with_size(arena_size: u64) -> Self {
        HeapConfig {
            arena_size,
            ..Self::default()
        }
    }
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            arena_base: DEFAULT_ARENA_BASE,
            arena_size: 1 << 28,
            pad_bytes: 1,
            placement: Placement::Bump,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("arena size {size:#x} exceeds the supported maximum {MAX_ARENA_SIZE:#x}")]
    ArenaTooLarge { size: u64 },
    #[error("arena base {base} must be aligned to the arena size rounded up to a power of two")]
    ArenaBaseAlignment { base: VirtualAddress },
    #[error("arena base must be nonzero")]
    ZeroBase,
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("invalid allocation size {0}")]
    BadSize(u64),
    #[error("arena exhausted: {requested} bytes requested, {available} available")]
    Exhausted { requested: u64, available: u64 },
    #[error("division table entry conflict at ({division}, {slot})")]
    EntryConflict { division: usize, slot: usize },
    #[error("scope_end without a matching scope_begin")]
    NoOpenScope,
    /// The operation was rejected with a verdict (e.g. realloc of a freed pointer).
    #[error("rejected: {}", .0.kind)]
    Rejected(Verdict),
}

/// Space accounting for live allocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct HeapStats {
    pub live_allocations: u64,
    pub live_payload_bytes: u64,
    pub header_bytes: u64,
    pub table_bytes: u64,
    /// `header_bytes + table_bytes`.
    pub overhead_bytes: u64,
}

/// Header, object base and record resolved from a tagged pointer.
#[derive(Debug, Clone, Copy)]
pub struct Resolved {
    pub header_addr: VirtualAddress,
    pub obj_base: VirtualAddress,
    pub header: Header,
    pub class: FrameClass,
    pub alloc: Option<AllocId>,
}

#[derive(Debug, Clone)]
pub struct Heap {
    config: HeapConfig,
    table: DivisionTable,
    memory: Memory,
    cursor: u64,
    gaps: Option<(ChaCha8Rng, u64)>,
    records: Vec<AllocationRecord>,
    by_header: HashMap<VirtualAddress, AllocId>,
    scopes: Vec<Vec<AllocId>>,
    live_allocations: u64,
    live_payload: u64,
}

impl Heap {
    pub fn new(config: HeapConfig) -> Result<Self, HeapError> {
        if config.arena_size > MAX_ARENA_SIZE {
            return Err(HeapError::ArenaTooLarge {
                size: config.arena_size,
            });
        }
        if config.arena_base == VirtualAddress::ZERO {
            return Err(HeapError::ZeroBase);
        }
        let span_bits = config
            .arena_size
            .max(1)
            .next_power_of_two()
            .trailing_zeros();
        if span_bits >= ADDRESS_BITS || !config.arena_base.is_aligned(span_bits) {
            return Err(HeapError::ArenaBaseAlignment {
                base: config.arena_base,
            });
        }
        let table = DivisionTable::new(config.arena_base, config.arena_size)?;
        let gaps = match config.placement {
            Placement::Bump => None,
            Placement::RandomGaps { seed, max_gap } => {
                Some((ChaCha8Rng::seed_from_u64(seed), max_gap / ALIGN))
            }
        };
        Ok(Heap {
            config,
            table,
            memory: Memory::new(),
            cursor: config.arena_base.value(),
            gaps,
            records: Vec::new(),
            by_header: HashMap::new(),
            scopes: Vec::new(),
            live_allocations: 0,
            live_payload: 0,
        })
    }

    pub fn config(&self) -> &HeapConfig {
        &self.config
    }

    pub fn table(&self) -> &DivisionTable {
        &self.table
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn record(&self, id: AllocId) -> Option<&AllocationRecord> {
        self.records.get(id.0 as usize)
    }

    /// Most recent allocation whose header sits at `header`.
    pub fn record_at(&self, header: VirtualAddress) -> Option<&AllocationRecord> {
        self.by_header.get(&header).and_then(|&id| self.record(id))
    }

    pub fn records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.records.iter()
    }

    pub fn live_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.records.iter().filter(|r| r.live)
    }

    pub fn scope_depth(&self) -> usize {
        self.scopes.len()
    }

    pub fn stats(&self) -> HeapStats {
        let header_bytes = self.live_allocations * HEADER_SIZE;
        let table_bytes = self.table.footprint_bytes();
        HeapStats {
            live_allocations: self.live_allocations,
            live_payload_bytes: self.live_payload,
            header_bytes,
            table_bytes,
            overhead_bytes: header_bytes + table_bytes,
        }
    }

    pub fn read_header(&self, header_addr: VirtualAddress) -> Header {
        let mut bytes = [0u8; HEADER_SIZE as usize];
        self.memory.read(header_addr, &mut bytes);
        Header::from_bytes(&bytes)
    }

    /// Resolves a pointer's header and reads it. Never touches liveness.
    pub fn resolve(&self, p: TaggedPointer) -> Result<Resolved, LookupError> {
        let header_addr = header_lookup(p, &self.table)?;
        let class = match p.kind() {
            TagKind::Small { .. } => FrameClass::Small,
            _ => FrameClass::Big,
        };
        Ok(Resolved {
            header_addr,
            obj_base: VirtualAddress::new(header_addr.value() + HEADER_SIZE),
            header: self.read_header(header_addr),
            class,
            alloc: self.by_header.get(&header_addr).copied(),
        })
    }

    fn arena_end(&self) -> u64 {
        self.config.arena_base.value() + self.config.arena_size
    }

    /// Reserves a block with `lead` bytes before the object (the last 16 of
    /// which are the header) and `size` object bytes. Returns the block base.
    fn place(&mut self, lead: u64, size: u64) -> Result<u64, HeapError> {
        let gap = match &mut self.gaps {
            Some((rng, slots)) if *slots > 0 => rng.random_range(0..=*slots) * ALIGN,
            _ => 0,
        };
        let spare = lead - HEADER_SIZE;
        let header = align_up(self.cursor + gap + spare);
        let block = header - spare;
        let end = header + HEADER_SIZE + size;
        let limit = self.arena_end();
        if end + self.config.pad_bytes > limit {
            return Err(HeapError::Exhausted {
                requested: lead + size,
                available: limit.saturating_sub(self.cursor),
            });
        }
        self.cursor = align_up(end);
        Ok(block)
    }

    /// Writes the header, picks the frame, tags the pointer and registers
    /// the record.
    fn install(
        &mut self,
        block: u64,
        header: u64,
        size: u64,
        type_id: u32,
    ) -> Result<(AllocationRecord, TaggedPointer), HeapError> {
        let header_addr = VirtualAddress::new(header);
        let obj_base = VirtualAddress::new(header + HEADER_SIZE);
        let padded_hi = VirtualAddress::new(obj_base.value() + size - 1 + self.config.pad_bytes);
        let frame = wrapper_frame(header_addr, padded_hi).expect("header precedes object end");
        let (class, tagged) = if frame.n() <= SLOT_BITS {
            let p = encode_small(header_addr, obj_base).expect("frame fits inside one slot");
            (FrameClass::Small, p)
        } else {
            let p = encode_big(frame.n(), obj_base).expect("frame within 48-bit space");
            let idx = self.table.entry_index(obj_base, frame.n())?;
            self.table
                .set_entry(idx, header_addr)
                .map_err(|e| match e {
                    TableError::Occupied { division, slot, .. } => {
                        HeapError::EntryConflict { division, slot }
                    }
                    other => other.into(),
                })?;
            (FrameClass::Big, p)
        };

        let header_rec = Header {
            size: size as u32,
            type_id,
        };
        self.memory.write(header_addr, &header_rec.to_bytes());

        let id = AllocId(self.records.len() as u64);
        let record = AllocationRecord {
            id,
            block_base: VirtualAddress::new(block),
            header_addr,
            obj_base,
            raw_size: size,
            type_id,
            frame,
            class,
            tagged,
            live: true,
            scope: self.scopes.len().checked_sub(1),
        };
        self.records.push(record);
        self.by_header.insert(header_addr, id);
        if let Some(scope) = self.scopes.last_mut() {
            scope.push(id);
        }
        self.live_allocations += 1;
        self.live_payload += size;
        Ok((record, tagged))
    }

    fn check_size(size: u64) -> Result<(), HeapError> {
        if size == 0 || size > u64::from(u32::MAX) {
            Err(HeapError::BadSize(size))
        } else {
            Ok(())
        }
    }

    /// Allocates `size` bytes with a header and returns the tagged base pointer.
    pub fn alloc(
        &mut self,
        size: u64,
        type_id: u32,
    ) -> Result<(AllocationRecord, TaggedPointer), HeapError> {
        Self::check_size(size)?;
        let block = self.place(HEADER_SIZE, size)?;
        self.install(block, block, size, type_id)
    }

    /// `calloc`-style allocation. Whole elements are added in front of the
    /// object to hold the header; when 16 is not a multiple of the element
    /// size the spare bytes sit between the block start and the header.
    pub fn alloc_array(
        &mut self,
        count: u64,
        elem_size: u64,
        type_id: u32,
    ) -> Result<(AllocationRecord, TaggedPointer), HeapError> {
        if count == 0 || elem_size == 0 {
            return Err(HeapError::BadSize(0));
        }
        let size = count
            .checked_mul(elem_size)
            .ok_or(HeapError::BadSize(u64::MAX))?;
        Self::check_size(size)?;
        let lead = HEADER_SIZE.div_ceil(elem_size) * elem_size;
        let block = self.place(lead, size)?;
        let header = block + lead - HEADER_SIZE;
        let (record, tagged) = self.install(block, header, size, type_id)?;
        self.memory.fill(record.obj_base, size, 0);
        Ok((record, tagged))
    }

    /// Marks a record dead and clears its table entry if it has one.
    fn retire(&mut self, id: AllocId) {
        let rec = self.records[id.0 as usize];
        debug_assert!(rec.live);
        if rec.class == FrameClass::Big {
            let idx = self
                .table
                .entry_index(rec.obj_base, rec.frame.n())
                .expect("live big-framed record has an entry");
            self.table.reset_entry(idx);
        }
        self.records[id.0 as usize].live = false;
        self.live_allocations -= 1;
        self.live_payload -= rec.raw_size;
    }

    /// Finds the live record a pointer refers to, or the verdict explaining
    /// why there is none.
    fn live_target(&self, p: TaggedPointer) -> Result<AllocId, Verdict> {
        let addr = untag(p);
        let verdict = |kind| Verdict::new(kind, addr);
        match header_lookup(p, &self.table) {
            Ok(header) => match self.by_header.get(&header) {
                Some(&id) if self.records[id.0 as usize].live => Ok(id),
                Some(&id) => Err(verdict(VerdictKind::DoubleFree).with_alloc(Some(id))),
                None => Err(verdict(VerdictKind::Untracked)),
            },
            Err(LookupError::Vacant { .. }) => Err(verdict(VerdictKind::DoubleFree)),
            Err(_) => Err(verdict(VerdictKind::Untracked)),
        }
    }

    /// Releases the object behind `p`. Big-framed objects are judged by
    /// their table entry (vacant means double free); small-framed ones by
    /// the allocation record's liveness.
    pub fn free(&mut self, p: TaggedPointer) -> Verdict {
        let addr = untag(p);
        if let TagKind::Big { n } = p.kind() {
            // The entry itself is the liveness bit: reset first, a zero prior
            // value is the double free.
            let idx = match self.table.entry_index(addr, n) {
                Ok(idx) => idx,
                Err(_) => return Verdict::new(VerdictKind::Untracked, addr),
            };
            let prior = self.table.reset_entry(idx);
            if prior == 0 {
                return Verdict::new(VerdictKind::DoubleFree, addr);
            }
            let header = VirtualAddress::new(prior);
            let Some(&id) = self.by_header.get(&header) else {
                return Verdict::new(VerdictKind::Untracked, addr);
            };
            let rec = &mut self.records[id.0 as usize];
            if rec.live {
                rec.live = false;
                self.live_allocations -= 1;
                self.live_payload -= rec.raw_size;
            }
            return Verdict::new(VerdictKind::Ok, addr).with_alloc(Some(id));
        }
        match self.live_target(p) {
            Ok(id) => {
                self.retire(id);
                Verdict::new(VerdictKind::Ok, addr).with_alloc(Some(id))
            }
            Err(v) => v,
        }
    }

    /// Resizes the object behind `p`. The wrapper frame is recomputed from
    /// scratch; the old pointer is dead afterwards.
    pub fn realloc(
        &mut self,
        p: TaggedPointer,
        new_size: u64,
    ) -> Result<(AllocationRecord, TaggedPointer), HeapError> {
        Self::check_size(new_size)?;
        let old_id = self.live_target(p).map_err(HeapError::Rejected)?;
        let old = self.records[old_id.0 as usize];

        let at_top = self.cursor == align_up(old.obj_base.value() + old.raw_size)
            && old.block_base == old.header_addr;
        if at_top && old.obj_base.value() + new_size + self.config.pad_bytes <= self.arena_end() {
            self.retire(old_id);
            self.cursor = align_up(old.obj_base.value() + new_size);
            return self.install(
                old.block_base.value(),
                old.header_addr.value(),
                new_size,
                old.type_id,
            );
        }

        let (record, tagged) = self.alloc(new_size, old.type_id)?;
        self.memory
            .copy(old.obj_base, record.obj_base, old.raw_size.min(new_size));
        self.retire(old_id);
        Ok((record, tagged))
    }

    /// Opens a scope; allocations until the matching [`Heap::scope_end`]
    /// belong to it.
    pub fn scope_begin(&mut self) -> usize {
        self.scopes.push(Vec::new());
        self.scopes.len() - 1
    }

    /// Closes the innermost scope: big-framed entries of its still-live
    /// allocations are reset and all of them are marked dead.
    pub fn scope_end(&mut self) -> Result<Vec<AllocId>, HeapError> {
        let ids = self.scopes.pop().ok_or(HeapError::NoOpenScope)?;
        let ended: Vec<AllocId> = ids
            .into_iter()
            .filter(|id| self.records[id.0 as usize].live)
            .collect();
        for &id in &ended {
            self.retire(id);
        }
        Ok(ended)
    }
}
