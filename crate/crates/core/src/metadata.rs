//! Per-object headers and the division table for big-framed objects.

use thiserror::Error;

use crate::frame_math::{slot_base, VirtualAddress, DIVISION_BITS};
use crate::tagging::{untag, TagKind, TaggedPointer, MAX_BIG_FRAME, MIN_BIG_FRAME};

/// Bytes reserved for every header. Headers are also 16-aligned.
pub const HEADER_SIZE: u64 = 16;
/// Entries per division array, one per big frame size.
pub const ENTRIES_PER_DIVISION: usize = 48;
/// Bytes per division table entry (a full header address).
pub const ENTRY_BYTES: u64 = 8;

const DIVISION_SIZE: u64 = 1 << DIVISION_BITS;

/// Metadata stored immediately below an object's base.
///
/// On-memory layout is little-endian `size: u32`, `type_id: u32`, then eight
/// zero bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Header {
    /// Raw requested size, never the padded size.
    pub size: u32,
    pub type_id: u32,
}

impl Header {
    pub fn to_bytes(self) -> [u8; HEADER_SIZE as usize] {
        let mut out = [0u8; HEADER_SIZE as usize];
        out[..4].copy_from_slice(&self.size.to_le_bytes());
        out[4..8].copy_from_slice(&self.type_id.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_SIZE as usize]) -> Self {
        Header {
            size: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
            type_id: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("arena base {0} is not 2^16-aligned")]
    MisalignedBase(VirtualAddress),
    #[error("arena size {0:#x} is not a multiple of 2^16")]
    MisalignedSize(u64),
    #[error("arena [{base}, +{size:#x}) does not fit in 48 bits")]
    ArenaTooLarge { base: VirtualAddress, size: u64 },
    #[error("frame base {frame_base} for n={n} is outside the table")]
    OutsideArena { frame_base: VirtualAddress, n: u32 },
    #[error("frame parameter {0} has no division table entry")]
    BadFrameSize(u32),
    #[error("entry ({division}, {slot}) already holds header {held:#x}")]
    Occupied {
        division: usize,
        slot: usize,
        held: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LookupError {
    #[error("pointer carries no tag")]
    Untracked,
    #[error("tag {0:#x} is not a valid frame size")]
    Malformed(u16),
    #[error("entry ({division}, {slot}) is vacant")]
    Vacant { division: usize, slot: usize },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Position of one entry in the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntryIndex {
    pub division: usize,
    pub slot: usize,
}

/// Arena-wide table of division arrays. Entry `(d, i)` serves the
/// `(16 + i)`-frame whose base is `arena_base + d * 2^16`. Zero means vacant.
#[derive(Debug, Clone)]
pub struct DivisionTable {
    arena_base: VirtualAddress,
    divisions: usize,
    entries: Vec<u64>,
}

impl DivisionTable {
    pub fn new(arena_base: VirtualAddress, arena_size: u64) -> Result<Self, TableError> {
        if !arena_base.is_aligned(DIVISION_BITS) {
            return Err(TableError::MisalignedBase(arena_base));
        }
        if !arena_size.is_multiple_of(DIVISION_SIZE) {
            return Err(TableError::MisalignedSize(arena_size));
        }
        if arena_base.checked_add(arena_size).is_none() {
            return Err(TableError::ArenaTooLarge {
                base: arena_base,
                size: arena_size,
            });
        }
        let divisions = (arena_size / DIVISION_SIZE) as usize;
        Ok(DivisionTable {
            arena_base,
            divisions,
            entries: vec![0; divisions * ENTRIES_PER_DIVISION],
        })
    }

    pub fn arena_base(&self) -> VirtualAddress {
        self.arena_base
    }

    pub fn division_count(&self) -> usize {
        self.divisions
    }

    /// Bytes the table occupies: divisions x 48 x 8.
    pub fn footprint_bytes(&self) -> u64 {
        self.entries.len() as u64 * ENTRY_BYTES
    }

    /// Locates the entry for the `n`-frame containing `p`.
    pub fn entry_index(&self, p: VirtualAddress, n: u32) -> Result<EntryIndex, TableError> {
        if !(MIN_BIG_FRAME..=MAX_BIG_FRAME).contains(&n) {
            return Err(TableError::BadFrameSize(n));
        }
        let frame_base = p.align_down(n);
        let outside = TableError::OutsideArena { frame_base, n };
        let offset = frame_base
            .value()
            .checked_sub(self.arena_base.value())
            .ok_or(outside)?;
        let division = (offset >> DIVISION_BITS) as usize;
        if division >= self.divisions {
            return Err(outside);
        }
        Ok(EntryIndex {
            division,
            slot: (n - MIN_BIG_FRAME) as usize,
        })
    }

    fn flat(&self, idx: EntryIndex) -> usize {
        assert!(idx.division < self.divisions && idx.slot < ENTRIES_PER_DIVISION);
        idx.division * ENTRIES_PER_DIVISION + idx.slot
    }

    /// Raw entry content; zero when vacant.
    pub fn entry(&self, idx: EntryIndex) -> u64 {
        self.entries[self.flat(idx)]
    }

    /// Stores a header address into a vacant entry.
    pub fn set_entry(&mut self, idx: EntryIndex, header: VirtualAddress) -> Result<(), TableError> {
        let i = self.flat(idx);
        let held = self.entries[i];
        if held != 0 {
            return Err(TableError::Occupied {
                division: idx.division,
                slot: idx.slot,
                held,
            });
        }
        self.entries[i] = header.value();
        Ok(())
    }

    /// Clears an entry, returning what it held (zero if already vacant).
    pub fn reset_entry(&mut self, idx: EntryIndex) -> u64 {
        let i = self.flat(idx);
        std::mem::take(&mut self.entries[i])
    }

    /// Number of occupied entries.
    pub fn occupied(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count()
    }
}

/// Resolves a tagged pointer to its object's header address.
///
/// Small-framed pointers need only slot arithmetic. Big-framed pointers read
/// the division table, and a vacant entry means the object was released or
/// never allocated.
pub fn header_lookup(
    p: TaggedPointer,
    table: &DivisionTable,
) -> Result<VirtualAddress, LookupError> {
    let addr = untag(p);
    match p.kind() {
        TagKind::Untracked => Err(LookupError::Untracked),
        TagKind::Malformed { tag } => Err(LookupError::Malformed(tag)),
        TagKind::Small { offset } => Ok(VirtualAddress::new(
            slot_base(addr).value() + u64::from(offset),
        )),
        TagKind::Big { n } => {
            let idx = table.entry_index(addr, n)?;
            match table.entry(idx) {
                0 => Err(LookupError::Vacant {
                    division: idx.division,
                    slot: idx.slot,
                }),
                h => Ok(VirtualAddress::new(h)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::{encode_big, encode_small};

    const BASE: u64 = 0x0000_1000_0000_0000;

    fn va(v: u64) -> VirtualAddress {
        VirtualAddress::new(v)
    }

    #[test]
    fn header_is_sixteen_bytes() {
        let h = Header {
            size: 40,
            type_id: 7,
        };
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(Header::from_bytes(&bytes), h);
    }

    #[test]
    fn table_init_examples() {
        let t = DivisionTable::new(va(BASE), 1 << 24).unwrap();
        assert_eq!(t.division_count(), 256);
        assert_eq!(t.occupied(), 0);
        assert_eq!(t.footprint_bytes(), 256 * 48 * 8);

        assert_eq!(
            DivisionTable::new(va(BASE), 1 << 16)
                .unwrap()
                .division_count(),
            1
        );

        let empty = DivisionTable::new(va(BASE), 0).unwrap();
        assert_eq!(empty.division_count(), 0);
        assert!(matches!(
            empty.entry_index(va(BASE), 16),
            Err(TableError::OutsideArena { .. })
        ));
    }

    #[test]
    fn table_init_rejects_misalignment() {
        assert!(matches!(
            DivisionTable::new(va(BASE + 0x10), 1 << 16),
            Err(TableError::MisalignedBase(_))
        ));
        assert!(matches!(
            DivisionTable::new(va(BASE), (1 << 16) + 1),
            Err(TableError::MisalignedSize(_))
        ));
    }

    #[test]
    fn entry_index_examples() {
        let t = DivisionTable::new(va(BASE), 1 << 24).unwrap();
        assert_eq!(
            t.entry_index(va(0x0000_1000_0012_3456), 20).unwrap(),
            EntryIndex {
                division: 16,
                slot: 4
            }
        );
        assert_eq!(
            t.entry_index(va(BASE), 16).unwrap(),
            EntryIndex {
                division: 0,
                slot: 0
            }
        );
        assert_eq!(
            t.entry_index(va(BASE + (1 << 18) - 1), 17).unwrap(),
            EntryIndex {
                division: 2,
                slot: 1
            }
        );
        assert!(matches!(
            t.entry_index(va(BASE - 1), 16),
            Err(TableError::OutsideArena { .. })
        ));
        assert!(matches!(
            t.entry_index(va(BASE + (1 << 24)), 16),
            Err(TableError::OutsideArena { .. })
        ));
        assert_eq!(
            t.entry_index(va(BASE), 15),
            Err(TableError::BadFrameSize(15))
        );
    }

    #[test]
    fn set_and_reset_lifecycle() {
        let mut t = DivisionTable::new(va(BASE), 1 << 24).unwrap();
        let idx = EntryIndex {
            division: 16,
            slot: 4,
        };
        let h = va(BASE + 0xFFF0);
        t.set_entry(idx, h).unwrap();
        assert_eq!(t.entry(idx), h.value());
        assert!(matches!(
            t.set_entry(idx, h),
            Err(TableError::Occupied { .. })
        ));
        assert_eq!(t.reset_entry(idx), h.value());
        assert_eq!(t.reset_entry(idx), 0);
        t.set_entry(idx, h).unwrap();
        assert_eq!(t.occupied(), 1);
    }

    #[test]
    fn lookup_small_and_big() {
        let mut t = DivisionTable::new(va(BASE), 1 << 24).unwrap();
        let slot = BASE + 0x8000;
        let p = encode_small(va(slot + 0x10), va(slot + 0x20)).unwrap();
        assert_eq!(header_lookup(p, &t), Ok(va(slot + 0x10)));

        let target = va(0x0000_1000_0012_3456);
        let p = encode_big(20, target).unwrap();
        assert!(matches!(
            header_lookup(p, &t),
            Err(LookupError::Vacant {
                division: 16,
                slot: 4
            })
        ));
        let h = va(0x0000_1000_0010_0000);
        t.set_entry(t.entry_index(target, 20).unwrap(), h).unwrap();
        assert_eq!(header_lookup(p, &t), Ok(h));

        assert_eq!(
            header_lookup(TaggedPointer::from_raw(0x1234), &t),
            Err(LookupError::Untracked)
        );
        assert_eq!(
            header_lookup(TaggedPointer::from_raw(3 << 48), &t),
            Err(LookupError::Malformed(3))
        );
    }
}
