//! Tagged pointer encoding.
//!
//! Layout of the 64-bit value, most significant bit first:
//!
//! ```text
//! | flag (1) | tag (15) | address (48) |
//! ```
//!
//! With the flag set the tag is the byte offset from the slot base to the
//! object's header. With the flag clear the tag is `N`, log2 of the wrapper
//! frame size (16..=48). A clear flag with a zero tag is a plain, untracked
//! address.

use std::fmt;

use thiserror::Error;

use crate::frame_math::{slot_base, VirtualAddress, ADDRESS_BITS, ADDRESS_MASK, DIVISION_BITS};

const FLAG_BIT: u32 = 63;
const TAG_MASK: u64 = 0x7FFF;

/// Smallest `N` carried by a big-framed pointer.
pub const MIN_BIG_FRAME: u32 = DIVISION_BITS;
/// Largest `N`; no frame in a 48-bit space is bigger.
pub const MAX_BIG_FRAME: u32 = ADDRESS_BITS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("header {header} and target {target} are in different slots")]
    CrossSlot {
        header: VirtualAddress,
        target: VirtualAddress,
    },
    #[error("frame parameter {0} is not a big-frame size (16..=48)")]
    BadFrameSize(u32),
}

/// What the top 16 bits of a pointer say about its referent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    /// Flag and tag clear: not tracked.
    Untracked,
    /// Flag set; the tag is the header's offset within the slot.
    Small { offset: u16 },
    /// Flag clear; the tag is the wrapper frame's log2 size.
    Big { n: u32 },
    /// Flag clear with a tag that no allocation produces.
    Malformed { tag: u16 },
}

/// A 64-bit pointer value that may carry a tag in its top 16 bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaggedPointer(u64);

impl TaggedPointer {
    pub const fn from_raw(raw: u64) -> Self {
        TaggedPointer(raw)
    }

    /// A plain address with no tag.
    pub const fn untagged(addr: VirtualAddress) -> Self {
        TaggedPointer(addr.value())
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub const fn flag(self) -> bool {
        self.0 >> FLAG_BIT == 1
    }

    #[inline]
    pub const fn tag(self) -> u16 {
        ((self.0 >> ADDRESS_BITS) & TAG_MASK) as u16
    }

    #[inline]
    pub fn address(self) -> VirtualAddress {
        untag(self)
    }

    pub fn kind(self) -> TagKind {
        let tag = self.tag();
        if self.flag() {
            TagKind::Small { offset: tag }
        } else if tag == 0 {
            TagKind::Untracked
        } else if (MIN_BIG_FRAME..=MAX_BIG_FRAME).contains(&u32::from(tag)) {
            TagKind::Big { n: u32::from(tag) }
        } else {
            TagKind::Malformed { tag }
        }
    }

    /// Same tag bits, different address. This is what pointer arithmetic
    /// does to a tagged value as long as the address stays in 48 bits.
    pub fn with_address(self, addr: VirtualAddress) -> Self {
        TaggedPointer((self.0 & !ADDRESS_MASK) | addr.value())
    }

    /// Pointer arithmetic on the address part. `None` if the address would
    /// leave the 48-bit space.
    pub fn checked_offset(self, delta: i64) -> Option<Self> {
        self.address()
            .checked_offset(delta)
            .map(|a| self.with_address(a))
    }
}

impl fmt::Debug for TaggedPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaggedPointer({:#018x})", self.0)
    }
}

impl fmt::Display for TaggedPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// Pointer to `target` for a small-framed object whose header is at `header`.
pub fn encode_small(
    header: VirtualAddress,
    target: VirtualAddress,
) -> Result<TaggedPointer, TagError> {
    let slot = slot_base(header);
    if slot != slot_base(target) {
        return Err(TagError::CrossSlot { header, target });
    }
    let offset = header.value() - slot.value();
    Ok(TaggedPointer(
        (1 << FLAG_BIT) | (offset << ADDRESS_BITS) | target.value(),
    ))
}

/// Pointer to `target` for a big-framed object with wrapper frame size `2^n`.
pub fn encode_big(n: u32, target: VirtualAddress) -> Result<TaggedPointer, TagError> {
    if !(MIN_BIG_FRAME..=MAX_BIG_FRAME).contains(&n) {
        return Err(TagError::BadFrameSize(n));
    }
    Ok(TaggedPointer(
        (u64::from(n) << ADDRESS_BITS) | target.value(),
    ))
}

/// Clears the top 16 bits. Total: untagged values pass through.
#[inline]
pub fn untag(p: TaggedPointer) -> VirtualAddress {
    VirtualAddress::new(p.0 & ADDRESS_MASK)
}

/// Splits a pointer into `(flag, tag, address)`.
pub fn decode(p: TaggedPointer) -> (bool, u16, VirtualAddress) {
    (p.flag(), p.tag(), untag(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_math::SLOT_BITS;
    use proptest::prelude::*;

    const SLOT: u64 = 0x0000_1000_0000_8000;

    fn va(v: u64) -> VirtualAddress {
        VirtualAddress::new(v)
    }

    #[test]
    fn small_examples() {
        let p = encode_small(va(SLOT + 0x10), va(SLOT + 0x20)).unwrap();
        assert_eq!(decode(p), (true, 0x10, va(SLOT + 0x20)));

        let p = encode_small(va(SLOT), va(SLOT + 16)).unwrap();
        assert_eq!(p.tag(), 0);

        let p = encode_small(va(SLOT), va(SLOT)).unwrap();
        assert_eq!(decode(p), (true, 0, va(SLOT)));
    }

    #[test]
    fn small_rejects_cross_slot() {
        let err = encode_small(va(SLOT + 0x7FF0), va(SLOT + 0x8000)).unwrap_err();
        assert!(matches!(err, TagError::CrossSlot { .. }));
    }

    #[test]
    fn big_examples() {
        let p = encode_big(20, va(0x0000_1000_0012_3456)).unwrap();
        assert_eq!(p.raw(), 0x0014_1000_0012_3456);
        assert_eq!(encode_big(16, va(0)).unwrap().raw(), 0x0010_0000_0000_0000);
        let p = encode_big(48, va(ADDRESS_MASK)).unwrap();
        assert_eq!(decode(p), (false, 0x30, va(ADDRESS_MASK)));
        assert_eq!(encode_big(15, va(0)), Err(TagError::BadFrameSize(15)));
        assert_eq!(encode_big(49, va(0)), Err(TagError::BadFrameSize(49)));
    }

    #[test]
    fn untag_examples() {
        let f = |raw| untag(TaggedPointer::from_raw(raw)).value();
        assert_eq!(f(0x8014_1000_0012_3456), 0x0000_1000_0012_3456);
        assert_eq!(f(0x1234), 0x1234);
        assert_eq!(f(0xFFFF_0000_0000_0000), 0);
        assert_eq!(decode(TaggedPointer::from_raw(0)), (false, 0, va(0)));
    }

    #[test]
    fn kinds() {
        assert_eq!(TaggedPointer::from_raw(0x1234).kind(), TagKind::Untracked);
        assert_eq!(
            encode_big(20, va(0)).unwrap().kind(),
            TagKind::Big { n: 20 }
        );
        assert_eq!(
            encode_small(va(SLOT + 0x30), va(SLOT + 0x40))
                .unwrap()
                .kind(),
            TagKind::Small { offset: 0x30 }
        );
        assert_eq!(
            TaggedPointer::from_raw(5 << 48).kind(),
            TagKind::Malformed { tag: 5 }
        );
    }

    proptest! {
        #[test]
        fn small_round_trip(slot in 0u64..(1 << 33), h in 0u64..(1 << SLOT_BITS), t in 0u64..(1 << SLOT_BITS)) {
            let base = slot << SLOT_BITS;
            let p = encode_small(va(base + h), va(base + t)).unwrap();
            prop_assert_eq!(decode(p), (true, h as u16, va(base + t)));
        }

        #[test]
        fn small_tag_stable_within_slot(slot in 0u64..(1 << 33), h in 0u64..(1 << SLOT_BITS), t1 in 0u64..(1 << SLOT_BITS), t2 in 0u64..(1 << SLOT_BITS)) {
            let base = slot << SLOT_BITS;
            let a = encode_small(va(base + h), va(base + t1)).unwrap();
            let b = encode_small(va(base + h), va(base + t2)).unwrap();
            prop_assert_eq!(a.tag(), b.tag());
            prop_assert_eq!(a.with_address(va(base + t2)), b);
        }

        #[test]
        fn big_round_trip(n in MIN_BIG_FRAME..=MAX_BIG_FRAME, a in 0..=ADDRESS_MASK) {
            let p = encode_big(n, va(a)).unwrap();
            prop_assert_eq!(decode(p), (false, n as u16, va(a)));
        }

        #[test]
        fn untag_idempotent(raw in any::<u64>()) {
            let once = untag(TaggedPointer::from_raw(raw));
            prop_assert_eq!(untag(TaggedPointer::untagged(once)), once);
        }
    }
}
