//! Arithmetic over frames, slots and divisions.
//!
//! A frame is a `2^n`-byte block aligned to its own size. Everything here is
//! pure bit arithmetic on untagged 48-bit addresses; nothing reads metadata.

use std::fmt;

use thiserror::Error;

/// Number of address bits usable by untagged pointers.
pub const ADDRESS_BITS: u32 = 48;
/// Mask selecting the address part of a 64-bit pointer value.
pub const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;
/// log2 of the slot size. Small-framed objects and their headers share a slot.
pub const SLOT_BITS: u32 = 15;
/// log2 of the division size, the indexing unit of the division table.
pub const DIVISION_BITS: u32 = 16;
/// Largest frame parameter accepted by the arithmetic.
pub const MAX_FRAME_BITS: u32 = 63;

/// An untagged virtual address inside the 48-bit user space.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, serde::Serialize)]
#[serde(transparent)]
pub struct VirtualAddress(u64);

impl VirtualAddress {
    pub const ZERO: VirtualAddress = VirtualAddress(0);

    /// Panics if `value` does not fit in 48 bits.
    pub const fn new(value: u64) -> Self {
        assert!(value <= ADDRESS_MASK, "address exceeds 48 bits");
        VirtualAddress(value)
    }

    pub const fn try_new(value: u64) -> Option<Self> {
        if value <= ADDRESS_MASK {
            Some(VirtualAddress(value))
        } else {
            None
        }
    }

    #[inline]
    pub const fn value(self) -> u64 {
        self.0
    }

    /// `self + bytes`, or `None` when the result leaves the 48-bit space.
    pub fn checked_add(self, bytes: u64) -> Option<Self> {
        self.0.checked_add(bytes).and_then(Self::try_new)
    }

    /// `self + delta` for a signed delta, staying inside the 48-bit space.
    pub fn checked_offset(self, delta: i64) -> Option<Self> {
        self.0.checked_add_signed(delta).and_then(Self::try_new)
    }

    pub fn is_aligned(self, bits: u32) -> bool {
        self.0 & low_mask(bits) == 0
    }

    /// The address with its low `bits` bits cleared.
    pub fn align_down(self, bits: u32) -> Self {
        VirtualAddress(self.0 & !low_mask(bits))
    }
}

impl fmt::Debug for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#014x}", self.0)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl From<VirtualAddress> for u64 {
    fn from(a: VirtualAddress) -> u64 {
        a.0
    }
}

#[inline]
fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("malformed region: lower bound {lo} above upper bound {hi}")]
    Inverted {
        lo: VirtualAddress,
        hi: VirtualAddress,
    },
}

/// The smallest size-aligned power-of-two block containing a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub struct WrapperFrame {
    n: u32,
    base: VirtualAddress,
}

impl WrapperFrame {
    /// Builds a frame from its parameter and any address inside it.
    pub fn containing(addr: VirtualAddress, n: u32) -> Self {
        assert!(n <= MAX_FRAME_BITS, "frame parameter {n} out of range");
        WrapperFrame {
            n,
            base: addr.align_down(n),
        }
    }

    /// log2 of the frame size.
    #[inline]
    pub fn n(&self) -> u32 {
        self.n
    }

    #[inline]
    pub fn base(&self) -> VirtualAddress {
        self.base
    }

    pub fn size(&self) -> u64 {
        1u64 << self.n
    }

    /// Last byte address covered by the frame.
    pub fn last(&self) -> u64 {
        self.base.value() + (self.size() - 1)
    }

    pub fn contains(&self, addr: VirtualAddress) -> bool {
        addr >= self.base && addr.value() <= self.last()
    }
}

/// Wrapper frame of the inclusive region `[lo, hi]`.
///
/// `n` is the position of the highest bit in which `lo` and `hi` differ, plus
/// one (`64 - clz(lo ^ hi)`). Identical bounds give the 0-frame at `lo`.
pub fn wrapper_frame(lo: VirtualAddress, hi: VirtualAddress) -> Result<WrapperFrame, FrameError> {
    if lo > hi {
        return Err(FrameError::Inverted { lo, hi });
    }
    let diff = lo.value() ^ hi.value();
    let n = if diff == 0 {
        0
    } else {
        64 - diff.leading_zeros()
    };
    Ok(WrapperFrame::containing(lo, n))
}

/// Reference frame selection by linear scan: the smallest `n` such that
/// `lo / 2^n == hi / 2^n`. Slow, used to cross-check [`wrapper_frame`].
pub fn wrapper_frame_oracle(lo: VirtualAddress, hi: VirtualAddress) -> u32 {
    assert!(lo <= hi, "oracle requires lo <= hi");
    for n in 0..=MAX_FRAME_BITS {
        let size = 2u64.pow(n);
        if lo.value() / size == hi.value() / size {
            return n;
        }
    }
    64
}

/// Base of the 2^15 slot holding `addr`.
#[inline]
pub fn slot_base(addr: VirtualAddress) -> VirtualAddress {
    addr.align_down(SLOT_BITS)
}

/// True iff `p` and `q` lie in the same `n`-frame.
#[inline]
pub fn in_frame(p: VirtualAddress, q: VirtualAddress, n: u32) -> bool {
    debug_assert!(n <= MAX_FRAME_BITS);
    (p.value() ^ q.value()) & !low_mask(n) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn va(v: u64) -> VirtualAddress {
        VirtualAddress::new(v)
    }

    #[test]
    fn wrapper_frame_examples() {
        let f = wrapper_frame(va(0x1000), va(0x100F)).unwrap();
        assert_eq!((f.n(), f.base()), (4, va(0x1000)));

        let f = wrapper_frame(va(0x0FF8), va(0x1007)).unwrap();
        assert_eq!((f.n(), f.base()), (13, va(0)));

        let f = wrapper_frame(va(0x1000), va(0x1000)).unwrap();
        assert_eq!((f.n(), f.base()), (0, va(0x1000)));
    }

    #[test]
    fn wrapper_frame_rejects_inverted_region() {
        assert!(matches!(
            wrapper_frame(va(0x2000), va(0x1000)),
            Err(FrameError::Inverted { .. })
        ));
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(wrapper_frame_oracle(va(0x1000), va(0x100F)), 4);
        assert_eq!(wrapper_frame_oracle(va(0), va(0)), 0);
        assert_eq!(wrapper_frame_oracle(va(0), va(1 << 47)), 48);
    }

    #[test]
    fn slot_base_examples() {
        assert_eq!(
            slot_base(va(0x0000_1000_0000_8FF3)),
            va(0x0000_1000_0000_8000)
        );
        assert_eq!(slot_base(va(0)), va(0));
        assert_eq!(slot_base(va(0x7FFF)), va(0));
    }

    #[test]
    fn in_frame_examples() {
        assert!(in_frame(va(0x8010), va(0x8FF0), 15));
        assert!(!in_frame(va(0x8010), va(0x1_0010), 15));
        assert!(in_frame(va(0x1234), va(0x1234), 0));
    }

    #[test]
    fn address_bounds() {
        assert!(VirtualAddress::try_new(1 << 48).is_none());
        assert_eq!(va(10).checked_offset(-11), None);
        assert_eq!(va(10).checked_offset(-10), Some(va(0)));
        assert_eq!(va(ADDRESS_MASK).checked_add(1), None);
    }

    fn region() -> impl Strategy<Value = (u64, u64)> {
        (0..=ADDRESS_MASK, 0..=ADDRESS_MASK).prop_map(|(a, b)| (a.min(b), a.max(b)))
    }

    proptest! {
        #[test]
        fn matches_oracle((lo, hi) in region()) {
            let f = wrapper_frame(va(lo), va(hi)).unwrap();
            prop_assert_eq!(f.n(), wrapper_frame_oracle(va(lo), va(hi)));
        }

        #[test]
        fn bounds_straddle_subframes((lo, hi) in region()) {
            let f = wrapper_frame(va(lo), va(hi)).unwrap();
            prop_assert!(f.contains(va(lo)) && f.contains(va(hi)));
            prop_assert!(f.base().is_aligned(f.n()));
            if f.n() > 0 {
                let half = 1u64 << (f.n() - 1);
                prop_assert!(lo - f.base().value() < half);
                prop_assert!(hi - f.base().value() >= half);
            }
            for m in 0..f.n() {
                prop_assert!(f.base().is_aligned(m));
            }
        }

        #[test]
        fn in_frame_symmetric_and_monotone(p in 0..=ADDRESS_MASK, q in 0..=ADDRESS_MASK, n in 0u32..=63) {
            let (p, q) = (va(p), va(q));
            prop_assert_eq!(in_frame(p, q, n), in_frame(q, p, n));
            if in_frame(p, q, n) {
                for m in n..=63 {
                    prop_assert!(in_frame(p, q, m));
                }
            }
        }
    }
}
