//! Runtime checks on tagged pointers.
//!
//! Access checks resolve the header, read the raw size and compare the
//! touched byte range with `[obj_base, obj_base + size - 1]`. The arithmetic
//! check is metadata-free: it only asks whether a derived pointer left its
//! wrapper frame (the slot, for small-framed objects).

mod verdict;

use serde::Serialize;

pub use verdict::{Operand, Verdict, VerdictKind};

use crate::arena::Heap;
use crate::frame_math::{in_frame, VirtualAddress, SLOT_BITS};
use crate::metadata::{LookupError, TableError};
use crate::tagging::{untag, TagKind, TaggedPointer};

/// A load or store through a tagged pointer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRequest {
    pub tagged: TaggedPointer,
    /// Bytes touched, i.e. the size of the accessed type.
    pub access_size: u64,
    pub is_store: bool,
}

impl AccessRequest {
    pub fn load(tagged: TaggedPointer, access_size: u64) -> Self {
        AccessRequest {
            tagged,
            access_size,
            is_store: false,
        }
    }

    pub fn store(tagged: TaggedPointer, access_size: u64) -> Self {
        AccessRequest {
            tagged,
            access_size,
            is_store: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CheckCounts {
    pub access_checks: u64,
    pub arith_checks: u64,
    pub lookups_small: u64,
    pub lookups_big: u64,
}

/// Stateless apart from its counters; all metadata lives in the [`Heap`].
#[derive(Debug, Clone, Default)]
pub struct Checker {
    counts: CheckCounts,
}

impl Checker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> CheckCounts {
        self.counts
    }

    fn count_lookup(&mut self, p: TaggedPointer) {
        match p.kind() {
            TagKind::Small { .. } => self.counts.lookups_small += 1,
            TagKind::Big { .. } => self.counts.lookups_big += 1,
            _ => {}
        }
    }

    /// Bounds check before a dereference. Returns the verdict and the
    /// untagged address to dereference.
    pub fn check_access(&mut self, heap: &Heap, req: AccessRequest) -> (Verdict, VirtualAddress) {
        let addr = untag(req.tagged);
        let size = req.access_size;
        if size == 0 {
            return (Verdict::new(VerdictKind::Ok, addr), addr);
        }
        self.counts.access_checks += 1;
        self.count_lookup(req.tagged);
        let verdict = |kind| Verdict::new(kind, addr).with_access_size(size);

        let res = match heap.resolve(req.tagged) {
            Ok(res) => res,
            Err(LookupError::Vacant { .. }) => return (verdict(VerdictKind::UseAfterFree), addr),
            Err(LookupError::Table(TableError::OutsideArena { .. })) => {
                return (verdict(VerdictKind::OutOfFrame), addr)
            }
            Err(_) => return (verdict(VerdictKind::Untracked), addr),
        };
        let kind = if addr < res.obj_base {
            VerdictKind::Underflow
        } else if addr.value() + size > res.obj_base.value() + u64::from(res.header.size) {
            VerdictKind::Overflow
        } else {
            VerdictKind::Ok
        };
        (verdict(kind).with_alloc(res.alloc), addr)
    }

    /// Out-of-frame check at pointer arithmetic. Pointers into the fake
    /// padding are still in frame and pass here.
    pub fn check_arith(&mut self, old: TaggedPointer, new: TaggedPointer) -> Verdict {
        self.counts.arith_checks += 1;
        let n = match old.kind() {
            TagKind::Small { .. } => SLOT_BITS,
            TagKind::Big { n } => n,
            _ => return Verdict::new(VerdictKind::Ok, untag(new)),
        };
        let kind = if in_frame(untag(old), untag(new), n) {
            VerdictKind::Ok
        } else {
            VerdictKind::OutOfFrame
        };
        Verdict::new(kind, untag(new))
    }

    /// Destination checked as a store of `n` bytes, then the source as a
    /// load; the first failure wins.
    pub fn check_memcpy(
        &mut self,
        heap: &Heap,
        dst: TaggedPointer,
        src: TaggedPointer,
        n: u64,
    ) -> Verdict {
        self.check_bounded_pair(heap, dst, src, n)
    }

    pub fn check_memmove(
        &mut self,
        heap: &Heap,
        dst: TaggedPointer,
        src: TaggedPointer,
        n: u64,
    ) -> Verdict {
        self.check_bounded_pair(heap, dst, src, n)
    }

    pub fn check_memset(&mut self, heap: &Heap, dst: TaggedPointer, n: u64) -> Verdict {
        self.check_access(heap, AccessRequest::store(dst, n))
            .0
            .on(Operand::Dst)
    }

    /// The destination must hold the source string and its terminator. The
    /// source is only untagged; its own array size does not matter.
    pub fn check_strcpy(
        &mut self,
        heap: &Heap,
        dst: TaggedPointer,
        _src: TaggedPointer,
        src_strlen: u64,
    ) -> Verdict {
        self.check_access(heap, AccessRequest::store(dst, src_strlen + 1))
            .0
            .on(Operand::Dst)
    }

    /// Both arrays must hold at least `n` bytes.
    pub fn check_strncpy(
        &mut self,
        heap: &Heap,
        dst: TaggedPointer,
        src: TaggedPointer,
        n: u64,
    ) -> Verdict {
        self.check_bounded_pair(heap, dst, src, n)
    }

    /// Shared by the two-operand calls with an explicit length: `memcpy`,
    /// `memmove`, `strncpy`, `memcmp`, `strncmp`, `strncat`.
    pub fn check_bounded_pair(
        &mut self,
        heap: &Heap,
        dst: TaggedPointer,
        src: TaggedPointer,
        n: u64,
    ) -> Verdict {
        let (d, _) = self.check_access(heap, AccessRequest::store(dst, n));
        if d.is_violation() {
            return d.on(Operand::Dst);
        }
        let (s, _) = self.check_access(heap, AccessRequest::load(src, n));
        if s.is_violation() {
            return s.on(Operand::Src);
        }
        d
    }

    /// Release through the allocator; verdict is `ok`, `double_free` or
    /// `untracked`.
    pub fn check_free(&mut self, heap: &mut Heap, p: TaggedPointer) -> Verdict {
        self.count_lookup(p);
        heap.free(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{FrameClass, HeapConfig};

    fn setup() -> (Heap, Checker) {
        (
            Heap::new(HeapConfig::with_size(1 << 24)).unwrap(),
            Checker::new(),
        )
    }

    fn at(p: TaggedPointer, off: i64) -> TaggedPointer {
        p.checked_offset(off).unwrap()
    }

    #[test]
    fn access_bounds_on_forty_bytes() {
        let (mut h, mut c) = setup();
        let (rec, p) = h.alloc(40, 0).unwrap();
        let (v, a) = c.check_access(&h, AccessRequest::store(at(p, 36), 4));
        assert_eq!(v.kind, VerdictKind::Ok);
        assert_eq!(a.value(), rec.obj_base.value() + 36);
        assert_eq!(v.alloc, Some(rec.id));
        assert_eq!(
            c.check_access(&h, AccessRequest::store(at(p, 38), 4))
                .0
                .kind,
            VerdictKind::Overflow
        );
        assert_eq!(
            c.check_access(&h, AccessRequest::load(at(p, -1), 1)).0.kind,
            VerdictKind::Underflow
        );
        assert_eq!(c.counts().access_checks, 3);
        assert_eq!(c.counts().lookups_small, 3);
    }

    #[test]
    fn unsafe_cast_store() {
        let (mut h, mut c) = setup();
        let (_, p) = h.alloc(10, 0).unwrap();
        assert_eq!(
            c.check_access(&h, AccessRequest::store(at(p, 8), 4)).0.kind,
            VerdictKind::Overflow
        );
    }

    #[test]
    fn header_bytes_underflow() {
        let (mut h, mut c) = setup();
        for size in [1, 40, 1 << 17] {
            let (_, p) = h.alloc(size, 0).unwrap();
            for off in -16..0 {
                let (v, _) = c.check_access(&h, AccessRequest::load(at(p, off), 1));
                assert_eq!(v.kind, VerdictKind::Underflow, "size {size} off {off}");
            }
        }
    }

    #[test]
    fn big_use_after_free() {
        let (mut h, mut c) = setup();
        let (rec, p) = h.alloc(1 << 17, 0).unwrap();
        assert_eq!(rec.class, FrameClass::Big);
        assert_eq!(
            c.check_access(&h, AccessRequest::load(at(p, 100), 8))
                .0
                .kind,
            VerdictKind::Ok
        );
        c.check_free(&mut h, p);
        assert_eq!(
            c.check_access(&h, AccessRequest::load(at(p, 100), 8))
                .0
                .kind,
            VerdictKind::UseAfterFree
        );
        assert_eq!(c.counts().lookups_big, 3);
    }

    #[test]
    fn untracked_passes_through() {
        let (h, mut c) = setup();
        let p = TaggedPointer::from_raw(0xdead0);
        let (v, a) = c.check_access(&h, AccessRequest::load(p, 8));
        assert_eq!(v.kind, VerdictKind::Untracked);
        assert_eq!(a.value(), 0xdead0);
    }

    #[test]
    fn arith_in_and_out_of_frame() {
        let (mut h, mut c) = setup();
        let (rec, p) = h.alloc(40, 0).unwrap();
        let slot_end = (rec.obj_base.value() | 0x7FFF) - rec.obj_base.value();
        // Past the object but inside the slot.
        assert_eq!(
            c.check_arith(p, at(p, slot_end as i64)).kind,
            VerdictKind::Ok
        );
        assert_eq!(
            c.check_arith(p, at(p, slot_end as i64 + 1)).kind,
            VerdictKind::OutOfFrame
        );
        assert_eq!(c.check_arith(p, p).kind, VerdictKind::Ok);
        let u = TaggedPointer::from_raw(0x1000);
        assert_eq!(
            c.check_arith(u, TaggedPointer::from_raw(0x9_0000)).kind,
            VerdictKind::Ok
        );
    }

    #[test]
    fn arith_big_frame() {
        let (mut h, mut c) = setup();
        let (rec, p) = h.alloc(1 << 17, 0).unwrap();
        let frame_end = rec.frame.last() - rec.obj_base.value();
        assert_eq!(
            c.check_arith(p, at(p, frame_end as i64)).kind,
            VerdictKind::Ok
        );
        assert_eq!(
            c.check_arith(p, at(p, frame_end as i64 + 1)).kind,
            VerdictKind::OutOfFrame
        );
    }

    #[test]
    fn one_past_end_loop_idiom() {
        let (mut h, mut c) = setup();
        for size in [4u64, 40, 400, 1 << 16, 1 << 17] {
            let (_, p) = h.alloc(size, 0).unwrap();
            let past = at(p, size as i64);
            assert_eq!(c.check_arith(p, past).kind, VerdictKind::Ok);
            assert_eq!(
                c.check_access(&h, AccessRequest::store(past, 1)).0.kind,
                VerdictKind::Overflow
            );
        }
    }

    #[test]
    fn memcpy_cases() {
        let (mut h, mut c) = setup();
        let (_, a) = h.alloc(64, 0).unwrap();
        let (_, b) = h.alloc(64, 0).unwrap();
        let (_, small) = h.alloc(63, 0).unwrap();
        assert_eq!(c.check_memcpy(&h, a, b, 64).kind, VerdictKind::Ok);
        let v = c.check_memcpy(&h, small, b, 64);
        assert_eq!(
            (v.kind, v.operand),
            (VerdictKind::Overflow, Some(Operand::Dst))
        );
        let (_, big) = h.alloc(1 << 17, 0).unwrap();
        c.check_free(&mut h, big);
        let v = c.check_memcpy(&h, a, big, 64);
        assert_eq!(
            (v.kind, v.operand),
            (VerdictKind::UseAfterFree, Some(Operand::Src))
        );
        assert_eq!(c.check_memmove(&h, a, at(a, 8), 56).kind, VerdictKind::Ok);
        assert_eq!(c.check_memset(&h, a, 65).kind, VerdictKind::Overflow);
    }

    #[test]
    fn strcpy_cases() {
        let (mut h, mut c) = setup();
        let (_, d16) = h.alloc(16, 0).unwrap();
        let (_, d10) = h.alloc(10, 0).unwrap();
        let (_, src) = h.alloc(4, 0).unwrap();
        assert_eq!(c.check_strcpy(&h, d16, src, 10).kind, VerdictKind::Ok);
        assert_eq!(c.check_strcpy(&h, d10, src, 10).kind, VerdictKind::Overflow);
        // Source array smaller than the claimed string: still judged by dst.
        assert_eq!(c.check_strcpy(&h, d16, src, 15).kind, VerdictKind::Ok);
    }

    #[test]
    fn strncpy_cases() {
        let (mut h, mut c) = setup();
        let (_, d) = h.alloc(32, 0).unwrap();
        let (_, s) = h.alloc(31, 0).unwrap();
        assert_eq!(c.check_strncpy(&h, d, s, 31).kind, VerdictKind::Ok);
        let v = c.check_strncpy(&h, d, s, 32);
        assert_eq!(
            (v.kind, v.operand),
            (VerdictKind::Overflow, Some(Operand::Src))
        );
        assert_eq!(c.check_strncpy(&h, d, s, 0).kind, VerdictKind::Ok);
    }

    #[test]
    fn free_verdicts() {
        let (mut h, mut c) = setup();
        let (_, big) = h.alloc(1 << 17, 0).unwrap();
        let (_, small) = h.alloc(8, 0).unwrap();
        assert_eq!(c.check_free(&mut h, big).kind, VerdictKind::Ok);
        assert_eq!(c.check_free(&mut h, big).kind, VerdictKind::DoubleFree);
        assert_eq!(c.check_free(&mut h, small).kind, VerdictKind::Ok);
        assert_eq!(c.check_free(&mut h, small).kind, VerdictKind::DoubleFree);
    }
}
