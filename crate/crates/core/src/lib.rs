//! Frame-based per-object metadata for 64-bit tagged pointers.
//!
//! Objects carry a 16-byte header right below their base. The top 16 bits of
//! every pointer say how to find that header again: small-framed objects
//! (wrapper frame at most one 2^15 slot) store the header's offset inside the
//! slot, big-framed objects store log2 of their wrapper frame and keep the
//! header address in a division table. On top of that sit spatial bounds
//! checks and a few temporal checks, plus a trace-replay harness.

pub mod arena;
pub mod checker;
pub mod frame_math;
pub mod harness;
pub mod metadata;
pub mod tagging;

pub use arena::{
    AllocId, AllocationRecord, FrameClass, Heap, HeapConfig, HeapError, HeapStats, Placement,
};
pub use checker::{AccessRequest, CheckCounts, Checker, Operand, Verdict, VerdictKind};
pub use frame_math::{
    in_frame, slot_base, wrapper_frame, wrapper_frame_oracle, VirtualAddress, WrapperFrame,
};
pub use metadata::{header_lookup, DivisionTable, Header, HEADER_SIZE};
pub use tagging::{decode, encode_big, encode_small, untag, TagKind, TaggedPointer};
