use std::fmt;

use serde::Serialize;

use crate::arena::AllocId;
use crate::frame_math::VirtualAddress;

/// Outcome class of a runtime check.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Ok,
    Overflow,
    Underflow,
    OutOfFrame,
    UseAfterFree,
    DoubleFree,
    Untracked,
}

impl VerdictKind {
    pub const ALL: [VerdictKind; 7] = [
        VerdictKind::Ok,
        VerdictKind::Overflow,
        VerdictKind::Underflow,
        VerdictKind::OutOfFrame,
        VerdictKind::UseAfterFree,
        VerdictKind::DoubleFree,
        VerdictKind::Untracked,
    ];

    /// Everything except `Ok` and `Untracked`.
    pub fn is_violation(self) -> bool {
        !matches!(self, VerdictKind::Ok | VerdictKind::Untracked)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Ok => "ok",
            VerdictKind::Overflow => "overflow",
            VerdictKind::Underflow => "underflow",
            VerdictKind::OutOfFrame => "out_of_frame",
            VerdictKind::UseAfterFree => "use_after_free",
            VerdictKind::DoubleFree => "double_free",
            VerdictKind::Untracked => "untracked",
        }
    }
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which pointer argument of a two-operand library call failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Dst,
    Src,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    /// Untagged address the check was about.
    pub address: VirtualAddress,
    /// Allocation the pointer resolved to, when known.
    pub alloc: Option<AllocId>,
    pub access_size: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operand: Option<Operand>,
}

impl Verdict {
    pub fn new(kind: VerdictKind, address: VirtualAddress) -> Self {
        Verdict {
            kind,
            address,
            alloc: None,
            access_size: 0,
            operand: None,
        }
    }

    pub fn with_alloc(mut self, alloc: Option<AllocId>) -> Self {
        self.alloc = alloc;
        self
    }

    pub fn with_access_size(mut self, access_size: u64) -> Self {
        self.access_size = access_size;
        self
    }

    pub fn on(mut self, operand: Operand) -> Self {
        self.operand = Some(operand);
        self
    }

    pub fn is_ok(&self) -> bool {
        self.kind == VerdictKind::Ok
    }

    pub fn is_violation(&self) -> bool {
        self.kind.is_violation()
    }
}
