//! Seeded synthetic workloads with a ground-truth fault manifest.
//!
//! Objects are allocated, accessed and freed in an interleaved order. Each
//! access is turned into a fault with probability `fault_rate`; every fault
//! is listed in the manifest with the verdict it must produce. Temporal
//! faults on frees: a double free for any object, or a use-after-free load
//! for objects large enough to be big-framed wherever they are placed.
//!
//! Ground truth assumes one byte of fake padding and a non-reusing
//! allocator, which is what the harness runs by default.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::run::RunReport;
use super::trace::TraceEvent;
use crate::checker::VerdictKind;
use crate::frame_math::SLOT_BITS;
use crate::metadata::HEADER_SIZE;

/// Objects of at least this many bytes are big-framed at any placement:
/// header plus object exceeds one slot.
pub const ALWAYS_BIG_SIZE: u64 = (1 << SLOT_BITS) - HEADER_SIZE + 1;

const MAX_OBJECT_SIZE: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeDistribution {
    Fixed(u64),
    Uniform {
        min: u64,
        max: u64,
    },
    /// log2 of the size is uniform over `[log2 min, log2 max]`.
    LogUniform {
        min: u64,
        max: u64,
    },
}

impl SizeDistribution {
    fn bounds(&self) -> (u64, u64) {
        match *self {
            SizeDistribution::Fixed(n) => (n, n),
            SizeDistribution::Uniform { min, max } | SizeDistribution::LogUniform { min, max } => {
                (min, max)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            SizeDistribution::Fixed(n) => n,
            SizeDistribution::Uniform { min, max } => rng.random_range(min..=max),
            SizeDistribution::LogUniform { min, max } => {
                let (lo, hi) = ((min as f64).ln(), (max as f64).ln());
                let v = rng.random_range(lo..=hi).exp().round() as u64;
                v.clamp(min, max)
            }
        }
    }
}

impl FromStr for SizeDistribution {
    type Err = String;

    /// `fixed:N`, `uniform:MIN:MAX` or `log:MIN:MAX`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<u64>().map_err(|_| format!("invalid size `{t}`"));
        match parts.as_slice() {
            ["fixed", n] => Ok(SizeDistribution::Fixed(num(n)?)),
            ["uniform", a, b] => Ok(SizeDistribution::Uniform {
                min: num(a)?,
                max: num(b)?,
            }),
            ["log", a, b] => Ok(SizeDistribution::LogUniform {
                min: num(a)?,
                max: num(b)?,
            }),
            _ => Err(format!(
                "invalid size distribution `{s}` (fixed:N, uniform:MIN:MAX, log:MIN:MAX)"
            )),
        }
    }
}

impl fmt::Display for SizeDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeDistribution::Fixed(n) => write!(f, "fixed:{n}"),
            SizeDistribution::Uniform { min, max } => write!(f, "uniform:{min}:{max}"),
            SizeDistribution::LogUniform { min, max } => write!(f, "log:{min}:{max}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub objects: usize,
    pub sizes: SizeDistribution,
    pub accesses_per_object: usize,
    /// Probability that an access (or a free) carries an injected fault.
    pub fault_rate: f64,
    /// Adds a one-past-end and a one-before-base byte store to every object.
    pub boundary_probes: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            objects: 100,
            sizes: SizeDistribution::LogUniform { min: 1, max: 4096 },
            accesses_per_object: 8,
            fault_rate: 0.0,
            boundary_probes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("objects must be at least 1")]
    NoObjects,
    #[error("fault rate {0} outside [0, 1]")]
    FaultRate(String),
    #[error("object sizes must lie in [1, 2^20], got {0}..={1}")]
    Sizes(u64, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedFault {
    pub event: usize,
    pub kind: VerdictKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub faults: Vec<ExpectedFault>,
}

impl Manifest {
    /// Expected count per verdict kind.
    pub fn totals(&self) -> BTreeMap<VerdictKind, u64> {
        let mut out = BTreeMap::new();
        for f in &self.faults {
            *out.entry(f.kind).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub events: Vec<TraceEvent>,
    pub manifest: Manifest,
}

/// Differences between a run and its manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ManifestComparison {
    /// Expected faults the run did not report with the expected kind.
    pub missed: Vec<ExpectedFault>,
    /// Violations the manifest does not list.
    pub spurious: Vec<ExpectedFault>,
    pub matched: usize,
}

impl ManifestComparison {
    pub fn agrees(&self) -> bool {
        self.missed.is_empty() && self.spurious.is_empty()
    }
}

/// Compares reported violations with the manifest, event by event.
pub fn compare_with_manifest(report: &RunReport, manifest: &Manifest) -> ManifestComparison {
    let expected: BTreeMap<usize, VerdictKind> =
        manifest.faults.iter().map(|f| (f.event, f.kind)).collect();
    let found: BTreeMap<usize, VerdictKind> =
        report.violations().map(|(i, v)| (i, v.kind)).collect();
    let mut cmp = ManifestComparison::default();
    for (&event, &kind) in &expected {
        if found.get(&event) == Some(&kind) {
            cmp.matched += 1;
        } else {
            cmp.missed.push(ExpectedFault { event, kind });
        }
    }
    for (&event, &kind) in &found {
        if expected.get(&event) != Some(&kind) {
            cmp.spurious.push(ExpectedFault { event, kind });
        }
    }
    cmp
}

struct LiveObject {
    name: String,
    size: u64,
    accesses_left: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    events: Vec<TraceEvent>,
    faults: Vec<ExpectedFault>,
}

impl Builder {
    fn push(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    fn push_fault(&mut self, ev: TraceEvent, kind: VerdictKind) {
        self.faults.push(ExpectedFault {
            event: self.events.len(),
            kind,
        });
        self.events.push(ev);
    }

    fn access_size(&mut self, obj_size: u64) -> u64 {
        let choices = [1u64, 2, 4, 8];
        let fits = choices.iter().filter(|&&a| a <= obj_size).count();
        choices[self.rng.random_range(0..fits)]
    }

    fn clean_access(&mut self, obj: &LiveObject, others: &[LiveObject]) {
        let roll = self.rng.random_range(0..100);
        let id = obj.name.clone();
        if roll < 10 {
            let offset = self.rng.random_range(0..=obj.size) as i64;
            self.push(TraceEvent::PtrAdd { id, offset });
        } else if roll < 18 && !others.is_empty() {
            let other = &others[self.rng.random_range(0..others.len())];
            let limit = obj.size.min(other.size);
            match self.rng.random_range(0..3) {
                0 => {
                    let n = self.rng.random_range(1..=limit);
                    self.push(TraceEvent::Memcpy {
                        dst: id,
                        src: other.name.clone(),
                        n,
                    })
                }
                1 => {
                    let n = self.rng.random_range(0..=limit);
                    self.push(TraceEvent::Strncpy {
                        dst: id,
                        src: other.name.clone(),
                        n,
                    })
                }
                _ => {
                    let srclen = self.rng.random_range(0..obj.size);
                    self.push(TraceEvent::Strcpy {
                        dst: id,
                        src: other.name.clone(),
                        srclen,
                    })
                }
            }
        } else {
            let access_size = self.access_size(obj.size);
            let offset = self.rng.random_range(0..=obj.size - access_size) as i64;
            if self.rng.random_bool(0.5) {
                self.push(TraceEvent::Load {
                    id,
                    offset,
                    access_size,
                });
            } else {
                self.push(TraceEvent::Store {
                    id,
                    offset,
                    access_size,
                });
            }
        }
    }

    fn faulty_access(&mut self, obj: &LiveObject, others: &[LiveObject]) {
        let id = obj.name.clone();
        match self.rng.random_range(0..5) {
            0 | 1 => {
                // Starts at or before the one-past-end byte, so the pointer
                // stays in frame and still resolves.
                let access_size = self.access_size(obj.size);
                let offset =
                    (obj.size - access_size + 1 + self.rng.random_range(0..access_size)) as i64;
                self.push_fault(
                    TraceEvent::Store {
                        id,
                        offset,
                        access_size,
                    },
                    VerdictKind::Overflow,
                );
            }
            2 | 3 => {
                let access_size = self.access_size(obj.size);
                let offset = -self.rng.random_range(1..=HEADER_SIZE as i64);
                self.push_fault(
                    TraceEvent::Load {
                        id,
                        offset,
                        access_size,
                    },
                    VerdictKind::Underflow,
                );
            }
            _ => {
                let src = match others.first() {
                    Some(o) => o.name.clone(),
                    None => id.clone(),
                };
                let n = obj.size + 1;
                self.push_fault(
                    TraceEvent::Memcpy { dst: id, src, n },
                    VerdictKind::Overflow,
                );
            }
        }
    }
}

/// Generates a deterministic workload for `seed`.
pub fn gen_workload(seed: u64, params: &GenParams) -> Result<Workload, GenError> {
    if params.objects == 0 {
        return Err(GenError::NoObjects);
    }
    if !(0.0..=1.0).contains(&params.fault_rate) {
        return Err(GenError::FaultRate(params.fault_rate.to_string()));
    }
    let (lo, hi) = params.sizes.bounds();
    if lo < 1 || hi > MAX_OBJECT_SIZE || lo > hi {
        return Err(GenError::Sizes(lo, hi));
    }

    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        events: Vec::new(),
        faults: Vec::new(),
    };
    let mut live: Vec<LiveObject> = Vec::new();
    let mut created = 0usize;

    while created < params.objects || !live.is_empty() {
        let allocate = created < params.objects && (live.is_empty() || b.rng.random_bool(0.4));
        if allocate {
            let size = params.sizes.sample(&mut b.rng);
            let name = format!("o{created}");
            created += 1;
            b.push(TraceEvent::Alloc {
                id: name.clone(),
                size,
                type_id: 0,
            });
            if params.boundary_probes {
                b.push_fault(
                    TraceEvent::Store {
                        id: name.clone(),
                        offset: size as i64,
                        access_size: 1,
                    },
                    VerdictKind::Overflow,
                );
                b.push_fault(
                    TraceEvent::Store {
                        id: name.clone(),
                        offset: -1,
                        access_size: 1,
                    },
                    VerdictKind::Underflow,
                );
            }
            live.push(LiveObject {
                name,
                size,
                accesses_left: params.accesses_per_object,
            });
            continue;
        }

        let i = b.rng.random_range(0..live.len());
        if live[i].accesses_left > 0 {
            live[i].accesses_left -= 1;
            let obj = live.swap_remove(i);
            if b.rng.random_bool(params.fault_rate) {
                b.faulty_access(&obj, &live);
            } else {
                b.clean_access(&obj, &live);
            }
            live.push(obj);
            continue;
        }

        let obj = live.swap_remove(i);
        if b.rng.random_bool(0.1) {
            // Resize once before release; the id follows the new block.
            let new_size = params.sizes.sample(&mut b.rng);
            b.push(TraceEvent::Realloc {
                id: obj.name.clone(),
                new_size,
            });
            let access_size = b.access_size(new_size);
            b.push(TraceEvent::Load {
                id: obj.name.clone(),
                offset: (new_size - access_size) as i64,
                access_size,
            });
            let obj = LiveObject {
                size: new_size,
                ..obj
            };
            release(&mut b, &obj, params.fault_rate);
        } else {
            release(&mut b, &obj, params.fault_rate);
        }
    }

    Ok(Workload {
        events: b.events,
        manifest: Manifest {
            seed,
            faults: b.faults,
        },
    })
}

fn release(b: &mut Builder, obj: &LiveObject, fault_rate: f64) {
    b.push(TraceEvent::Free {
        id: obj.name.clone(),
    });
    if !b.rng.random_bool(fault_rate) {
        return;
    }
    let id = obj.name.clone();
    if obj.size >= ALWAYS_BIG_SIZE && b.rng.random_bool(0.5) {
        let offset = b.rng.random_range(0..obj.size) as i64;
        b.push_fault(
            TraceEvent::Load {
                id,
                offset,
                access_size: 1,
            },
            VerdictKind::UseAfterFree,
        );
    } else {
        b.push_fault(TraceEvent::Free { id }, VerdictKind::DoubleFree);
    }
}
