//! Line-oriented allocation/access traces.
//!
//! One event per line, whitespace separated, `#` starts a comment:
//!
//! ```text
//! alloc <id> <size> [type_id]
//! alloc_array <id> <count> <elem_size>
//! realloc <id> <new_size>
//! free <id>
//! load <id> <offset> <access_size>
//! store <id> <offset> <access_size>
//! ptr_add <id> <new_offset>
//! memcpy <dst> <src> <n>
//! strcpy <dst> <src> <srclen>
//! strncpy <dst> <src> <n>
//! scope_begin
//! scope_end
//! ```
//!
//! Offsets are relative to the object base and may be negative.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Alloc {
        id: String,
        size: u64,
        type_id: u32,
    },
    AllocArray {
        id: String,
        count: u64,
        elem_size: u64,
    },
    Realloc {
        id: String,
        new_size: u64,
    },
    Free {
        id: String,
    },
    Load {
        id: String,
        offset: i64,
        access_size: u64,
    },
    Store {
        id: String,
        offset: i64,
        access_size: u64,
    },
    PtrAdd {
        id: String,
        offset: i64,
    },
    Memcpy {
        dst: String,
        src: String,
        n: u64,
    },
    Strcpy {
        dst: String,
        src: String,
        srclen: u64,
    },
    Strncpy {
        dst: String,
        src: String,
        n: u64,
    },
    ScopeBegin,
    ScopeEnd,
}

impl TraceEvent {
    pub fn op(&self) -> &'static str {
        match self {
            TraceEvent::Alloc { .. } => "alloc",
            TraceEvent::AllocArray { .. } => "alloc_array",
            TraceEvent::Realloc { .. } => "realloc",
            TraceEvent::Free { .. } => "free",
            TraceEvent::Load { .. } => "load",
            TraceEvent::Store { .. } => "store",
            TraceEvent::PtrAdd { .. } => "ptr_add",
            TraceEvent::Memcpy { .. } => "memcpy",
            TraceEvent::Strcpy { .. } => "strcpy",
            TraceEvent::Strncpy { .. } => "strncpy",
            TraceEvent::ScopeBegin => "scope_begin",
            TraceEvent::ScopeEnd => "scope_end",
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.op();
        match self {
            TraceEvent::Alloc {
                id,
                size,
                type_id: 0,
            } => write!(f, "{op} {id} {size}"),
            TraceEvent::Alloc { id, size, type_id } => write!(f, "{op} {id} {size} {type_id}"),
            TraceEvent::AllocArray {
                id,
                count,
                elem_size,
            } => write!(f, "{op} {id} {count} {elem_size}"),
            TraceEvent::Realloc { id, new_size } => write!(f, "{op} {id} {new_size}"),
            TraceEvent::Free { id } => write!(f, "{op} {id}"),
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
                write!(f, "{op} {id} {offset} {access_size}")
            }
            TraceEvent::PtrAdd { id, offset } => write!(f, "{op} {id} {offset}"),
            TraceEvent::Memcpy { dst, src, n } | TraceEvent::Strncpy { dst, src, n } => {
                write!(f, "{op} {dst} {src} {n}")
            }
            TraceEvent::Strcpy { dst, src, srclen } => write!(f, "{op} {dst} {src} {srclen}"),
            TraceEvent::ScopeBegin | TraceEvent::ScopeEnd => f.write_str(op),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct TraceError {
    pub line: usize,
    pub reason: String,
}

fn parse_int<T>(tok: &str) -> Result<T, String>
where
    T: TryFrom<i128>,
{
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok.strip_prefix('+').unwrap_or(tok)),
    };
    let magnitude = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i128::from_str_radix(hex, 16),
        None => body.parse::<i128>(),
    }
    .map_err(|_| format!("invalid number `{tok}`"))?;
    let value = if neg { -magnitude } else { magnitude };
    T::try_from(value).map_err(|_| format!("number `{tok}` out of range"))
}

fn positive(tok: &str, what: &str) -> Result<u64, String> {
    match parse_int::<u64>(tok)? {
        0 => Err(format!("{what} must be at least 1")),
        v => Ok(v),
    }
}

struct Line<'a> {
    toks: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn arity(&self, min: usize, max: usize) -> Result<(), String> {
        let args = self.toks.len() - 1;
        if args < min || args > max {
            let want = if min == max {
                format!("{min}")
            } else {
                format!("{min} to {max}")
            };
            return Err(format!(
                "`{}` takes {want} arguments, got {args}",
                self.toks[0]
            ));
        }
        Ok(())
    }

    fn id(&self, i: usize) -> String {
        self.toks[i].to_string()
    }
}

fn parse_line(line: Line<'_>) -> Result<TraceEvent, String> {
    let t = &line.toks;
    let ev = match t[0] {
        "alloc" => {
            line.arity(2, 3)?;
            let type_id = match t.get(3) {
                Some(tok) => parse_int::<u32>(tok)?,
                None => 0,
            };
            TraceEvent::Alloc {
                id: line.id(1),
                size: positive(t[2], "size")?,
                type_id,
            }
        }
        "alloc_array" => {
            line.arity(3, 3)?;
            TraceEvent::AllocArray {
                id: line.id(1),
                count: positive(t[2], "count")?,
                elem_size: positive(t[3], "elem_size")?,
            }
        }
        "realloc" => {
            line.arity(2, 2)?;
            TraceEvent::Realloc {
                id: line.id(1),
                new_size: positive(t[2], "new_size")?,
            }
        }
        "free" => {
            line.arity(1, 1)?;
            TraceEvent::Free { id: line.id(1) }
        }
        "load" | "store" => {
            line.arity(3, 3)?;
            let id = line.id(1);
            let offset = parse_int::<i64>(t[2])?;
            let access_size = positive(t[3], "access_size")?;
            if t[0] == "load" {
                TraceEvent::Load {
                    id,
                    offset,
                    access_size,
                }
            } else {
                TraceEvent::Store {
                    id,
                    offset,
                    access_size,
                }
            }
        }
        "ptr_add" => {
            line.arity(2, 2)?;
            TraceEvent::PtrAdd {
                id: line.id(1),
                offset: parse_int::<i64>(t[2])?,
            }
        }
        "memcpy" | "strncpy" => {
            line.arity(3, 3)?;
            let (dst, src, n) = (line.id(1), line.id(2), parse_int::<u64>(t[3])?);
            if t[0] == "memcpy" {
                TraceEvent::Memcpy { dst, src, n }
            } else {
                TraceEvent::Strncpy { dst, src, n }
            }
        }
        "strcpy" => {
            line.arity(3, 3)?;
            TraceEvent::Strcpy {
                dst: line.id(1),
                src: line.id(2),
                srclen: parse_int::<u64>(t[3])?,
            }
        }
        "scope_begin" => {
            line.arity(0, 0)?;
            TraceEvent::ScopeBegin
        }
        "scope_end" => {
            line.arity(0, 0)?;
            TraceEvent::ScopeEnd
        }
        other => return Err(format!("unknown operation `{other}`")),
    };
    Ok(ev)
}

/// Parses a whole trace, checking that every id is defined before use.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = Vec::new();
    let mut defined: HashSet<String> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |reason: String| TraceError {
            line: line_no,
            reason,
        };
        let ev = parse_line(Line { toks }).map_err(err)?;
        let uses: Vec<&String> = match &ev {
            TraceEvent::Realloc { id, .. }
            | TraceEvent::Free { id }
            | TraceEvent::Load { id, .. }
            | TraceEvent::Store { id, .. }
            | TraceEvent::PtrAdd { id, .. } => vec![id],
            TraceEvent::Memcpy { dst, src, .. }
            | TraceEvent::Strcpy { dst, src, .. }
            | TraceEvent::Strncpy { dst, src, .. } => vec![dst, src],
            _ => vec![],
        };
        if let Some(missing) = uses.into_iter().find(|id| !defined.contains(*id)) {
            return Err(err(format!("undefined id `{missing}`")));
        }
        if let TraceEvent::Alloc { id, .. } | TraceEvent::AllocArray { id, .. } = &ev {
            defined.insert(id.clone());
        }
        events.push(ev);
    }
    Ok(events)
}

/// Renders events back into trace text, one per line.
pub fn write_trace(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&ev.to_string());
        out.push('\n');
    }
    out
}
