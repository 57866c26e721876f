use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use super::run::{Overhead, RunReport, VerdictCounts};
use crate::checker::{CheckCounts, Verdict, VerdictKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format `{s}`")),
        }
    }
}

#[derive(Serialize)]
struct Violation<'a> {
    event: usize,
    op: &'static str,
    #[serde(flatten)]
    verdict: &'a Verdict,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    verdicts: &'a VerdictCounts,
    overhead: &'a Overhead,
    checks: &'a CheckCounts,
    arena_size: u64,
    violations: Vec<Violation<'a>>,
}

/// Renders a report. JSON keys come out in a fixed order.
pub fn emit_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let violations = report
                .events
                .iter()
                .filter_map(|e| {
                    let v = e.verdict.as_ref()?;
                    v.is_violation().then_some(Violation {
                        event: e.event,
                        op: e.op,
                        verdict: v,
                    })
                })
                .collect();
            let doc = JsonReport {
                verdicts: &report.verdicts,
                overhead: &report.overhead,
                checks: &report.checks,
                arena_size: report.arena_size,
                violations,
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => text(report),
    }
}

fn text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "events:     {}", r.events.len());
    let _ = writeln!(s, "violations: {}", r.verdicts.violations());
    for kind in VerdictKind::ALL {
        let _ = writeln!(s, "  {:<16}{}", kind.as_str(), r.verdicts.get(kind));
    }
    let o = &r.overhead;
    let _ = writeln!(s, "overhead at peak payload:");
    let _ = writeln!(s, "  payload_bytes   {}", o.payload_bytes);
    let _ = writeln!(s, "  header_bytes    {}", o.header_bytes);
    let _ = writeln!(s, "  table_bytes     {}", o.table_bytes);
    let _ = writeln!(s, "  ratio           {:.4}", o.ratio);
    let c = &r.checks;
    let _ = writeln!(s, "checks:");
    let _ = writeln!(s, "  access          {}", c.access_checks);
    let _ = writeln!(s, "  arith           {}", c.arith_checks);
    let _ = writeln!(s, "  lookups_small   {}", c.lookups_small);
    let _ = writeln!(s, "  lookups_big     {}", c.lookups_big);
    for (event, v) in r.violations() {
        let op = r.events[event].op;
        let _ = write!(s, "event {event} {op}: {} at {}", v.kind, v.address);
        if let Some(id) = v.alloc {
            let _ = write!(s, " (alloc #{})", id.0);
        }
        if let Some(operand) = v.operand {
            let _ = write!(s, " [{operand:?}]");
        }
        s.push('\n');
    }
    s
}
