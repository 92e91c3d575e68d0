//! Acceptance harness: one PASS/FAIL line per criterion, with the checks
//! behind it and its wall-clock budget. Exits non-zero if any criterion
//! fails.

use std::process::ExitCode;

use sngd::checks::{
    all_passed, benchmark_suite, expansion_suite, family_suite, fim_block_suite, format_table, group_suite,
    invariance_suite, oracle_suite, reduction_suite, singularity_suite, structured_equivalence_suite, timed, CheckRow,
    FIM_SAMPLES,
};
use sngd::Result;

struct Criterion {
    id: u32,
    title: &'static str,
    /// Wall-clock limit in seconds.
    limit: f64,
    run: fn() -> Result<Vec<CheckRow>>,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, title: "objective oracles", limit: 30.0, run: || Ok(oracle_suite()) },
    Criterion { id: 2, title: "group properties (1000 trials per kind)", limit: 60.0, run: || group_suite(1000) },
    Criterion { id: 3, title: "local FIM block values", limit: 300.0, run: || fim_block_suite(FIM_SAMPLES) },
    Criterion { id: 4, title: "linear invariance", limit: 60.0, run: invariance_suite },
    Criterion { id: 5, title: "third-order expansion error", limit: 60.0, run: expansion_suite },
    Criterion { id: 6, title: "hs-low vs grid-tuned Adam (p=200)", limit: 600.0, run: benchmark_suite },
    Criterion { id: 7, title: "structured = dense update with k HVPs", limit: 60.0, run: structured_equivalence_suite },
    Criterion { id: 8, title: "reductions to full / diagonal / single Gaussian", limit: 60.0, run: reduction_suite },
    Criterion { id: 9, title: "family suites", limit: 300.0, run: family_suite },
    Criterion { id: 10, title: "FIM singularity demonstrations", limit: 60.0, run: singularity_suite },
];

fn main() -> ExitCode {
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| only.is_none_or(|id| id == c.id)) {
        let (result, secs) = timed(c.run);
        let (ok, report) = match result {
            Ok(rows) => (all_passed(&rows) && secs <= c.limit, format_table(&rows)),
            Err(e) => (false, format!("error: {e}\n")),
        };
        let status = if ok { "PASS" } else { "FAIL" };
        let over = if secs > c.limit { " (over time limit)" } else { "" };
        println!("criterion {:>2}: {status} {} [{secs:.1} s / {:.0} s{over}]", c.id, c.title, c.limit);
        for line in report.lines() {
            println!("    {line}");
        }
        if !ok {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
