use std::path::Path;

use retention_core::verify::{run_suites, Suite, VerifyReport};

use crate::error::{CliError, Result};

pub const SCHEMA: &str = include_str!("../schema/verify-report.schema.json");

pub fn run(suites: &[Suite], out: Option<&Path>) -> Result<VerifyReport> {
    let report = run_suites(suites)?;
    for suite in &report.suites {
        for check in &suite.checks {
            println!(
                "[{}] {}/{}: {} (threshold {}) {}",
                if check.passed { "PASS" } else { "FAIL" },
                suite.suite.name(),
                check.name,
                check.value,
                check.threshold,
                check.detail
            );
        }
        println!("{} finished in {:.1} s", suite.suite.name(), suite.seconds);
    }
    if let Some(path) = out {
        crate::write_json(path, &report)?;
    }
    let failed = report
        .suites
        .iter()
        .flat_map(|s| &s.checks)
        .filter(|c| !c.passed)
        .count();
    if failed > 0 {
        return Err(CliError::Verification { failed });
    }
    Ok(report)
}
