//! Acceptance criteria 1 to 12, one PASS/FAIL line each.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use stratperc::verify::{self, Suite};
use stratperc::Exec;

fn main() -> ExitCode {
    let start = Instant::now();
    let exec = Exec::default();
    println!(
        "acceptance criteria ({})",
        if exec.is_parallel() {
            "parallel"
        } else {
            "sequential"
        }
    );
    let mut checks = Vec::new();
    for suite in Suite::ALL {
        for check in verify::run_suite(suite, exec) {
            println!("{check}");
            let _ = std::io::stdout().flush();
            checks.push(check);
        }
    }
    checks.sort_by_key(|c| c.id);
    let passed = checks.iter().filter(|c| c.passed).count();
    println!();
    print!("{}", verify::table(&checks));
    println!(
        "{passed}/{} criteria passed in {:.1}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == checks.len() && checks.len() == 12 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
