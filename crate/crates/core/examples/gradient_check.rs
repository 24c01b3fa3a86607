//! Runs the finite-difference gradient check over tape primitives, recurrent
//! cells and the full unrolled ReasoNet objective, printing the worst relative
//! error of every check.
//!
//! ```text
//! cargo run --release --example gradient_check -- [seed]
//! ```

use reasonet::gradcheck::{run, Group, DEFAULT_TOLERANCE};

fn main() -> reasonet::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let report = run(seed, DEFAULT_TOLERANCE)?;
    for group in Group::ALL {
        println!("{} (worst {:.2e})", group.as_str(), report.worst(group));
        for c in report.checks.iter().filter(|c| c.group == group) {
            println!("  {:<30} {:.2e}  over {} entries", c.name, c.worst_rel_error, c.entries);
        }
    }
    println!("\ntolerance {:e}: {}", report.tolerance, if report.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
