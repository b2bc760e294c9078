//! Runs every acceptance criterion and prints one line per criterion.

use std::process::ExitCode;

use heatflow::acceptance::{run_all, AcceptanceOptions};

fn main() -> ExitCode {
    let outcomes = run_all(&AcceptanceOptions::default());
    for o in &outcomes {
        println!("{}", o.line());
        for d in &o.details {
            println!("        {d}");
        }
        if let Some(n) = &o.note {
            println!("        note: {n}");
        }
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
