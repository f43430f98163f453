//! Runs the finite-difference gradient suite, then the two deliberately
//! broken cases to show that they are caught.

use idunet::checks::{run_suite, select};

fn main() -> idunet::Result<()> {
    let ok = run_suite(&select("all")?, 10, |r| println!("{}", r.line()))?;
    let bad = run_suite(&select("mutant")?, 3, |r| println!("{}", r.line()))?;
    let unexpected = ok.iter().chain(&bad).filter(|r| !r.expected()).count();
    println!("{} cases, {unexpected} unexpected", ok.len() + bad.len());
    Ok(())
}
