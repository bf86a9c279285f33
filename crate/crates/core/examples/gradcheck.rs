//! Finite-difference check of every autodiff primitive, printed as a table.

use smr_lab::gradkit::check::{primitive_suite, FD_TOLERANCE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = primitive_suite(3, 0, None)?;
    println!("{:<16} {:>12}  pass (tol {FD_TOLERANCE:e})", "primitive", "rel err");
    for r in &rows {
        println!("{:<16} {:>12.3e}  {}", r.primitive, r.max_rel_err, r.passed);
    }
    // a broken backward rule is caught and named
    let broken = primitive_suite(1, 0, Some("sigmoid"))?;
    let failed: Vec<_> = broken.iter().filter(|r| !r.passed).map(|r| r.primitive.as_str()).collect();
    println!("with a corrupted sigmoid backward: failing = {failed:?}");
    Ok(())
}
