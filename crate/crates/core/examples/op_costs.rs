//! Measured operation counts next to the documented per-step costs.

fn main() -> packed_he::Result<()> {
    let report = packed_he::bench::run_default()?;
    print!("{}", report.render());
    let flagged = report.flagged().count();
    println!("{} rows, {flagged} above their documented cost", report.rows.len());

    for row in packed_he::bench::matmul_costs(32, 1024, 32)? {
        println!("32x1024x32 step {:<5} {:?}", row.step, row.measured);
    }
    Ok(())
}
