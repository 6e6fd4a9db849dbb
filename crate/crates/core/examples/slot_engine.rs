//! The primitive API: encrypt, rotate, multiply, and watch the meter.

use packed_he::{Backend, MaskRole, PlainMask, SimEngine};

fn main() -> packed_he::Result<()> {
    let e = SimEngine::with_slots(8)?;
    let x = e.enc(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])?;

    println!("rot left 3:  {:?}", e.dec(&e.rot(&x, 3)));
    println!("rot right 1: {:?}", e.dec(&e.rot(&x, -1)));

    let sq = e.mul(&x, &x)?;
    let even = PlainMask::from_fn(e.slots(), MaskRole::Filter, |i| i % 2 == 0);
    let masked = e.cmul(&even, &sq)?;
    let total = e.add(&masked, &x)?;
    println!("x^2 on even slots + x: {:?}", e.dec(&total));
    println!("depth {} (mul +1, cmul +1, add keeps the max)", e.depth(&total));

    let m = e.meter_snapshot();
    println!(
        "meter: add {} mul {} cmul {} rot {} enc {} max depth {}",
        m.add_count, m.mul_count, m.cmul_count, m.rot_count, m.enc_count, m.max_depth
    );
    Ok(())
}
