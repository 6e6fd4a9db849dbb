//! Valid convolution on one packed image through the kernel spanner.

use ndarray::{array, Array2};
use packed_he::conv::{self, ImageShape, Kernel};
use packed_he::oracle::oracle_conv;
use packed_he::{Backend, SimEngine};

fn main() -> packed_he::Result<()> {
    let shape = ImageShape::new(6, 6);
    let image = Array2::from_shape_fn((6, 6), |(r, c)| ((r * 6 + c) % 7) as f64);
    let kernel = Kernel::new(array![[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]], 0.5)?;

    let e = SimEngine::with_slots(64)?;
    let span = conv::kernel_spanner(&e, &kernel, shape)?;
    println!("kernel spread over {} offset patterns", span.spans.len());

    let ct = conv::encode_image(&e, &image)?;
    let before = e.meter_snapshot();
    let out = conv::conv(&e, &ct, &span)?;
    let cost = e.meter_snapshot().since(&before);
    let got = conv::decode_conv(&e, &out, shape, kernel.size())?;
    println!("{got}");
    assert_eq!(got, oracle_conv(&image, &kernel.weights, kernel.bias)?);
    println!(
        "mul {} cmul {} rot {} add {}, depth {}",
        cost.mul_count,
        cost.cmul_count,
        cost.rot_count,
        cost.add_count,
        e.depth(&out)
    );

    // The window sum alone: every k x k window total lands on its anchor.
    let sums = conv::sum_for_conv(&e, &ct, shape, 3, 0.0)?;
    let slots = e.dec(&sums);
    println!("window at (0,0) sums to {}", slots[0]);
    Ok(())
}
