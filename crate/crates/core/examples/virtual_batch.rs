//! Many images in one ciphertext: per-image rotation and a batched
//! convolution that costs the same as a single image.

use ndarray::{array, Array2};
use packed_he::conv::Kernel;
use packed_he::oracle::oracle_conv;
use packed_he::virtual_ct::{self, VirtualLayout};
use packed_he::{Backend, SimEngine};

fn main() -> packed_he::Result<()> {
    let kernel = Kernel::new(array![[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], 0.0)?;
    let images: Vec<Array2<f64>> =
        (0..8).map(|b| Array2::from_shape_fn((8, 8), |(r, c)| ((r * c + b) % 5) as f64)).collect();

    let layout = VirtualLayout::fill(1024, 128, 8, 8)?;
    println!("{} images of 8x8 at stride {}", layout.m, layout.f);
    let e = SimEngine::with_slots(1024)?;
    let ct = virtual_ct::encode_batch(&e, &images, layout)?;

    let rotated = virtual_ct::vrot(&e, &ct, layout, 3)?;
    let rows = virtual_ct::decode_batch(&e, &rotated, layout);
    println!("image 1 rotated by 3 starts {:?}", &rows[1][..6]);

    let span = virtual_ct::batched_kernel_spanner(&e, &kernel, layout)?;
    let before = e.meter_snapshot();
    let out = virtual_ct::batched_conv(&e, &ct, layout, &span)?;
    let batched = e.meter_snapshot().since(&before);
    let maps = virtual_ct::decode_batched_conv(&e, &out, layout, 3)?;
    for (img, map) in images.iter().zip(&maps) {
        assert_eq!(*map, oracle_conv(img, &kernel.weights, kernel.bias)?);
    }
    println!(
        "batched conv of {} images: mul {} cmul {} rot {} (one image costs the same)",
        layout.m, batched.mul_count, batched.cmul_count, batched.rot_count
    );

    // Compact the 6x6 outputs so each image is a contiguous prefix again.
    let (flat, next) = virtual_ct::reform(&e, &out, layout, 6, 6)?;
    let rows = virtual_ct::decode_batch(&e, &flat, next);
    println!("reformed image 0 first row {:?}", &rows[0][..6]);
    Ok(())
}
