//! Column-per-ciphertext encodings: a rotation-free product and a
//! convolution whose slot needs do not grow with image width.

use ndarray::{array, Array2};
use packed_he::conv::Kernel;
use packed_he::encode;
use packed_he::multi_ct;
use packed_he::oracle::{oracle_conv, oracle_matmul};
use packed_he::{Backend, SimEngine};

fn main() -> packed_he::Result<()> {
    let e = SimEngine::with_slots(64)?;
    let a = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64 % 5.0 - 2.0);
    let b = Array2::from_shape_fn((6, 3), |(i, j)| (i + 2 * j) as f64 % 3.0);
    let left = multi_ct::encode_left(&e, &a, 3)?;
    let right = multi_ct::encode_right(&e, &b, 4)?;
    let c = multi_ct::matmul_outer(&e, &left, &right)?;
    assert_eq!(encode::decode(&e, &c), oracle_matmul(&a, &b)?);
    let m = e.meter_snapshot();
    println!("{} ciphertexts per operand, mul {} rot {}", left.cts.len(), m.mul_count, m.rot_count);

    // 16 slots hold four 4-pixel columns from four images.
    let e = SimEngine::with_slots(16)?;
    let kernel = Kernel::new(array![[1.0, 1.0], [1.0, 1.0]], -1.0)?;
    let images: Vec<Array2<f64>> = (0..4).map(|b| Array2::from_shape_fn((4, 10), |(r, c)| (r + c + b) as f64)).collect();
    let cols = multi_ct::encode_image_columns(&e, &images)?;
    let out = multi_ct::conv_columns(&e, &cols, &kernel)?;
    for (img, got) in images.iter().zip(multi_ct::decode_image_columns(&e, &out)) {
        assert_eq!(got, oracle_conv(img, &kernel.weights, kernel.bias)?);
    }
    println!("4x10 images, {} column ciphertexts in, {} out", cols.cts.len(), out.cts.len());
    Ok(())
}
