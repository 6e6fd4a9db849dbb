//! One-ciphertext matrix product with the revolver encoding, checked
//! against the triple loop.

use ndarray::{array, s, Array2};
use packed_he::encode;
use packed_he::matmul::{self, Tiling};
use packed_he::oracle::oracle_matmul;
use packed_he::{Backend, SimEngine};

fn main() -> packed_he::Result<()> {
    let a = array![[1.0, 2.0, 0.0, -1.0], [3.0, 1.0, 2.0, 0.0], [0.0, -2.0, 1.0, 1.0]];
    let b = array![[1.0, 0.0], [2.0, 1.0], [0.0, 3.0], [1.0, 1.0]];

    // 3x4 by 4x2 does not fill 16 slots, so the shifter takes the masked
    // two-rotation route.
    let e = SimEngine::with_slots(16)?;
    let (ca, cb, plan) = matmul::prepare_operands(&e, &a, &b)?;
    let c = matmul::matmul(&e, &ca, &cb)?;
    let got = matmul::decode_block(&e, &c, 3, 2);
    println!("{got}");
    assert_eq!(got, oracle_matmul(&a, &b)?);
    let m = e.meter_snapshot();
    println!("fast path: {}, rot {} cmul {} mul {} depth {}", plan.fast_path, m.rot_count, m.cmul_count, m.mul_count, c.ct.depth());

    // With 8 slots the revolver block fills the ciphertext and each shift is
    // a single rotation.
    let e = SimEngine::with_slots(8)?;
    let a2 = array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]];
    let b2 = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]];
    let (ca, cb, plan) = matmul::prepare_operands(&e, &a2, &b2)?;
    let c = matmul::matmul(&e, &ca, &cb)?;
    assert_eq!(matmul::decode_block(&e, &c, 2, 2), oracle_matmul(&a2, &b2)?);
    println!("fast path: {}, rot {}", plan.fast_path, e.meter_snapshot().rot_count);

    // Larger products split into ciphertext-sized tiles: 4x8 by 8x4 as two
    // inner blocks and two column blocks of 4x4 by 4x2.
    let e = SimEngine::with_slots(16)?;
    let big_a = Array2::from_shape_fn((4, 8), |(i, j)| (i + j) as f64);
    let big_b = Array2::from_shape_fn((8, 4), |(i, j)| i as f64 - j as f64);
    let tiling = Tiling::new(1, 2, 2);
    let a_tiles = (0..2)
        .map(|t| encode::encode_tau_a(&e, &big_a.slice(s![.., t * 4..t * 4 + 4]).to_owned()))
        .collect::<packed_he::Result<Vec<_>>>()?;
    let mut b_tiles = Vec::new();
    for t in 0..2 {
        for c in 0..2 {
            let tile = big_b.slice(s![t * 4..t * 4 + 4, c * 2..c * 2 + 2]).to_owned();
            b_tiles.push(encode::encode_tau_b(&e, &tile, 4)?);
        }
    }
    let out = matmul::matmul_tiled(&e, &a_tiles, &b_tiles, tiling, None)?;
    let got = matmul::decode_tiled(&e, &out, tiling, &[4], &[2, 2])?;
    assert_eq!(got, oracle_matmul(&big_a, &big_b)?);
    println!("tiled product from {} output tiles:\n{got}", out.len());
    Ok(())
}
