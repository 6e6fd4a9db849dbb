//! Operands spread over several ciphertexts.
//!
//! Matrix product: `A` (`m x n`) becomes `n` ciphertexts, the `k`-th holding
//! column `k` of `A` broadcast across `p` columns; `B` (`n x p`) becomes `n`
//! ciphertexts, the `k`-th holding row `k` of `B` repeated on `m` rows. Then
//! `A * B = sum_k L_k * R_k` needs `n` multiplications and no rotations.
//!
//! Image: `w` ciphertexts, one per pixel column, so an image never has to
//! fit in a single ciphertext. A batch stacks image `b`'s column at slot
//! offset `b * h`. Convolution slides over ciphertexts horizontally and
//! over slots vertically.

use ndarray::Array2;
use rayon::prelude::*;

use crate::conv::Kernel;
use crate::encode::{Encoding, MatrixShape, PackedMatrix};
use crate::engine::{Backend, PlainMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandRole {
    /// Column `k` of `A` broadcast along each row.
    Left,
    /// Row `k` of `B` repeated on every row.
    Right,
}

#[derive(Debug, Clone)]
pub struct ColumnEncodedMatrix<C> {
    pub cts: Vec<C>,
    pub role: OperandRole,
    pub m: usize,
    pub n: usize,
    pub p: usize,
}

fn check_capacity<B: Backend>(be: &B, needed: usize) -> Result<()> {
    if needed > be.slots() {
        return Err(Error::Capacity { needed, slots: be.slots() });
    }
    Ok(())
}

/// Ciphertext `k` is the `m x p` matrix whose row `i` is `a[i][k]` repeated.
pub fn encode_left<B: Backend>(be: &B, a: &Array2<f64>, p: usize) -> Result<ColumnEncodedMatrix<B::Ct>> {
    let (m, n) = a.dim();
    if p == 0 || m == 0 || n == 0 {
        return Err(Error::precondition("left operand needs m, n, p > 0"));
    }
    check_capacity(be, m * p)?;
    let cts = (0..n)
        .map(|k| be.enc(&(0..m * p).map(|s| a[[s / p, k]]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(ColumnEncodedMatrix { cts, role: OperandRole::Left, m, n, p })
}

/// Ciphertext `k` is `m` stacked copies of row `k` of `b`.
pub fn encode_right<B: Backend>(be: &B, b: &Array2<f64>, m: usize) -> Result<ColumnEncodedMatrix<B::Ct>> {
    let (n, p) = b.dim();
    if m == 0 || n == 0 || p == 0 {
        return Err(Error::precondition("right operand needs m, n, p > 0"));
    }
    check_capacity(be, m * p)?;
    let cts = (0..n)
        .map(|k| be.enc(&(0..m * p).map(|s| b[[k, s % p]]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(ColumnEncodedMatrix { cts, role: OperandRole::Right, m, n, p })
}

/// `sum_k L_k * R_k`: the `m x p` product in row-major layout.
pub fn matmul_outer<B: Backend>(
    be: &B,
    left: &ColumnEncodedMatrix<B::Ct>,
    right: &ColumnEncodedMatrix<B::Ct>,
) -> Result<PackedMatrix<B::Ct>> {
    if left.role != OperandRole::Left || right.role != OperandRole::Right {
        return Err(Error::shape("matmul_outer expects a left and a right operand, in that order"));
    }
    if (left.m, left.n, left.p) != (right.m, right.n, right.p) || left.cts.len() != right.cts.len() {
        return Err(Error::shape(format!(
            "operand dimensions differ: {}x{}x{} vs {}x{}x{}",
            left.m, left.n, left.p, right.m, right.n, right.p
        )));
    }
    let terms: Vec<B::Ct> = left
        .cts
        .par_iter()
        .zip(right.cts.par_iter())
        .map(|(l, r)| be.mul(l, r))
        .collect::<Result<_>>()?;
    let mut iter = terms.into_iter();
    let mut acc = iter.next().ok_or_else(|| Error::shape("empty operands"))?;
    for t in iter {
        acc = be.add(&acc, &t)?;
    }
    Ok(PackedMatrix::new(acc, MatrixShape::new(left.m, left.p), Encoding::RowMajor))
}

/// An image batch stored one pixel column per ciphertext.
#[derive(Debug, Clone)]
pub struct ColumnEncodedImage<C> {
    pub cts: Vec<C>,
    /// Meaningful rows per image.
    pub h: usize,
    /// Number of column ciphertexts.
    pub w: usize,
    /// Images in the batch.
    pub batch: usize,
    /// Slots between consecutive images inside a column ciphertext.
    pub block: usize,
}

/// Column `j` of image `b` goes to ciphertext `j` at slot offset `b * h`.
pub fn encode_image_columns<B: Backend>(be: &B, images: &[Array2<f64>]) -> Result<ColumnEncodedImage<B::Ct>> {
    let first = images.first().ok_or_else(|| Error::precondition("no images to encode"))?;
    let (h, w) = first.dim();
    if h == 0 || w == 0 {
        return Err(Error::precondition("images must be non-empty"));
    }
    if let Some(b) = images.iter().position(|img| img.dim() != (h, w)) {
        return Err(Error::shape(format!("image {b} differs in size from image 0")));
    }
    check_capacity(be, images.len() * h)?;
    let cts = (0..w)
        .map(|j| {
            let col: Vec<f64> = images.iter().flat_map(|img| img.column(j).to_vec()).collect();
            be.enc(&col)
        })
        .collect::<Result<_>>()?;
    Ok(ColumnEncodedImage { cts, h, w, batch: images.len(), block: h })
}

/// Reassemble each image of the batch.
pub fn decode_image_columns<B: Backend>(be: &B, img: &ColumnEncodedImage<B::Ct>) -> Vec<Array2<f64>> {
    let cols: Vec<Vec<f64>> = img.cts.iter().map(|ct| be.dec(ct)).collect();
    (0..img.batch)
        .map(|b| Array2::from_shape_fn((img.h, img.w), |(r, j)| cols[j][b * img.block + r]))
        .collect()
}

/// Valid convolution in the column domain.
///
/// Output column `j` is `bias + sum_p rot(sum_q (K[p][q] * M_p) . X_{j+q}, p)`
/// where `M_p` keeps the rows `[p, p + h - k]` of each image block, so the
/// left rotation by `p` lands them on output rows `[0, h - k]` of the same
/// block and nothing crosses into a neighbour. Per output column: `k^2`
/// cmuls and `k - 1` rotations.
pub fn conv_columns<B: Backend>(
    be: &B,
    img: &ColumnEncodedImage<B::Ct>,
    kernel: &Kernel,
) -> Result<ColumnEncodedImage<B::Ct>> {
    let k = kernel.size();
    if k > img.h || k > img.w {
        return Err(Error::precondition(format!(
            "kernel size {k} does not fit a {}x{} image",
            img.h, img.w
        )));
    }
    let (out_h, out_w) = (img.h - k + 1, img.w - k + 1);
    let (block, batch) = (img.block, img.batch);
    let row_mask = |p: usize, weight: f64| {
        PlainMask::constant(
            (0..be.slots())
                .map(|s| {
                    let local = s % block;
                    if s / block < batch && local >= p && local < p + out_h { weight } else { 0.0 }
                })
                .collect(),
        )
    };
    let masks: Vec<Vec<PlainMask>> =
        (0..k).map(|p| (0..k).map(|q| row_mask(p, kernel.weights[[p, q]])).collect()).collect();
    let bias = be.enc(
        &(0..batch * block)
            .map(|s| if s % block < out_h { kernel.bias } else { 0.0 })
            .collect::<Vec<_>>(),
    )?;
    let cts = (0..out_w)
        .into_par_iter()
        .map(|j| {
            let mut acc = bias.clone();
            for (p, row) in masks.iter().enumerate() {
                let mut inner: Option<B::Ct> = None;
                for (q, mask) in row.iter().enumerate() {
                    let term = be.cmul(mask, &img.cts[j + q])?;
                    inner = Some(match inner {
                        Some(s) => be.add(&s, &term)?,
                        None => term,
                    });
                }
                let inner = inner.expect("k > 0");
                let shifted = if p == 0 { inner } else { be.rot(&inner, p as i64) };
                acc = be.add(&acc, &shifted)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(ColumnEncodedImage { cts, h: out_h, w: out_w, batch, block })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::decode;
    use crate::engine::SimEngine;
    use ndarray::array;

    #[test]
    fn left_and_right_layouts() {
        let e = SimEngine::with_slots(8).unwrap();
        let l = encode_left(&e, &array![[1.0, 2.0], [3.0, 4.0]], 2).unwrap();
        assert_eq!(&e.dec(&l.cts[0])[..4], &[1.0, 1.0, 3.0, 3.0]);
        assert_eq!(&e.dec(&l.cts[1])[..4], &[2.0, 2.0, 4.0, 4.0]);
        let r = encode_right(&e, &array![[5.0, 6.0], [7.0, 8.0]], 2).unwrap();
        assert_eq!(&e.dec(&r.cts[0])[..4], &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(&e.dec(&r.cts[1])[..4], &[7.0, 8.0, 7.0, 8.0]);
    }

    #[test]
    fn outer_product_sum() {
        let e = SimEngine::with_slots(8).unwrap();
        let l = encode_left(&e, &array![[1.0, 2.0], [3.0, 4.0]], 2).unwrap();
        let r = encode_right(&e, &array![[5.0, 6.0], [7.0, 8.0]], 2).unwrap();
        let before = e.meter_snapshot();
        let c = matmul_outer(&e, &l, &r).unwrap();
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.mul_count, d.rot_count), (2, 0));
        assert_eq!(decode(&e, &c), array![[19.0, 22.0], [43.0, 50.0]]);
        assert_eq!(c.ct.depth(), 1);
        assert!(matmul_outer(&e, &r, &l).is_err());
    }

    #[test]
    fn image_columns_layout() {
        let e = SimEngine::with_slots(8).unwrap();
        let img = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let enc = encode_image_columns(&e, &[img.clone(), img.clone() * 10.0]).unwrap();
        assert_eq!(enc.cts.len(), 3);
        assert_eq!(&e.dec(&enc.cts[0])[..6], &[1.0, 4.0, 7.0, 10.0, 40.0, 70.0]);
        assert_eq!(decode_image_columns(&e, &enc)[1], img * 10.0);
        assert!(encode_image_columns::<SimEngine>(&e, &[]).is_err());
    }

    #[test]
    fn ones_column_conv() {
        let e = SimEngine::with_slots(8).unwrap();
        let enc = encode_image_columns(&e, &[Array2::ones((3, 3))]).unwrap();
        let k = Kernel::new(Array2::ones((2, 2)), 0.0).unwrap();
        let before = e.meter_snapshot();
        let out = conv_columns(&e, &enc, &k).unwrap();
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.cmul_count, d.rot_count), (8, 2));
        assert_eq!(decode_image_columns(&e, &out), vec![Array2::from_elem((2, 2), 4.0)]);
    }

    #[test]
    fn image_larger_than_one_ciphertext() {
        // 8x8 = 64 pixels, but only 16 slots per ciphertext.
        let e = SimEngine::with_slots(16).unwrap();
        let img = Array2::from_shape_fn((8, 8), |(r, c)| ((r * 3 + c * 5) % 7) as f64);
        let k = Kernel::new(array![[1.0, 0.0, -1.0], [2.0, 1.0, 0.0], [0.0, -2.0, 1.0]], 1.0).unwrap();
        let out = conv_columns(&e, &encode_image_columns(&e, &[img.clone()]).unwrap(), &k).unwrap();
        let expect = crate::oracle::oracle_conv(&img, &k.weights, 1.0).unwrap();
        assert_eq!(decode_image_columns(&e, &out)[0], expect);
    }
}
