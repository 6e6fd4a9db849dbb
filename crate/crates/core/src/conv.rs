//! Convolution on a fully packed image.
//!
//! An `h x w` image sits row-major in one ciphertext. The kernel is spread
//! into `k^2` image-sized plaintext patterns (one per window offset), each
//! multiplied slot-wise with the image. Summing every `k x k` window of the
//! product leaves the window total at its top-left corner (the anchor);
//! the offset's filter keeps only anchors whose window matches the pattern
//! alignment, and the `k^2` filtered results tile the valid output.

use ndarray::Array2;
use rayon::prelude::*;

use crate::engine::{Backend, MaskRole, PlainMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn new(h: usize, w: usize) -> Self {
        ImageShape { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Valid-convolution output size for a `k x k` kernel.
    pub fn output(&self, k: usize) -> Result<ImageShape> {
        if k == 0 || k > self.h || k > self.w {
            return Err(Error::precondition(format!(
                "kernel size {k} does not fit a {}x{} image",
                self.h, self.w
            )));
        }
        Ok(ImageShape::new(self.h - k + 1, self.w - k + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub weights: Array2<f64>,
    pub bias: f64,
}

impl Kernel {
    pub fn new(weights: Array2<f64>, bias: f64) -> Result<Self> {
        let (r, c) = weights.dim();
        if r == 0 || r != c {
            return Err(Error::shape(format!("kernel must be square and non-empty, got {r}x{c}")));
        }
        Ok(Kernel { weights, bias })
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }
}

/// The `k^2` spread kernel patterns and the bias layout for one image shape.
/// `spans[i * k + j]` belongs to column offset `i` and row offset `j`.
#[derive(Debug, Clone)]
pub struct KernelSpan<C> {
    pub spans: Vec<C>,
    pub bias: C,
    pub shape: ImageShape,
    pub k: usize,
}

/// Plaintext value of span `(i, j)` at pixel `(r, c)`: the kernel weight
/// that pixel meets inside the window anchored at `(r0, c0)` with
/// `r0 = j (mod k)`, `c0 = i (mod k)`, or zero when that window leaves the
/// image.
pub fn span_value(kernel: &Kernel, shape: ImageShape, i: usize, j: usize, r: usize, c: usize) -> f64 {
    let k = kernel.size();
    let dr = (r + k - j % k) % k;
    let dc = (c + k - i % k) % k;
    if r < dr || c < dc {
        return 0.0;
    }
    let (r0, c0) = (r - dr, c - dc);
    if r0 + k > shape.h || c0 + k > shape.w {
        return 0.0;
    }
    kernel.weights[[dr, dc]]
}

/// Plaintext layout of span `(i, j)`, row-major over `shape`.
pub fn span_pattern(kernel: &Kernel, shape: ImageShape, i: usize, j: usize) -> Vec<f64> {
    (0..shape.len()).map(|s| span_value(kernel, shape, i, j, s / shape.w, s % shape.w)).collect()
}

fn bias_pattern(kernel: &Kernel, shape: ImageShape) -> Result<Vec<f64>> {
    let out = shape.output(kernel.size())?;
    Ok((0..shape.len())
        .map(|s| if s / shape.w < out.h && s % shape.w < out.w { kernel.bias } else { 0.0 })
        .collect())
}

fn check_span_shape(shape: ImageShape, k: usize) -> Result<()> {
    if shape.h < 2 * k - 1 || shape.w < 2 * k - 1 {
        return Err(Error::precondition(format!(
            "kernel spreading needs h, w >= 2k - 1 = {}, got {}x{}",
            2 * k - 1,
            shape.h,
            shape.w
        )));
    }
    Ok(())
}

/// Spread `kernel` over an `h x w` grid: `k^2` span ciphertexts plus a bias
/// ciphertext holding `k0` on the valid output block.
pub fn kernel_spanner<B: Backend>(be: &B, kernel: &Kernel, shape: ImageShape) -> Result<KernelSpan<B::Ct>> {
    let k = kernel.size();
    check_span_shape(shape, k)?;
    if shape.len() > be.slots() {
        return Err(Error::Capacity { needed: shape.len(), slots: be.slots() });
    }
    let spans = (0..k * k)
        .map(|idx| be.enc(&span_pattern(kernel, shape, idx / k, idx % k)))
        .collect::<Result<_>>()?;
    let bias = be.enc(&bias_pattern(kernel, shape)?)?;
    Ok(KernelSpan { spans, bias, shape, k })
}

/// Where anchors sit inside each image block of a slot vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AnchorGrid {
    pub shape: ImageShape,
    /// Slots between consecutive image rows.
    pub stride: usize,
    /// Number of image blocks.
    pub copies: usize,
    /// Slots between consecutive image blocks.
    pub block: usize,
}

impl AnchorGrid {
    pub fn single(shape: ImageShape) -> Self {
        AnchorGrid { shape, stride: shape.w, copies: 1, block: shape.len().max(1) }
    }
}

/// Anchor mask: `(r, c)` with the whole `k x k` window inside the image and,
/// when `align` is `Some((col_off, row_off))`, `r = row_off (mod k)` and
/// `c = col_off (mod k)`.
pub(crate) fn anchor_mask(slots: usize, grid: AnchorGrid, k: usize, align: Option<(usize, usize)>) -> PlainMask {
    let AnchorGrid { shape, stride, copies, block } = grid;
    PlainMask::from_fn(slots, MaskRole::Anchor, |s| {
        if block == 0 || s / block >= copies {
            return false;
        }
        let local = s % block;
        let (r, c) = (local / stride, local % stride);
        let aligned = align.is_none_or(|(col_off, row_off)| r % k == row_off && c % k == col_off);
        aligned && c < stride && r + k <= shape.h && c + k <= shape.w
    })
}

/// Filter for offset `(offset_i, offset_j)`: positions with
/// `(c - offset_i) mod k = 0`, `(r - offset_j) mod k = 0` and the window
/// inside the image.
pub fn build_offset_filter(shape: ImageShape, k: usize, offset_i: usize, offset_j: usize, slots: usize) -> Result<PlainMask> {
    if offset_i >= k || offset_j >= k {
        return Err(Error::precondition(format!("offsets ({offset_i}, {offset_j}) out of range for k = {k}")));
    }
    if shape.len() > slots {
        return Err(Error::Capacity { needed: shape.len(), slots });
    }
    Ok(anchor_mask(slots, AnchorGrid::single(shape), k, Some((offset_i, offset_j))))
}

/// Window sums at stride-`k` anchors. Slot `(r, c)` with `r`, `c` multiples
/// of `k` and the window inside the image ends up holding
/// `bias + sum_{p,q < k} I[r + p][c + q]`; every other slot is zero.
///
/// Costs exactly `2k` rotations, `2k` additions and one cmul: the first
/// loop accumulates `k` horizontal shifts, the second accumulates `k`
/// vertical shifts of that partial sum.
pub fn sum_for_conv<B: Backend>(be: &B, ct: &B::Ct, shape: ImageShape, k: usize, bias: f64) -> Result<B::Ct> {
    let mask = build_offset_filter(shape, k, 0, 0, be.slots())?;
    let grid = AnchorGrid::single(shape);
    window_sum(be, ct, grid, k, bias_vector(be, grid, k, bias)?, &mask)
}

/// Bias on the valid output block of every image in `grid`.
pub(crate) fn bias_vector<B: Backend>(be: &B, grid: AnchorGrid, k: usize, bias: f64) -> Result<Vec<f64>> {
    let AnchorGrid { shape, stride, copies, block } = grid;
    let out = shape.output(k)?;
    if (copies - 1) * block + (shape.h - 1) * stride + shape.w > be.slots() {
        return Err(Error::Capacity { needed: copies * block, slots: be.slots() });
    }
    let mut v = vec![0.0; be.slots()];
    if bias != 0.0 {
        for b in 0..copies {
            for r in 0..out.h {
                for c in 0..out.w {
                    v[b * block + r * stride + c] = bias;
                }
            }
        }
    }
    Ok(v)
}

/// Shared body of the window sum with a pre-built mask and bias layout.
pub(crate) fn window_sum<B: Backend>(
    be: &B,
    ct: &B::Ct,
    grid: AnchorGrid,
    k: usize,
    bias: Vec<f64>,
    mask: &PlainMask,
) -> Result<B::Ct> {
    let mut cols = be.enc(&[])?;
    for q in 0..k {
        cols = be.add(&cols, &be.rot(ct, q as i64))?;
    }
    let mut acc = be.enc(&bias)?;
    for p in 0..k {
        acc = be.add(&acc, &be.rot(&cols, (p * grid.stride) as i64))?;
    }
    be.cmul(mask, &acc)
}

/// Valid convolution of one packed image. The result occupies the top-left
/// `(h-k+1) x (w-k+1)` block of the `h x w` layout; other slots are zero.
///
/// Each offset's span aligns windows at anchors congruent to that offset,
/// so the in-loop window sum keeps every valid anchor (rather than the
/// stride-`k` grid of [`sum_for_conv`]) and the offset filter then picks
/// the aligned ones.
pub fn conv<B: Backend>(be: &B, ct: &B::Ct, span: &KernelSpan<B::Ct>) -> Result<B::Ct> {
    let (shape, k) = (span.shape, span.k);
    if span.spans.len() != k * k {
        return Err(Error::shape(format!("expected {} span ciphertexts, got {}", k * k, span.spans.len())));
    }
    let grid = AnchorGrid::single(shape);
    let valid = anchor_mask(be.slots(), grid, k, None);
    let zeros = vec![0.0; be.slots()];
    let terms: Vec<B::Ct> = (0..k * k)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            let prod = be.mul(ct, &span.spans[idx])?;
            let sums = window_sum(be, &prod, grid, k, zeros.clone(), &valid)?;
            let filter = build_offset_filter(shape, k, i, j, be.slots())?;
            be.cmul(&filter, &sums)
        })
        .collect::<Result<_>>()?;
    let mut acc = span.bias.clone();
    for t in &terms {
        acc = be.add(&acc, t)?;
    }
    Ok(acc)
}

/// Read the valid output block of a [`conv`] result.
pub fn decode_conv<B: Backend>(be: &B, ct: &B::Ct, shape: ImageShape, k: usize) -> Result<Array2<f64>> {
    let out = shape.output(k)?;
    let slots = be.dec(ct);
    Ok(Array2::from_shape_fn((out.h, out.w), |(r, c)| slots[r * shape.w + c]))
}

/// Encode an image row-major from slot 0.
pub fn encode_image<B: Backend>(be: &B, image: &Array2<f64>) -> Result<B::Ct> {
    let values: Vec<f64> = image.iter().copied().collect();
    be.enc(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimEngine;
    use ndarray::array;

    fn engine(slots: usize) -> SimEngine {
        SimEngine::with_slots(slots).unwrap()
    }

    #[test]
    fn spanner_matches_four_by_four_display() {
        let k = Kernel::new(array![[1.0, 2.0], [3.0, 4.0]], 0.0).unwrap();
        let s = ImageShape::new(4, 4);
        let grid = |i, j| Array2::from_shape_vec((4, 4), span_pattern(&k, s, i, j)).unwrap();
        assert_eq!(
            grid(0, 0),
            array![[1.0, 2.0, 1.0, 2.0], [3.0, 4.0, 3.0, 4.0], [1.0, 2.0, 1.0, 2.0], [3.0, 4.0, 3.0, 4.0]]
        );
        assert_eq!(
            grid(1, 0),
            array![[0.0, 1.0, 2.0, 0.0], [0.0, 3.0, 4.0, 0.0], [0.0, 1.0, 2.0, 0.0], [0.0, 3.0, 4.0, 0.0]]
        );
        assert_eq!(
            grid(1, 1),
            array![[0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 2.0, 0.0], [0.0, 3.0, 4.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
        );
        assert_eq!(
            grid(0, 1),
            array![[0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 1.0, 2.0], [3.0, 4.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]]
        );
    }

    #[test]
    fn bias_ciphertext_covers_valid_block() {
        let e = engine(16);
        let k = Kernel::new(Array2::ones((2, 2)), 7.0).unwrap();
        let span = kernel_spanner(&e, &k, ImageShape::new(4, 4)).unwrap();
        assert_eq!(span.spans.len(), 4);
        let b = e.dec(&span.bias);
        for s in 0..16 {
            let expect = if s / 4 < 3 && s % 4 < 3 { 7.0 } else { 0.0 };
            assert_eq!(b[s], expect, "slot {s}");
        }
    }

    #[test]
    fn unit_kernel_spans_everywhere() {
        let e = engine(16);
        let k = Kernel::new(array![[2.5]], 0.0).unwrap();
        let span = kernel_spanner(&e, &k, ImageShape::new(3, 5)).unwrap();
        assert_eq!(span.spans.len(), 1);
        assert_eq!(&e.dec(&span.spans[0])[..15], &[2.5; 15]);
    }

    #[test]
    fn spanner_rejects_small_images() {
        let e = engine(64);
        let k = Kernel::new(Array2::ones((3, 3)), 0.0).unwrap();
        assert!(kernel_spanner(&e, &k, ImageShape::new(4, 8)).is_err());
        assert!(kernel_spanner(&e, &k, ImageShape::new(5, 5)).is_ok());
    }

    #[test]
    fn sum_for_conv_keeps_aligned_anchor_only() {
        let e = engine(16);
        let ct = e.enc(&[1.0; 16]).unwrap();
        let out = e.dec(&sum_for_conv(&e, &ct, ImageShape::new(4, 4), 3, 0.0).unwrap());
        let mut expect = vec![0.0; 16];
        expect[0] = 9.0;
        assert_eq!(out, expect);
    }

    #[test]
    fn sum_for_conv_costs() {
        let e = engine(64);
        let ct = e.enc(&(0..36).map(f64::from).collect::<Vec<_>>()).unwrap();
        let before = e.meter_snapshot();
        let out = e.dec(&sum_for_conv(&e, &ct, ImageShape::new(6, 6), 3, 1.5).unwrap());
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.rot_count, d.add_count, d.cmul_count), (6, 6, 1));
        let window = |r: usize, c: usize| -> f64 {
            (0..3).flat_map(|p| (0..3).map(move |q| ((r + p) * 6 + c + q) as f64)).sum()
        };
        for s in 0..64 {
            let (r, c) = (s / 6, s % 6);
            let expect = if s < 36 && r % 3 == 0 && c % 3 == 0 && r + 3 <= 6 && c + 3 <= 6 {
                1.5 + window(r, c)
            } else {
                0.0
            };
            assert_eq!(out[s], expect, "slot {s}");
        }
    }

    #[test]
    fn sum_for_conv_unit_window_adds_bias_everywhere() {
        let e = engine(8);
        let ct = e.enc(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = e.dec(&sum_for_conv(&e, &ct, ImageShape::new(2, 3), 1, 0.5).unwrap());
        assert_eq!(out, vec![1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 0.0, 0.0]);
    }

    #[test]
    fn offset_filters_partition_the_valid_block() {
        let s = ImageShape::new(5, 5);
        let mut hits = vec![0; 25];
        for i in 0..3 {
            for j in 0..3 {
                for p in build_offset_filter(s, 3, i, j, 32).unwrap().ones() {
                    hits[p] += 1;
                }
            }
        }
        for (p, &h) in hits.iter().enumerate() {
            let valid = p / 5 < 3 && p % 5 < 3;
            assert_eq!(h, usize::from(valid), "slot {p}");
        }
    }

    #[test]
    fn narrow_image_anchors() {
        let f = build_offset_filter(ImageShape::new(3, 4), 3, 0, 0, 16).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![0]);
        let f = build_offset_filter(ImageShape::new(3, 4), 3, 1, 0, 16).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![1]);
        assert!(build_offset_filter(ImageShape::new(3, 4), 3, 3, 0, 16).is_err());
    }

    #[test]
    fn ones_image_ones_kernel() {
        let e = engine(16);
        let k = Kernel::new(Array2::ones((2, 2)), 0.0).unwrap();
        let shape = ImageShape::new(3, 3);
        let span = kernel_spanner(&e, &k, shape).unwrap();
        let ct = encode_image(&e, &Array2::ones((3, 3))).unwrap();
        let out = conv(&e, &ct, &span).unwrap();
        assert_eq!(decode_conv(&e, &out, shape, 2).unwrap(), Array2::from_elem((2, 2), 4.0));
        let slots = e.dec(&out);
        assert!(slots.iter().enumerate().all(|(s, &v)| v == 0.0 || (s / 3 < 2 && s % 3 < 2)));
    }

    #[test]
    fn zero_kernel_leaves_bias() {
        let e = engine(64);
        let k = Kernel::new(Array2::zeros((3, 3)), -2.0).unwrap();
        let shape = ImageShape::new(6, 7);
        let span = kernel_spanner(&e, &k, shape).unwrap();
        let ct = encode_image(&e, &Array2::from_elem((6, 7), 3.0)).unwrap();
        let out = decode_conv(&e, &conv(&e, &ct, &span).unwrap(), shape, 3).unwrap();
        assert_eq!(out, Array2::from_elem((4, 5), -2.0));
    }

    #[test]
    fn conv_costs() {
        let e = engine(64);
        let k = Kernel::new(Array2::ones((3, 3)), 0.0).unwrap();
        let shape = ImageShape::new(6, 6);
        let span = kernel_spanner(&e, &k, shape).unwrap();
        let ct = encode_image(&e, &Array2::ones((6, 6))).unwrap();
        let before = e.meter_snapshot();
        let out = conv(&e, &ct, &span).unwrap();
        let d = e.meter_snapshot().since(&before);
        assert_eq!(d.mul_count, 9);
        assert_eq!(d.rot_count, 9 * 6);
        assert_eq!(d.cmul_count, 18);
        assert_eq!(out.depth(), 3);
    }
}
