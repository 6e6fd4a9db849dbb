//! One dataset ciphertext viewed as `m` independent image ciphertexts.
//!
//! Image `b` occupies slots `[b * f, b * f + h * w)` row-major; the rest of
//! its `f`-slot row is zero padding. Slot-wise operations act on every image
//! at once, so addition and multiplication carry over unchanged. Rotation
//! does not: a plain rotation leaks values between neighbouring images, and
//! [`vrot`] fixes that with two masked rotations.

use ndarray::Array2;
use rayon::prelude::*;

use crate::conv::{self, AnchorGrid, ImageShape, Kernel, KernelSpan};
use crate::engine::{Backend, LayoutTag, MaskRole, PlainMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualLayout {
    /// Images per ciphertext.
    pub m: usize,
    /// Slots per image row of the dataset matrix.
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl VirtualLayout {
    pub fn new(m: usize, f: usize, h: usize, w: usize) -> Result<Self> {
        if m == 0 || h == 0 || w == 0 {
            return Err(Error::precondition("virtual layout needs m, h, w > 0"));
        }
        if !f.is_power_of_two() {
            return Err(Error::precondition(format!("row stride f must be a power of two, got {f}")));
        }
        if h * w > f {
            return Err(Error::precondition(format!("{h}x{w} image does not fit a row of {f} slots")));
        }
        Ok(VirtualLayout { m, f, h, w })
    }

    /// As many images of the given size as fit, using row stride `f`.
    pub fn fill(slots: usize, f: usize, h: usize, w: usize) -> Result<Self> {
        if f == 0 || !slots.is_multiple_of(f) {
            return Err(Error::precondition(format!("row stride {f} does not divide {slots} slots")));
        }
        Self::new(slots / f, f, h, w)
    }

    pub fn image(&self) -> ImageShape {
        ImageShape::new(self.h, self.w)
    }

    pub fn pad(&self) -> usize {
        self.f - self.h * self.w
    }

    pub fn slots_used(&self) -> usize {
        self.m * self.f
    }

    pub fn tag(&self) -> LayoutTag {
        LayoutTag::Dataset { rows: self.m as u32, stride: self.f as u32, h: self.h as u32, w: self.w as u32 }
    }

    /// Smallest padding that keeps every valid window read inside its own
    /// image prefix.
    pub fn required_pad(&self, k: usize) -> usize {
        (k.saturating_sub(1)) * (self.w + 1)
    }

    fn check<B: Backend>(&self, be: &B) -> Result<()> {
        if self.slots_used() > be.slots() {
            return Err(Error::Capacity { needed: self.slots_used(), slots: be.slots() });
        }
        Ok(())
    }

    fn grid(&self) -> AnchorGrid {
        AnchorGrid { shape: self.image(), stride: self.w, copies: self.m, block: self.f }
    }
}

/// Pack `images` (each `h x w`) one per row. Fewer than `m` images leave
/// the remaining rows zero.
pub fn encode_batch<B: Backend>(be: &B, images: &[Array2<f64>], layout: VirtualLayout) -> Result<B::Ct> {
    layout.check(be)?;
    if images.len() > layout.m {
        return Err(Error::Capacity { needed: images.len() * layout.f, slots: layout.slots_used() });
    }
    let mut slots = vec![0.0; layout.slots_used()];
    for (b, img) in images.iter().enumerate() {
        if img.dim() != (layout.h, layout.w) {
            return Err(Error::shape(format!(
                "image {b} is {}x{}, layout expects {}x{}",
                img.nrows(),
                img.ncols(),
                layout.h,
                layout.w
            )));
        }
        for (s, &v) in img.iter().enumerate() {
            slots[b * layout.f + s] = v;
        }
    }
    Ok(be.retag(be.enc(&slots)?, layout.tag()))
}

/// The `h * w` prefix of every image row.
pub fn decode_batch<B: Backend>(be: &B, ct: &B::Ct, layout: VirtualLayout) -> Vec<Vec<f64>> {
    let slots = be.dec(ct);
    (0..layout.m).map(|b| slots[b * layout.f..b * layout.f + layout.h * layout.w].to_vec()).collect()
}

/// Rotate every image prefix left by `r` independently.
///
/// `rot(X, r)` is correct in columns `[0, hw - r)` of each row; the
/// wrapped tail `[hw - r, hw)` comes from a right rotation by `hw - r`.
/// Two rotations, two masks, one addition, whatever `r` is.
pub fn vrot<B: Backend>(be: &B, ct: &B::Ct, layout: VirtualLayout, r: usize) -> Result<B::Ct> {
    layout.check(be)?;
    let hw = layout.h * layout.w;
    if r >= hw {
        return Err(Error::precondition(format!("virtual rotation {r} out of range for images of {hw} slots")));
    }
    let (m, f) = (layout.m, layout.f);
    let head = PlainMask::from_fn(be.slots(), MaskRole::KeepUpper, |s| s / f < m && s % f < hw - r);
    let tail = PlainMask::from_fn(be.slots(), MaskRole::KeepLower, |s| {
        s / f < m && s % f >= hw - r && s % f < hw
    });
    let t1 = be.cmul(&head, &be.rot(ct, r as i64))?;
    let t2 = be.cmul(&tail, &be.rot(ct, r as i64 - hw as i64))?;
    be.add(&t1, &t2)
}

/// Slot-wise sum; every image is added to its counterpart.
pub fn vadd<B: Backend>(be: &B, a: &B::Ct, b: &B::Ct) -> Result<B::Ct> {
    be.add(a, b)
}

/// Slot-wise product; every image is multiplied with its counterpart.
pub fn vmul<B: Backend>(be: &B, a: &B::Ct, b: &B::Ct) -> Result<B::Ct> {
    be.mul(a, b)
}

/// Kernel spread over every image row of `layout`: span `(i, j)` repeats
/// the single-image pattern in each row's prefix.
pub fn batched_kernel_spanner<B: Backend>(be: &B, kernel: &Kernel, layout: VirtualLayout) -> Result<KernelSpan<B::Ct>> {
    layout.check(be)?;
    let k = kernel.size();
    let shape = layout.image();
    if shape.h < 2 * k - 1 || shape.w < 2 * k - 1 {
        return Err(Error::precondition(format!(
            "kernel spreading needs h, w >= 2k - 1 = {}, got {}x{}",
            2 * k - 1,
            shape.h,
            shape.w
        )));
    }
    let tile = |row: &[f64]| {
        let mut v = vec![0.0; layout.slots_used()];
        for b in 0..layout.m {
            v[b * layout.f..b * layout.f + row.len()].copy_from_slice(row);
        }
        v
    };
    let spans = (0..k * k)
        .map(|idx| be.enc(&tile(&conv::span_pattern(kernel, shape, idx / k, idx % k))))
        .collect::<Result<_>>()?;
    let bias = be.enc(&conv::bias_vector(be, layout.grid(), k, kernel.bias)?)?;
    Ok(KernelSpan { spans, bias, shape, k })
}

/// Convolve all `m` images at once. Every image's valid output lands on the
/// top-left `(h-k+1) x (w-k+1)` block of its prefix (row stride `w`).
///
/// Rotations move values across image boundaries, so the padding between
/// consecutive prefixes must absorb the farthest read of a valid window:
/// `pad >= (k-1)(w+1)`.
pub fn batched_conv<B: Backend>(be: &B, ct: &B::Ct, layout: VirtualLayout, span: &KernelSpan<B::Ct>) -> Result<B::Ct> {
    layout.check(be)?;
    let k = span.k;
    if span.shape != layout.image() || span.spans.len() != k * k {
        return Err(Error::shape("kernel span was built for a different image shape"));
    }
    if layout.pad() < layout.required_pad(k) {
        return Err(Error::precondition(format!(
            "padding {} is below the {} slots needed to keep images apart for k = {k}",
            layout.pad(),
            layout.required_pad(k)
        )));
    }
    let grid = layout.grid();
    let valid = conv::anchor_mask(be.slots(), grid, k, None);
    let zeros = vec![0.0; be.slots()];
    let terms: Vec<B::Ct> = (0..k * k)
        .into_par_iter()
        .map(|idx| {
            let prod = be.mul(ct, &span.spans[idx])?;
            let sums = conv::window_sum(be, &prod, grid, k, zeros.clone(), &valid)?;
            let filter = conv::anchor_mask(be.slots(), grid, k, Some((idx / k, idx % k)));
            be.cmul(&filter, &sums)
        })
        .collect::<Result<_>>()?;
    let mut acc = span.bias.clone();
    for t in &terms {
        acc = be.add(&acc, t)?;
    }
    Ok(acc)
}

/// Per-image valid output block of a [`batched_conv`] result.
pub fn decode_batched_conv<B: Backend>(be: &B, ct: &B::Ct, layout: VirtualLayout, k: usize) -> Result<Vec<Array2<f64>>> {
    let out = layout.image().output(k)?;
    let slots = be.dec(ct);
    Ok((0..layout.m)
        .map(|b| Array2::from_shape_fn((out.h, out.w), |(r, c)| slots[b * layout.f + r * layout.w + c]))
        .collect())
}

/// Compact an `out_h x out_w` block stored at row stride `w` into the first
/// `out_h * out_w` slots of each image prefix, row-major.
///
/// Row `r` is masked out and rotated left by `r * (w - out_w)`; row 0 needs
/// no rotation. Costs `out_h` cmuls, at most `out_h - 1` rotations and
/// `out_h - 1` additions.
pub fn reform<B: Backend>(
    be: &B,
    ct: &B::Ct,
    layout: VirtualLayout,
    out_h: usize,
    out_w: usize,
) -> Result<(B::Ct, VirtualLayout)> {
    layout.check(be)?;
    if out_h == 0 || out_w == 0 || out_h > layout.h || out_w > layout.w {
        return Err(Error::precondition(format!(
            "block {out_h}x{out_w} exceeds the {}x{} image",
            layout.h, layout.w
        )));
    }
    let (m, f, w) = (layout.m, layout.f, layout.w);
    let rows: Vec<B::Ct> = (0..out_h)
        .into_par_iter()
        .map(|r| {
            let mask = PlainMask::from_fn(be.slots(), MaskRole::Filter, |s| {
                let local = s % f;
                s / f < m && local >= r * w && local < r * w + out_w
            });
            let row = be.cmul(&mask, ct)?;
            let shift = r * (w - out_w);
            Ok(if shift == 0 { row } else { be.rot(&row, shift as i64) })
        })
        .collect::<Result<_>>()?;
    let mut iter = rows.into_iter();
    let mut acc = iter.next().expect("out_h > 0");
    for row in iter {
        acc = be.add(&acc, &row)?;
    }
    let next = VirtualLayout::new(m, f, out_h, out_w)?;
    Ok((be.retag(acc, next.tag()), next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimEngine;
    use crate::oracle::oracle_conv;
    use ndarray::array;

    fn seq(h: usize, w: usize, start: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| start + (r * w + c) as f64)
    }

    #[test]
    fn vrot_rotates_each_image() {
        let e = SimEngine::with_slots(32).unwrap();
        let layout = VirtualLayout::new(2, 16, 3, 4).unwrap();
        let ct = encode_batch(&e, &[seq(3, 4, 1.0), seq(3, 4, 13.0)], layout).unwrap();
        let before = e.meter_snapshot();
        let out = decode_batch(&e, &vrot(&e, &ct, layout, 4).unwrap(), layout);
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.rot_count, d.cmul_count, d.add_count), (2, 2, 1));
        let expect = |start: f64| -> Vec<f64> { (4..12).chain(0..4).map(|i| start + i as f64).collect() };
        assert_eq!(out[0], expect(1.0));
        assert_eq!(out[1], expect(13.0));
    }

    #[test]
    fn vrot_zero_and_padding() {
        let e = SimEngine::with_slots(32).unwrap();
        let layout = VirtualLayout::new(2, 16, 3, 4).unwrap();
        let ct = encode_batch(&e, &[seq(3, 4, 1.0), seq(3, 4, 13.0)], layout).unwrap();
        let out = e.dec(&vrot(&e, &ct, layout, 0).unwrap());
        assert_eq!(out, e.dec(&ct));
        assert!(vrot(&e, &ct, layout, 12).is_err());
    }

    #[test]
    fn vmul_and_vadd_are_per_image() {
        let e = SimEngine::with_slots(16).unwrap();
        let layout = VirtualLayout::new(2, 8, 2, 2).unwrap();
        let a = encode_batch(&e, &[array![[1.0, 2.0], [3.0, 4.0]], array![[5.0, 6.0], [7.0, 8.0]]], layout).unwrap();
        let b = encode_batch(&e, &[array![[2.0, 2.0], [2.0, 2.0]], array![[0.0, 1.0], [0.0, 1.0]]], layout).unwrap();
        let prod = decode_batch(&e, &vmul(&e, &a, &b).unwrap(), layout);
        assert_eq!(prod, vec![vec![2.0, 4.0, 6.0, 8.0], vec![0.0, 6.0, 0.0, 8.0]]);
        let zero = encode_batch(&e, &[], layout).unwrap();
        assert_eq!(e.dec(&vadd(&e, &a, &zero).unwrap()), e.dec(&a));
    }

    #[test]
    fn batched_conv_matches_per_image_oracle() {
        let e = SimEngine::with_slots(512).unwrap();
        let layout = VirtualLayout::new(4, 128, 8, 8).unwrap();
        let images: Vec<_> = (0..4).map(|b| seq(8, 8, b as f64 * 3.0).mapv(|v| (v * 7.0) % 11.0 - 5.0)).collect();
        let kernel = Kernel::new(array![[1.0, -2.0, 0.0], [3.0, 1.0, -1.0], [0.0, 2.0, 1.0]], 0.5).unwrap();
        let span = batched_kernel_spanner(&e, &kernel, layout).unwrap();
        let ct = encode_batch(&e, &images, layout).unwrap();
        let out = decode_batched_conv(&e, &batched_conv(&e, &ct, layout, &span).unwrap(), layout, 3).unwrap();
        for (b, img) in images.iter().enumerate() {
            assert_eq!(out[b], oracle_conv(img, &kernel.weights, 0.5).unwrap(), "image {b}");
        }
    }

    #[test]
    fn batched_conv_rejects_thin_padding() {
        let e = SimEngine::with_slots(64).unwrap();
        let layout = VirtualLayout::new(4, 16, 3, 5).unwrap();
        let kernel = Kernel::new(Array2::ones((2, 2)), 0.0).unwrap();
        let span = batched_kernel_spanner(&e, &kernel, layout).unwrap();
        let ct = encode_batch(&e, &[], layout).unwrap();
        assert!(matches!(batched_conv(&e, &ct, layout, &span), Err(Error::Precondition(_))));
    }

    #[test]
    fn mnist_margin_holds() {
        let layout = VirtualLayout::fill(32768, 1024, 28, 28).unwrap();
        assert_eq!(layout.m, 32);
        assert_eq!(layout.pad(), 240);
        assert_eq!(layout.required_pad(3), 58);
    }

    #[test]
    fn reform_compacts_each_image() {
        let e = SimEngine::with_slots(32).unwrap();
        let layout = VirtualLayout::new(2, 16, 3, 3).unwrap();
        let j = |s: f64| array![[s, s + 1.0, 0.0], [s + 2.0, s + 3.0, 0.0], [0.0, 0.0, 0.0]];
        let ct = encode_batch(&e, &[j(1.0), j(11.0)], layout).unwrap();
        let before = e.meter_snapshot();
        let (out, next) = reform(&e, &ct, layout, 2, 2).unwrap();
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.rot_count, d.cmul_count), (1, 2));
        assert_eq!((next.h, next.w), (2, 2));
        let slots = e.dec(&out);
        assert_eq!(&slots[..9], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&slots[16..25], &[11.0, 12.0, 13.0, 14.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reform_full_size_is_identity() {
        let e = SimEngine::with_slots(32).unwrap();
        let layout = VirtualLayout::new(2, 16, 3, 4).unwrap();
        let ct = encode_batch(&e, &[seq(3, 4, 1.0), seq(3, 4, 13.0)], layout).unwrap();
        let (out, _) = reform(&e, &ct, layout, 3, 4).unwrap();
        assert_eq!(e.dec(&out), e.dec(&ct));
    }
}
