//! Single-ciphertext matrix multiplication with the revolver encoding, and
//! its blockwise extension to operands spread over several ciphertexts.
//!
//! `A` (`m x n`) is packed row-major, `B` (`n x p`) is revolver-encoded into
//! an `m_b x n` block whose row `r` is column `r mod p` of `B`. Iteration
//! `idx` of the product loop shifts the revolver by `idx` rows so that row
//! `i` faces column `(i + idx) mod p`, multiplies slot-wise with `A`, sums
//! each row, keeps the single slot `(i, (i + idx) mod p)` and accumulates.
//! After `p` iterations the accumulator holds `C = A * B` in the top-left
//! `m x p` corner of an `m x n` layout.

use ndarray::Array2;
use rayon::prelude::*;

use crate::encode::{self, Encoding, MatrixShape, PackedMatrix};
use crate::engine::{Backend, MaskRole, PlainMask};
use crate::error::{Error, Result};

/// Dimensions of one revolver product and the RowShifter variant it uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulPlan {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    /// Rows of the revolver block (`>= m` and `>= p`).
    pub revolver_rows: usize,
    /// RowShifter is a single rotation. Requires the revolver block to fill
    /// the ciphertext (so the cyclic wrap is a row wrap) and `p` to divide
    /// its row count.
    pub fast_path: bool,
}

impl MatmulPlan {
    pub fn new(m: usize, n: usize, p: usize, revolver_rows: usize, slots: usize) -> Result<Self> {
        if m == 0 || p == 0 {
            return Err(Error::precondition("matmul needs m > 0 and p > 0"));
        }
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::precondition(format!("inner dimension must be a power of two, got {n}")));
        }
        if p > n {
            return Err(Error::precondition(format!(
                "result width p = {p} exceeds the row width n = {n}; pad the inner dimension"
            )));
        }
        if revolver_rows < m || revolver_rows < p {
            return Err(Error::precondition(format!(
                "revolver block needs at least max(m, p) = {} rows, has {revolver_rows}",
                m.max(p)
            )));
        }
        if revolver_rows * n > slots {
            return Err(Error::Capacity { needed: revolver_rows * n, slots });
        }
        Ok(MatmulPlan {
            m,
            n,
            p,
            revolver_rows,
            fast_path: revolver_rows.is_multiple_of(p) && revolver_rows * n == slots,
        })
    }

    /// Plan for arbitrary `m x n` by `n x p` operands: the inner dimension is
    /// padded to a power of two no smaller than `p`, and the revolver block
    /// gets `max(m, p)` rows.
    pub fn padded(m: usize, n: usize, p: usize, slots: usize) -> Result<Self> {
        let inner = n.max(p).max(1).next_power_of_two();
        Self::new(m, inner, p, m.max(p), slots)
    }

    fn of<C>(a: &PackedMatrix<C>, bbar: &PackedMatrix<C>, slots: usize) -> Result<Self> {
        if a.encoding == (Encoding::Revolver { p: 0 }) || matches!(a.encoding, Encoding::Revolver { .. }) {
            return Err(Error::shape("left operand must be row-major, not revolver-encoded"));
        }
        let Encoding::Revolver { p } = bbar.encoding else {
            return Err(Error::shape("right operand must be revolver-encoded"));
        };
        if a.shape.cols != bbar.shape.cols {
            return Err(Error::shape(format!(
                "inner dimensions differ: A has {} columns, revolver block has {}",
                a.shape.cols, bbar.shape.cols
            )));
        }
        Self::new(a.shape.rows, a.shape.cols, p, bbar.shape.rows, slots)
    }
}

/// Pad and encode `a` (`m x n`) and `b` (`n x p`) for [`matmul`].
pub fn prepare_operands<B: Backend>(
    be: &B,
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<(PackedMatrix<B::Ct>, PackedMatrix<B::Ct>, MatmulPlan)> {
    let (m, n) = a.dim();
    let (nb, p) = b.dim();
    if n != nb {
        return Err(Error::shape(format!("cannot multiply {m}x{n} by {nb}x{p}")));
    }
    let plan = MatmulPlan::padded(m, n, p, be.slots())?;
    let a_pad = encode::pad_matrix(a, m, plan.n)?;
    let b_pad = encode::pad_matrix(b, plan.n, p)?;
    let ct_a = encode::encode_tau_a(be, &a_pad)?;
    let ct_b = encode::encode_tau_b(be, &b_pad, plan.revolver_rows)?;
    Ok((ct_a, ct_b, plan))
}

/// Revolver block shifted by `shift` rows: row `i` of the result is column
/// `(i + shift) mod p` of `B`.
///
/// `shift = 0` is a copy. On the fast path it is one rotation by
/// `n * shift`. Otherwise two rotations and two masks: the upper
/// `m_b - shift` rows come from rotating up by `shift` rows, the freed bottom
/// rows are refilled from rows `q` positions higher up, where `q` is the
/// largest multiple of `p` not above `m_b` (a right rotation, so nothing
/// wraps around the slot vector).
pub fn row_shifter<B: Backend>(be: &B, bbar: &PackedMatrix<B::Ct>, shift: usize) -> Result<PackedMatrix<B::Ct>> {
    let Encoding::Revolver { p } = bbar.encoding else {
        return Err(Error::shape("row_shifter needs a revolver-encoded block"));
    };
    if shift >= p {
        return Err(Error::precondition(format!("shift {shift} out of range for p = {p}")));
    }
    let MatrixShape { rows, cols } = bbar.shape;
    if rows < p {
        return Err(Error::precondition(format!("revolver block has {rows} rows, needs at least p = {p}")));
    }
    if shift == 0 {
        return Ok(bbar.clone());
    }
    let n = cols as i64;
    let ct = if rows % p == 0 && rows * cols == be.slots() {
        be.rot(&bbar.ct, n * shift as i64)
    } else {
        let split = (rows - shift) * cols;
        let upper = PlainMask::from_fn(be.slots(), MaskRole::KeepUpper, |s| s < split);
        let lower = PlainMask::from_fn(be.slots(), MaskRole::KeepLower, |s| s >= split && s < rows * cols);
        let wrap = rows - rows % p;
        let t1 = be.cmul(&upper, &be.rot(&bbar.ct, n * shift as i64))?;
        let t2 = be.cmul(&lower, &be.rot(&bbar.ct, n * (shift as i64 - wrap as i64)))?;
        be.add(&t1, &t2)?
    };
    Ok(PackedMatrix::new(ct, bbar.shape, bbar.encoding))
}

/// Result filter for iteration `idx`: row `i < m` keeps column
/// `(i + idx) mod p` of an `n`-wide layout.
pub fn build_result_filter(m: usize, n: usize, p: usize, idx: usize, slots: usize) -> Result<PlainMask> {
    if idx >= p {
        return Err(Error::precondition(format!("idx {idx} out of range for p = {p}")));
    }
    if m * n > slots || p > n {
        return Err(Error::shape(format!("filter for {m}x{n} (p = {p}) does not fit {slots} slots")));
    }
    Ok(PlainMask::from_fn(slots, MaskRole::Filter, |s| {
        let (i, j) = (s / n, s % n);
        i < m && j == (i + idx) % p
    }))
}

/// One iteration of the product loop, without the accumulation.
pub fn matmul_term<B: Backend>(
    be: &B,
    a: &PackedMatrix<B::Ct>,
    bbar: &PackedMatrix<B::Ct>,
    idx: usize,
) -> Result<B::Ct> {
    let plan = MatmulPlan::of(a, bbar, be.slots())?;
    let shifted = row_shifter(be, bbar, idx)?;
    let prod = be.mul(&a.ct, &shifted.ct)?;
    let prod = PackedMatrix::new(prod, MatrixShape::new(plan.revolver_rows, plan.n), Encoding::Database);
    let sums = encode::sum_col_vec(be, &prod)?;
    let filter = build_result_filter(plan.m, plan.n, plan.p, idx, be.slots())?;
    be.cmul(&filter, &sums.ct)
}

/// `C = A * B` with a zero accumulator.
pub fn matmul<B: Backend>(be: &B, a: &PackedMatrix<B::Ct>, bbar: &PackedMatrix<B::Ct>) -> Result<PackedMatrix<B::Ct>> {
    matmul_with_init(be, a, bbar, None)
}

/// `C = init + A * B`. `init` (for example a bias) must already be laid out
/// as an `m x n` block with values in the first `p` columns; when absent an
/// encryption of zeros is used.
pub fn matmul_with_init<B: Backend>(
    be: &B,
    a: &PackedMatrix<B::Ct>,
    bbar: &PackedMatrix<B::Ct>,
    init: Option<&B::Ct>,
) -> Result<PackedMatrix<B::Ct>> {
    let plan = MatmulPlan::of(a, bbar, be.slots())?;
    let terms: Vec<B::Ct> = (0..plan.p)
        .into_par_iter()
        .map(|idx| matmul_term(be, a, bbar, idx))
        .collect::<Result<_>>()?;
    let mut acc = match init {
        Some(ct) => ct.clone(),
        None => be.enc(&[])?,
    };
    for term in &terms {
        acc = be.add(&acc, term)?;
    }
    Ok(PackedMatrix::new(acc, MatrixShape::new(plan.m, plan.n), Encoding::RowMajor))
}

/// Read the top-left `rows x cols` block of a packed result.
pub fn decode_block<B: Backend>(be: &B, pm: &PackedMatrix<B::Ct>, rows: usize, cols: usize) -> Array2<f64> {
    let slots = be.dec(&pm.ct);
    let stride = pm.shape.cols;
    Array2::from_shape_fn((rows, cols), |(i, j)| slots[i * stride + j])
}

/// Encode an `m x p` matrix (e.g. a broadcast bias) as a matmul accumulator
/// for results laid out with row width `n`.
pub fn encode_accumulator<B: Backend>(be: &B, init: &Array2<f64>, n: usize) -> Result<B::Ct> {
    let (m, _) = init.dim();
    Ok(encode::encode_db(be, init, MatrixShape::new(m, n))?.ct)
}

/// Block partition of a product `C = A * B`: `A` is split into
/// `row_blocks x inner_blocks` tiles, `B` into `inner_blocks x col_blocks`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub row_blocks: usize,
    pub inner_blocks: usize,
    pub col_blocks: usize,
}

impl Tiling {
    pub fn new(row_blocks: usize, inner_blocks: usize, col_blocks: usize) -> Self {
        Tiling { row_blocks, inner_blocks, col_blocks }
    }
}

/// Blockwise product. `a_tiles[r * inner_blocks + t]` and
/// `b_tiles[t * col_blocks + c]`; output tile `(r, c)` at
/// `r * col_blocks + c` is `init[r * col_blocks + c] + sum_t A(r,t) * B(t,c)`.
/// Tiles are computed in parallel.
pub fn matmul_tiled<B: Backend>(
    be: &B,
    a_tiles: &[PackedMatrix<B::Ct>],
    b_tiles: &[PackedMatrix<B::Ct>],
    tiling: Tiling,
    init: Option<&[B::Ct]>,
) -> Result<Vec<PackedMatrix<B::Ct>>> {
    let Tiling { row_blocks, inner_blocks, col_blocks } = tiling;
    if row_blocks == 0 || inner_blocks == 0 || col_blocks == 0 {
        return Err(Error::shape("tiling needs at least one block in every direction"));
    }
    if a_tiles.len() != row_blocks * inner_blocks || b_tiles.len() != inner_blocks * col_blocks {
        return Err(Error::shape(format!(
            "expected {} A tiles and {} B tiles, got {} and {}",
            row_blocks * inner_blocks,
            inner_blocks * col_blocks,
            a_tiles.len(),
            b_tiles.len()
        )));
    }
    if let Some(init) = init {
        if init.len() != row_blocks * col_blocks {
            return Err(Error::shape("one accumulator per output tile required"));
        }
    }
    for r in 0..row_blocks {
        let rows = a_tiles[r * inner_blocks].shape.rows;
        for t in 0..inner_blocks {
            let at = &a_tiles[r * inner_blocks + t];
            if at.shape.rows != rows {
                return Err(Error::shape(format!("A tiles in block row {r} disagree on row count")));
            }
            for c in 0..col_blocks {
                let bt = &b_tiles[t * col_blocks + c];
                if bt.shape.cols != at.shape.cols {
                    return Err(Error::shape(format!("A({r},{t}) and B({t},{c}) are not conformal")));
                }
                if bt.encoding != b_tiles[c].encoding {
                    return Err(Error::shape(format!("B tiles in block column {c} disagree on width")));
                }
            }
        }
    }
    (0..row_blocks * col_blocks)
        .into_par_iter()
        .map(|out| {
            let (r, c) = (out / col_blocks, out % col_blocks);
            let partials: Vec<PackedMatrix<B::Ct>> = (0..inner_blocks)
                .map(|t| {
                    let seed = if t == 0 { init.map(|i| &i[out]) } else { None };
                    matmul_with_init(be, &a_tiles[r * inner_blocks + t], &b_tiles[t * col_blocks + c], seed)
                })
                .collect::<Result<_>>()?;
            let mut iter = partials.into_iter();
            let mut acc = iter.next().expect("inner_blocks > 0");
            for part in iter {
                acc.ct = be.add(&acc.ct, &part.ct)?;
            }
            Ok(acc)
        })
        .collect()
}

/// Reassemble tiled results into one matrix; `col_widths[c]` is the number
/// of valid columns in block column `c`.
pub fn decode_tiled<B: Backend>(
    be: &B,
    tiles: &[PackedMatrix<B::Ct>],
    tiling: Tiling,
    row_heights: &[usize],
    col_widths: &[usize],
) -> Result<Array2<f64>> {
    if tiles.len() != tiling.row_blocks * tiling.col_blocks
        || row_heights.len() != tiling.row_blocks
        || col_widths.len() != tiling.col_blocks
    {
        return Err(Error::shape("tile count does not match the tiling"));
    }
    let total_rows: usize = row_heights.iter().sum();
    let total_cols: usize = col_widths.iter().sum();
    let mut out = Array2::zeros((total_rows, total_cols));
    let mut row0 = 0;
    for (r, &h) in row_heights.iter().enumerate() {
        let mut col0 = 0;
        for (c, &w) in col_widths.iter().enumerate() {
            let block = decode_block(be, &tiles[r * tiling.col_blocks + c], h, w);
            out.slice_mut(ndarray::s![row0..row0 + h, col0..col0 + w]).assign(&block);
            col0 += w;
        }
        row0 += h;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SimEngine;
    use ndarray::array;

    fn engine(slots: usize) -> SimEngine {
        SimEngine::with_slots(slots).unwrap()
    }

    fn cols_of(b: &Array2<f64>) -> Vec<Vec<f64>> {
        b.columns().into_iter().map(|c| c.to_vec()).collect()
    }

    #[test]
    fn fig1_scenario() {
        let e = engine(8);
        let a = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let b = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let (ca, cb, plan) = prepare_operands(&e, &a, &b).unwrap();
        assert!(plan.fast_path);
        let c = matmul(&e, &ca, &cb).unwrap();
        assert_eq!(decode_block(&e, &c, 2, 2), array![[1.0, 2.0], [3.0, 4.0]]);
        let slots = e.dec(&c.ct);
        for (s, v) in slots.iter().enumerate() {
            if s % 4 >= 2 {
                assert_eq!(*v, 0.0, "slot {s}");
            }
        }
    }

    #[test]
    fn zero_left_operand_gives_zero() {
        let e = engine(32);
        let (ca, cb, _) = prepare_operands(&e, &Array2::zeros((4, 4)), &Array2::ones((4, 2))).unwrap();
        assert!(e.dec(&matmul(&e, &ca, &cb).unwrap().ct).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_shifter_fast_path_is_one_rotation() {
        let e = engine(8);
        let b = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let bbar = encode::encode_tau_b(&e, &b, 2).unwrap();
        let before = e.meter_snapshot();
        let shifted = row_shifter(&e, &bbar, 1).unwrap();
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.rot_count, d.cmul_count), (1, 0));
        assert_eq!(e.dec(&shifted.ct), e.dec(&e.rot(&bbar.ct, 4)));
        let rows = encode::decode(&e, &shifted);
        assert_eq!(rows.row(0).to_vec(), cols_of(&b)[1]);
        assert_eq!(rows.row(1).to_vec(), cols_of(&b)[0]);
    }

    #[test]
    fn row_shifter_general_path_costs_two_rotations() {
        // m = 3, p = 2 does not divide, so the block cannot wrap cyclically.
        let e = engine(64);
        let b = Array2::from_shape_fn((4, 2), |(i, j)| (10 * i + j) as f64);
        let bbar = encode::encode_tau_b(&e, &b, 3).unwrap();
        let before = e.meter_snapshot();
        let shifted = row_shifter(&e, &bbar, 1).unwrap();
        let d = e.meter_snapshot().since(&before);
        assert_eq!((d.rot_count, d.cmul_count, d.add_count), (2, 2, 1));
        let rows = encode::decode(&e, &shifted);
        let cols = cols_of(&b);
        for i in 0..3 {
            assert_eq!(rows.row(i).to_vec(), cols[(i + 1) % 2], "row {i}");
        }
        assert!(e.dec(&shifted.ct)[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_shifter_single_column_is_identity() {
        let e = engine(16);
        let bbar = encode::encode_tau_b(&e, &array![[1.0], [2.0]], 4).unwrap();
        assert_eq!(e.dec(&row_shifter(&e, &bbar, 0).unwrap().ct), e.dec(&bbar.ct));
        assert!(row_shifter(&e, &bbar, 1).is_err());
    }

    #[test]
    fn result_filter_placement() {
        let f = build_result_filter(2, 4, 2, 0, 8).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![0, 5]);
        let f = build_result_filter(2, 4, 2, 1, 8).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![1, 4]);
        let f = build_result_filter(3, 2, 1, 0, 8).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![0, 2, 4]);
        assert!(build_result_filter(2, 4, 2, 2, 8).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(MatmulPlan::new(2, 3, 2, 2, 64).is_err());
        assert!(MatmulPlan::new(2, 4, 8, 8, 64).is_err());
        assert!(MatmulPlan::new(2, 8, 4, 2, 64).is_err());
        assert!(MatmulPlan::new(8, 8, 4, 8, 32).is_err());
        let p = MatmulPlan::padded(1, 1, 8, 64).unwrap();
        assert_eq!((p.n, p.revolver_rows, p.fast_path), (8, 8, true));
        let p = MatmulPlan::padded(3, 4, 2, 64).unwrap();
        assert!(!p.fast_path);
    }

    #[test]
    fn mismatched_operands_rejected() {
        let e = engine(64);
        let a = encode::encode_tau_a(&e, &Array2::ones((2, 4))).unwrap();
        let b = encode::encode_tau_b(&e, &Array2::ones((8, 2)), 2).unwrap();
        assert!(matmul(&e, &a, &b).is_err());
        assert!(matmul(&e, &b, &b).is_err());
        assert!(matmul(&e, &a, &a).is_err());
    }

    #[test]
    fn accumulator_init_adds_bias() {
        let e = engine(16);
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let (ca, cb, plan) = prepare_operands(&e, &a, &b).unwrap();
        let bias = encode_accumulator(&e, &array![[1.0, -1.0], [1.0, -1.0]], plan.n).unwrap();
        let c = matmul_with_init(&e, &ca, &cb, Some(&bias)).unwrap();
        assert_eq!(decode_block(&e, &c, 2, 2), array![[20.0, 21.0], [44.0, 49.0]]);
    }

    #[test]
    fn depth_is_constant_in_p() {
        for p in [1, 2, 4, 8] {
            let e = engine(64);
            let (ca, cb, plan) = prepare_operands(&e, &Array2::ones((8, 8)), &Array2::ones((8, p))).unwrap();
            assert!(plan.fast_path);
            assert_eq!(matmul(&e, &ca, &cb).unwrap().ct.depth(), 3, "p = {p}");
        }
        // masked RowShifter adds one level on the revolver side only
        let e = engine(64);
        let (ca, cb, plan) = prepare_operands(&e, &Array2::ones((3, 4)), &Array2::ones((4, 2))).unwrap();
        assert!(!plan.fast_path);
        assert_eq!(matmul(&e, &ca, &cb).unwrap().ct.depth(), 4);
    }
}
