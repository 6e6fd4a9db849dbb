//! Matrix-to-slot layouts and the row/column primitives built on them.
//!
//! Every layout here is row-major from slot 0: entry `(i, j)` of an `m x n`
//! matrix lives at slot `i * n + j` and slots past `m * n` are zero.

use ndarray::Array2;

use crate::engine::{Backend, LayoutTag, MaskRole, PlainMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixShape {
    pub rows: usize,
    pub cols: usize,
}

impl MatrixShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        MatrixShape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> LayoutTag {
        LayoutTag::Matrix { rows: self.rows as u32, cols: self.cols as u32 }
    }
}

/// How a [`PackedMatrix`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Dataset packing: one sample per row.
    Database,
    /// Left matmul operand, plain row-major.
    RowMajor,
    /// Right matmul operand: row `r` holds column `r mod p` of the source.
    Revolver { p: usize },
}

#[derive(Debug, Clone)]
pub struct PackedMatrix<C> {
    pub ct: C,
    pub shape: MatrixShape,
    pub encoding: Encoding,
}

impl<C> PackedMatrix<C> {
    pub fn new(ct: C, shape: MatrixShape, encoding: Encoding) -> Self {
        PackedMatrix { ct, shape, encoding }
    }

    fn with_ct(&self, ct: C) -> Self {
        PackedMatrix { ct, shape: self.shape, encoding: self.encoding }
    }
}

/// Zero-pad `a` to `rows x cols`.
pub fn pad_matrix(a: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if a.nrows() > rows || a.ncols() > cols {
        return Err(Error::shape(format!(
            "cannot pad {}x{} into {rows}x{cols}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut out = Array2::zeros((rows, cols));
    out.slice_mut(ndarray::s![..a.nrows(), ..a.ncols()]).assign(a);
    Ok(out)
}

fn check_fits<B: Backend>(be: &B, shape: MatrixShape) -> Result<()> {
    if shape.len() > be.slots() {
        return Err(Error::Capacity { needed: shape.len(), slots: be.slots() });
    }
    Ok(())
}

fn pack_row_major(z: &Array2<f64>, shape: MatrixShape) -> Vec<f64> {
    let mut slots = vec![0.0; shape.len()];
    for ((i, j), &v) in z.indexed_iter() {
        slots[i * shape.cols + j] = v;
    }
    slots
}

/// Row-major dataset packing of `z` into a `shape` layout (`z` may be
/// smaller than `shape`; the rest is zero).
pub fn encode_db<B: Backend>(be: &B, z: &Array2<f64>, shape: MatrixShape) -> Result<PackedMatrix<B::Ct>> {
    if z.nrows() > shape.rows || z.ncols() > shape.cols {
        return Err(Error::shape(format!(
            "{}x{} data does not fit a {}x{} layout",
            z.nrows(),
            z.ncols(),
            shape.rows,
            shape.cols
        )));
    }
    check_fits(be, shape)?;
    let ct = be.enc(&pack_row_major(z, shape))?;
    Ok(PackedMatrix::new(be.retag(ct, shape.tag()), shape, Encoding::Database))
}

/// Left-operand encoding: slot `k` holds `a[k / n][k % n]`.
pub fn encode_tau_a<B: Backend>(be: &B, a: &Array2<f64>) -> Result<PackedMatrix<B::Ct>> {
    let shape = MatrixShape::new(a.nrows(), a.ncols());
    check_fits(be, shape)?;
    let slots: Vec<f64> = (0..shape.len()).map(|k| a[[k / shape.cols, k % shape.cols]]).collect();
    let ct = be.enc(&slots)?;
    Ok(PackedMatrix::new(be.retag(ct, shape.tag()), shape, Encoding::RowMajor))
}

/// Revolver encoding of an `n x p` matrix into a `target_m x n` layout:
/// slot `k` holds `b[k % n][(k / n) % p]`, i.e. row `r` is column `r mod p`.
pub fn encode_tau_b<B: Backend>(be: &B, b: &Array2<f64>, target_m: usize) -> Result<PackedMatrix<B::Ct>> {
    let (n, p) = b.dim();
    if target_m == 0 || p == 0 {
        return Err(Error::precondition("revolver encoding needs target_m > 0 and p > 0"));
    }
    let shape = MatrixShape::new(target_m, n);
    check_fits(be, shape)?;
    let slots: Vec<f64> = (0..shape.len()).map(|k| b[[k % n, (k / n) % p]]).collect();
    let ct = be.enc(&slots)?;
    Ok(PackedMatrix::new(be.retag(ct, shape.tag()), shape, Encoding::Revolver { p }))
}

/// Read the `rows x cols` prefix back as a matrix.
pub fn decode<B: Backend>(be: &B, pm: &PackedMatrix<B::Ct>) -> Array2<f64> {
    let slots = be.dec(&pm.ct);
    let MatrixShape { rows, cols } = pm.shape;
    Array2::from_shape_fn((rows, cols), |(i, j)| slots[i * cols + j])
}

/// Rotation by one slot. On a block that fills the ciphertext this moves
/// every entry one column left with `z[0][0]` wrapping to the last entry.
pub fn incomplete_col_shift<B: Backend>(be: &B, pm: &PackedMatrix<B::Ct>) -> PackedMatrix<B::Ct> {
    pm.with_ct(be.rot(&pm.ct, 1))
}

/// Rotation by one row (`n` slots).
pub fn row_shift<B: Backend>(be: &B, pm: &PackedMatrix<B::Ct>) -> PackedMatrix<B::Ct> {
    pm.with_ct(be.rot(&pm.ct, pm.shape.cols as i64))
}

fn require_pow2(what: &str, v: usize) -> Result<()> {
    if v == 0 || !v.is_power_of_two() {
        return Err(Error::precondition(format!("{what} must be a power of two, got {v}")));
    }
    Ok(())
}

fn log2(v: usize) -> u32 {
    v.trailing_zeros()
}

/// Column sums replicated into every row.
///
/// When the block fills the ciphertext the cyclic cascade of `log2(m)`
/// rotate-by-`n * 2^t`-and-add steps is enough. Otherwise the total is
/// gathered into row 0, isolated with one mask, and spread back down with a
/// second cascade (`2 log2(m)` rotations, one cmul).
pub fn sum_row_vec<B: Backend>(be: &B, pm: &PackedMatrix<B::Ct>) -> Result<PackedMatrix<B::Ct>> {
    let MatrixShape { rows, cols } = pm.shape;
    require_pow2("row count", rows)?;
    let mut acc = pm.ct.clone();
    for t in 0..log2(rows) {
        let step = (cols << t) as i64;
        acc = be.add(&acc, &be.rot(&acc, step))?;
    }
    if pm.shape.len() == be.slots() || rows == 1 {
        return Ok(pm.with_ct(acc));
    }
    let first_row = PlainMask::from_fn(be.slots(), MaskRole::KeepUpper, |s| s < cols);
    acc = be.cmul(&first_row, &acc)?;
    for t in 0..log2(rows) {
        let step = (cols << t) as i64;
        acc = be.add(&acc, &be.rot(&acc, -step))?;
    }
    Ok(pm.with_ct(acc))
}

/// Row sums replicated across every column of their row.
///
/// A left cascade of `log2(n)` rotations leaves the sum of row `i` in slot
/// `i * n`; those slots never read outside their own row. One mask keeps
/// column 0 only, and a right cascade of `log2(n)` rotations replicates it
/// across the row. For `n = 1` only the mask is applied, which keeps the
/// depth cost the same for every width.
pub fn sum_col_vec<B: Backend>(be: &B, pm: &PackedMatrix<B::Ct>) -> Result<PackedMatrix<B::Ct>> {
    let MatrixShape { rows, cols } = pm.shape;
    require_pow2("column count", cols)?;
    let mut acc = pm.ct.clone();
    for t in 0..log2(cols) {
        acc = be.add(&acc, &be.rot(&acc, 1i64 << t))?;
    }
    let lead = PlainMask::from_fn(be.slots(), MaskRole::Filter, |s| s < rows * cols && s % cols == 0);
    acc = be.cmul(&lead, &acc)?;
    for t in 0..log2(cols) {
        acc = be.add(&acc, &be.rot(&acc, -(1i64 << t)))?;
    }
    Ok(pm.with_ct(acc))
}

/// Parse a numeric CSV (one matrix row per line, no header).
pub fn read_matrix_csv(path: &std::path::Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::input(path, e.to_string()))?;
    let mut data = Vec::new();
    let mut cols = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::input(path, e.to_string()))?;
        let row: Vec<f64> = record
            .iter()
            .filter(|field| !field.is_empty())
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::input(path, format!("line {}: not a number: {field:?}", line + 1))
                })
            })
            .collect::<Result<_>>()?;
        if row.is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::input(
                    path,
                    format!("line {}: expected {c} columns, found {}", line + 1, row.len()),
                ))
            }
            _ => {}
        }
        data.extend(row);
    }
    let cols = cols.ok_or_else(|| Error::input(path, "empty matrix"))?;
    Array2::from_shape_vec((data.len() / cols, cols), data).map_err(|e| Error::input(path, e.to_string()))
}
