use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::weights::{ModelWeights, Poly};
use crate::conv::KernelSpan;
use crate::encode::{self, Encoding, MatrixShape, PackedMatrix};
use crate::engine::{Backend, OpMeter, PlainMask};
use crate::error::{Error, Result};
use crate::matmul::{self, Tiling};
use crate::virtual_ct::{self, VirtualLayout};

/// Multiplicative depth of [`forward`] on fresh inputs: convolution 3
/// (product, window mask, offset filter), activation 2, compaction 1, each
/// fully connected layer 3 (product, row-sum mask, result filter) and the
/// second activation 2.
pub const PIPELINE_DEPTH: usize = 3 + 2 + 1 + 3 + 2 + 3;

/// One fully connected layer, encoded for the tiled product. Inner tile `t`
/// covers `in_block` consecutive inputs; output tile `c` covers `p`
/// consecutive outputs.
#[derive(Debug, Clone)]
pub struct FcLayer<C> {
    pub tiles: Vec<PackedMatrix<C>>,
    pub bias: Vec<C>,
    pub tiling: Tiling,
    pub in_block: usize,
    pub p: usize,
    pub outputs: usize,
}

/// Everything the evaluator needs from the model provider.
#[derive(Debug, Clone)]
pub struct EncryptedModel<C> {
    pub layout: VirtualLayout,
    pub spans: Vec<KernelSpan<C>>,
    pub fc1: FcLayer<C>,
    pub fc2: FcLayer<C>,
    pub act1: Poly,
    pub act2: Poly,
}

impl<C> EncryptedModel<C> {
    pub fn kernel_size(&self) -> usize {
        self.spans.first().map_or(0, |s| s.k)
    }

    /// Number of ciphertexts the provider ships.
    pub fn ciphertext_count(&self) -> usize {
        self.spans.iter().map(|s| s.spans.len() + 1).sum::<usize>()
            + self.fc1.tiles.len()
            + self.fc1.bias.len()
            + self.fc2.tiles.len()
            + self.fc2.bias.len()
    }
}

fn encode_fc<B: Backend>(
    be: &B,
    weight: &Array2<f64>,
    bias: &[f64],
    in_block: usize,
    inner_blocks: usize,
    p: usize,
    layout: VirtualLayout,
) -> Result<FcLayer<B::Ct>> {
    let (outputs, inputs) = weight.dim();
    let (m, f) = (layout.m, layout.f);
    if inputs > in_block * inner_blocks || in_block > f {
        return Err(Error::shape(format!(
            "{inputs} inputs do not fit {inner_blocks} tiles of {in_block} (row width {f})"
        )));
    }
    let col_blocks = outputs.div_ceil(p);
    let mut tiles = Vec::with_capacity(inner_blocks * col_blocks);
    for t in 0..inner_blocks {
        for c in 0..col_blocks {
            let b = Array2::from_shape_fn((f, p), |(r, j)| {
                let (row, col) = (t * in_block + r, c * p + j);
                if r < in_block && row < inputs && col < outputs {
                    weight[[col, row]]
                } else {
                    0.0
                }
            });
            tiles.push(encode::encode_tau_b(be, &b, m.max(p))?);
        }
    }
    let bias = (0..col_blocks)
        .map(|c| {
            let init = Array2::from_shape_fn((m, p), |(_, j)| bias.get(c * p + j).copied().unwrap_or(0.0));
            matmul::encode_accumulator(be, &init, f)
        })
        .collect::<Result<_>>()?;
    Ok(FcLayer { tiles, bias, tiling: Tiling::new(1, inner_blocks, col_blocks), in_block, p, outputs })
}

/// Model-provider side: spread every kernel over the batch layout and
/// revolver-encode both fully connected layers.
///
/// The layout must fill the ciphertext (`m * f = slots`) so every product
/// takes the single-rotation shifter.
pub fn encode_model<B: Backend>(be: &B, weights: &ModelWeights, layout: VirtualLayout) -> Result<EncryptedModel<B::Ct>> {
    weights.validate(layout.image())?;
    if layout.slots_used() != be.slots() {
        return Err(Error::precondition(format!(
            "batch layout uses {} of {} slots; it must fill the ciphertext",
            layout.slots_used(),
            be.slots()
        )));
    }
    let k = weights.kernel_size();
    let out = layout.image().output(k)?;
    let m = layout.m;
    let p1 = m.min(weights.hidden().next_power_of_two());
    let p2 = m.min(weights.classes().next_power_of_two());
    if p1 > layout.f || !m.is_multiple_of(p1) || !m.is_multiple_of(p2) {
        return Err(Error::precondition(format!(
            "{m} images per ciphertext cannot host output tiles of {p1} and {p2}"
        )));
    }
    let spans = weights
        .conv
        .par_iter()
        .map(|kernel| virtual_ct::batched_kernel_spanner(be, kernel, layout))
        .collect::<Result<_>>()?;
    let fc1 = encode_fc(be, &weights.fc1_weight, weights.fc1_bias.as_slice().expect("contiguous"), out.len(), weights.conv.len(), p1, layout)?;
    let fc2 = encode_fc(
        be,
        &weights.fc2_weight,
        weights.fc2_bias.as_slice().expect("contiguous"),
        p1,
        fc1.tiling.col_blocks,
        p2,
        layout,
    )?;
    Ok(EncryptedModel { layout, spans, fc1, fc2, act1: weights.act1, act2: weights.act2 })
}

/// `c0 + c1 x + c2 x^2 + c3 x^3` slot-wise in two multiplicative levels:
/// `x^2 * (c3 x + c2) + c1 x + c0`. Two products, two constant
/// multiplications. Constants are added in every slot.
pub fn poly_activation<B: Backend>(be: &B, ct: &B::Ct, coeffs: &Poly) -> Result<B::Ct> {
    let n = be.slots();
    let [c0, c1, c2, c3] = *coeffs;
    let square = be.mul(ct, ct)?;
    let c3x = be.cmul(&PlainMask::constant(vec![c3; n]), ct)?;
    let t = be.add(&c3x, &be.enc(&vec![c2; n])?)?;
    let high = be.mul(&square, &t)?;
    let c1x = be.cmul(&PlainMask::constant(vec![c1; n]), ct)?;
    let low = be.add(&c1x, &be.enc(&vec![c0; n])?)?;
    be.add(&high, &low)
}

/// One feature map per kernel, each a batched convolution of the input.
pub fn conv_layer<B: Backend>(
    be: &B,
    ct: &B::Ct,
    layout: VirtualLayout,
    spans: &[KernelSpan<B::Ct>],
) -> Result<Vec<B::Ct>> {
    spans.par_iter().map(|span| virtual_ct::batched_conv(be, ct, layout, span)).collect()
}

/// Compact each feature map so its valid block fills the first
/// `(h-k+1)(w-k+1)` slots of every image row. Map `t` becomes inner tile
/// `t` of the first fully connected layer (map-major flatten).
pub fn flatten_maps<B: Backend>(
    be: &B,
    maps: &[B::Ct],
    layout: VirtualLayout,
    k: usize,
) -> Result<Vec<PackedMatrix<B::Ct>>> {
    let out = layout.image().output(k)?;
    maps.par_iter()
        .map(|map| {
            let (ct, _) = virtual_ct::reform(be, map, layout, out.h, out.w)?;
            Ok(PackedMatrix::new(ct, MatrixShape::new(layout.m, layout.f), Encoding::RowMajor))
        })
        .collect()
}

/// `X * W^T + b` over tiled inputs. Output tile `c` holds outputs
/// `[c p, (c + 1) p)` in its first `p` columns.
pub fn fc_layer<B: Backend>(
    be: &B,
    inputs: &[PackedMatrix<B::Ct>],
    layer: &FcLayer<B::Ct>,
) -> Result<Vec<PackedMatrix<B::Ct>>> {
    matmul::matmul_tiled(be, inputs, &layer.tiles, layer.tiling, Some(&layer.bias))
}

/// Result of one encrypted forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<C> {
    /// Final score tiles of the second fully connected layer.
    pub scores: Vec<PackedMatrix<C>>,
    /// Operation counts per stage, in pipeline order.
    pub stages: Vec<(String, OpMeter)>,
}

/// Convolution, activation, flatten, FC-1, activation, FC-2 on one packed
/// batch.
pub fn forward<B: Backend>(be: &B, model: &EncryptedModel<B::Ct>, batch: &B::Ct) -> Result<ForwardOutput<B::Ct>> {
    let mut stages = Vec::new();
    let mut mark = be.meter_snapshot();
    let mut stage = |name: &str, be: &B| {
        let now = be.meter_snapshot();
        stages.push((name.to_string(), now.since(&mark)));
        mark = now;
    };
    let layout = model.layout;
    let maps = conv_layer(be, batch, layout, &model.spans)?;
    stage("conv", be);
    let maps: Vec<B::Ct> = maps.par_iter().map(|m| poly_activation(be, m, &model.act1)).collect::<Result<_>>()?;
    stage("act1", be);
    let flat = flatten_maps(be, &maps, layout, model.kernel_size())?;
    stage("flatten", be);
    let hidden = fc_layer(be, &flat, &model.fc1)?;
    stage("fc1", be);
    let hidden: Vec<PackedMatrix<B::Ct>> = hidden
        .par_iter()
        .map(|h| Ok(PackedMatrix::new(poly_activation(be, &h.ct, &model.act2)?, h.shape, h.encoding)))
        .collect::<Result<_>>()?;
    stage("act2", be);
    let scores = fc_layer(be, &hidden, &model.fc2)?;
    stage("fc2", be);
    Ok(ForwardOutput { scores, stages })
}

/// `m x outputs` score matrix from the final tiles.
pub fn decode_scores<B: Backend>(be: &B, scores: &[PackedMatrix<B::Ct>], layer: &FcLayer<B::Ct>) -> Array2<f64> {
    let rows = scores.first().map_or(0, |s| s.shape.rows);
    let mut out = Array2::zeros((rows, layer.outputs));
    for (c, tile) in scores.iter().enumerate() {
        let block = matmul::decode_block(be, tile, rows, layer.p);
        for j in 0..layer.p {
            let col = c * layer.p + j;
            if col < layer.outputs {
                out.column_mut(col).assign(&block.column(j));
            }
        }
    }
    out
}

/// Index of the largest score per row; ties go to the lowest index.
pub fn argmax_decide(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub label: usize,
    pub scores: Vec<f64>,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in predictions {
        let line = serde_json::to_string(p).expect("prediction serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::input(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}
