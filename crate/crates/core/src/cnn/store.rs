//! Directory layouts for packed batches and encoded models.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnn::pipeline::{EncryptedModel, FcLayer};
use crate::cnn::weights::Poly;
use crate::conv::{ImageShape, KernelSpan};
use crate::encode::{Encoding, MatrixShape, PackedMatrix};
use crate::engine::Ciphertext;
use crate::error::{Error, Result};
use crate::matmul::Tiling;
use crate::serialize;
use crate::virtual_ct::VirtualLayout;

pub const BATCH_MANIFEST: &str = "manifest.json";
pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_BUNDLE: &str = "model.SIMULATED.bundle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub file: String,
    /// Real images in this batch; the remaining rows are zero padding.
    pub images: usize,
    /// Dataset index of the batch's first image.
    pub first_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub slots: usize,
    pub images_per_ct: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub total_images: usize,
    pub batches: Vec<BatchEntry>,
}

impl BatchManifest {
    pub fn layout(&self) -> Result<VirtualLayout> {
        VirtualLayout::new(self.images_per_ct, self.stride, self.h, self.w)
    }
}

pub fn batch_file_name(index: usize) -> String {
    format!("batch_{index:05}.SIMULATED.ct")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::input(path, e.to_string()))
}

pub fn write_batch_manifest(dir: &Path, manifest: &BatchManifest) -> Result<()> {
    write_json(&dir.join(BATCH_MANIFEST), manifest)
}

pub fn read_batch_manifest(dir: &Path) -> Result<BatchManifest> {
    read_json(&dir.join(BATCH_MANIFEST))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcManifest {
    pub inner_blocks: usize,
    pub col_blocks: usize,
    pub in_block: usize,
    pub p: usize,
    pub outputs: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub slots: usize,
    pub images_per_ct: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kernels: usize,
    pub fc1: FcManifest,
    pub fc2: FcManifest,
    pub act1: Poly,
    pub act2: Poly,
    pub ciphertexts: usize,
}

impl ModelManifest {
    pub fn layout(&self) -> Result<VirtualLayout> {
        VirtualLayout::new(self.images_per_ct, self.stride, self.h, self.w)
    }
}

fn fc_manifest(layer: &FcLayer<Ciphertext>) -> Result<FcManifest> {
    let first = layer.tiles.first().ok_or_else(|| Error::shape("layer has no tiles"))?;
    Ok(FcManifest {
        inner_blocks: layer.tiling.inner_blocks,
        col_blocks: layer.tiling.col_blocks,
        in_block: layer.in_block,
        p: layer.p,
        outputs: layer.outputs,
        tile_rows: first.shape.rows,
        tile_cols: first.shape.cols,
    })
}

/// Write the model as one bundle (spans and bias per kernel, then each
/// layer's tiles and biases) plus a JSON description.
pub fn save_model(dir: &Path, model: &EncryptedModel<Ciphertext>, slots: usize) -> Result<ModelManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cts = Vec::with_capacity(model.ciphertext_count());
    for span in &model.spans {
        cts.extend(span.spans.iter().cloned());
        cts.push(span.bias.clone());
    }
    for layer in [&model.fc1, &model.fc2] {
        cts.extend(layer.tiles.iter().map(|t| t.ct.clone()));
        cts.extend(layer.bias.iter().cloned());
    }
    let layout = model.layout;
    let manifest = ModelManifest {
        slots,
        images_per_ct: layout.m,
        stride: layout.f,
        h: layout.h,
        w: layout.w,
        k: model.kernel_size(),
        kernels: model.spans.len(),
        fc1: fc_manifest(&model.fc1)?,
        fc2: fc_manifest(&model.fc2)?,
        act1: model.act1,
        act2: model.act2,
        ciphertexts: cts.len(),
    };
    serialize::write_bundle(&dir.join(MODEL_BUNDLE), &cts)?;
    write_json(&dir.join(MODEL_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<(EncryptedModel<Ciphertext>, ModelManifest)> {
    let manifest: ModelManifest = read_json(&dir.join(MODEL_MANIFEST))?;
    let bundle_path: PathBuf = dir.join(MODEL_BUNDLE);
    let cts = serialize::read_bundle(&bundle_path)?;
    serialize::check_slots(&bundle_path, &cts, manifest.slots)?;
    if cts.len() != manifest.ciphertexts {
        return Err(Error::input(
            &bundle_path,
            format!("manifest lists {} ciphertexts, bundle holds {}", manifest.ciphertexts, cts.len()),
        ));
    }
    let layout = manifest.layout()?;
    let k = manifest.k;
    let expected = manifest.kernels * (k * k + 1)
        + (manifest.fc1.inner_blocks + 1) * manifest.fc1.col_blocks
        + (manifest.fc2.inner_blocks + 1) * manifest.fc2.col_blocks;
    if expected != cts.len() {
        return Err(Error::input(&bundle_path, format!("layout implies {expected} ciphertexts, bundle holds {}", cts.len())));
    }
    let mut it = cts.into_iter();
    let mut take = |n: usize| -> Vec<Ciphertext> { it.by_ref().take(n).collect() };
    let shape = ImageShape::new(manifest.h, manifest.w);
    let spans = (0..manifest.kernels)
        .map(|_| {
            let mut v = take(k * k + 1);
            let bias = v.pop().expect("k*k+1 > 0");
            KernelSpan { spans: v, bias, shape, k }
        })
        .collect();
    let mut layer = |fc: &FcManifest| FcLayer {
        tiles: take(fc.inner_blocks * fc.col_blocks)
            .into_iter()
            .map(|ct| PackedMatrix::new(ct, MatrixShape::new(fc.tile_rows, fc.tile_cols), Encoding::Revolver { p: fc.p }))
            .collect(),
        bias: take(fc.col_blocks),
        tiling: Tiling::new(1, fc.inner_blocks, fc.col_blocks),
        in_block: fc.in_block,
        p: fc.p,
        outputs: fc.outputs,
    };
    let fc1 = layer(&manifest.fc1);
    let fc2 = layer(&manifest.fc2);
    let model = EncryptedModel { layout, spans, fc1, fc2, act1: manifest.act1, act2: manifest.act2 };
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{encode_model, ModelWeights};
    use crate::engine::{Backend, SimEngine};

    #[test]
    fn model_round_trip() {
        let e = SimEngine::with_slots(256).unwrap();
        let w = ModelWeights::random(3, ImageShape::new(6, 6), 2, 3, 8, 3).unwrap();
        let layout = VirtualLayout::new(4, 64, 6, 6).unwrap();
        let model = encode_model(&e, &w, layout).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_model(dir.path(), &model, e.slots()).unwrap();
        assert_eq!(manifest.ciphertexts, model.ciphertext_count());
        let (back, _) = load_model(dir.path()).unwrap();
        assert_eq!(back.layout, model.layout);
        assert_eq!(back.fc1.tiling, model.fc1.tiling);
        assert_eq!(back.spans[1].bias, model.spans[1].bias);
        assert_eq!(back.fc2.tiles[1].ct, model.fc2.tiles[1].ct);
        assert_eq!(back.fc2.tiles[1].encoding, model.fc2.tiles[1].encoding);
    }
}
