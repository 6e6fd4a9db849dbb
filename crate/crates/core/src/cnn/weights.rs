use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{ImageShape, Kernel};
use crate::encode::read_matrix_csv;
use crate::error::{Error, Result};

/// Cubic polynomial coefficients, constant term first.
pub type Poly = [f64; 4];

/// First activation of the reference MNIST network.
pub const ACT1: Poly = [-0.00015120704, 0.4610149, 2.0225089, -1.4511951];
/// Second activation of the reference MNIST network.
pub const ACT2: Poly = [-1.5650465, -0.9943767, 1.6794522, 0.5350255];

/// Plaintext network parameters. Fully connected weights are stored
/// `outputs x inputs`; FC-1 inputs follow the map-major flatten order
/// (map, then row, then column).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub conv: Vec<Kernel>,
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: Array1<f64>,
    pub act1: Poly,
    pub act2: Poly,
}

impl ModelWeights {
    pub fn kernel_size(&self) -> usize {
        self.conv.first().map_or(0, Kernel::size)
    }

    pub fn hidden(&self) -> usize {
        self.fc1_weight.nrows()
    }

    pub fn classes(&self) -> usize {
        self.fc2_weight.nrows()
    }

    /// Check that every layer fits the next one for `image`-sized inputs.
    pub fn validate(&self, image: ImageShape) -> Result<()> {
        let k = self.kernel_size();
        if self.conv.is_empty() {
            return Err(Error::shape("model has no convolution kernels"));
        }
        if self.conv.iter().any(|kern| kern.size() != k) {
            return Err(Error::shape("convolution kernels differ in size"));
        }
        let out = image.output(k)?;
        let features = self.conv.len() * out.len();
        if self.fc1_weight.ncols() != features {
            return Err(Error::shape(format!(
                "FC-1 expects {} inputs but {} kernels on {}x{} images give {features}",
                self.fc1_weight.ncols(),
                self.conv.len(),
                image.h,
                image.w
            )));
        }
        if self.fc1_bias.len() != self.hidden() {
            return Err(Error::shape(format!("FC-1 has {} outputs but {} biases", self.hidden(), self.fc1_bias.len())));
        }
        if self.fc2_weight.ncols() != self.hidden() {
            return Err(Error::shape(format!(
                "FC-2 expects {} inputs, FC-1 produces {}",
                self.fc2_weight.ncols(),
                self.hidden()
            )));
        }
        if self.fc2_bias.len() != self.classes() {
            return Err(Error::shape(format!("FC-2 has {} outputs but {} biases", self.classes(), self.fc2_bias.len())));
        }
        Ok(())
    }

    /// Random weights of the given shape, scaled so activations stay near
    /// the unit interval. Deterministic in `seed`.
    pub fn random(seed: u64, image: ImageShape, kernels: usize, k: usize, hidden: usize, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = image.output(k)?;
        let features = kernels * out.len();
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
        };
        let conv = (0..kernels)
            .map(|_| {
                let w = uniform(k, k, 1.0 / k as f64);
                let b = uniform(1, 1, 0.1)[[0, 0]];
                Kernel::new(w, b)
            })
            .collect::<Result<_>>()?;
        let fc1_weight = uniform(hidden, features, 1.0 / (features as f64).sqrt());
        let fc1_bias = uniform(1, hidden, 0.1).row(0).to_owned();
        let fc2_weight = uniform(classes, hidden, 1.0 / (hidden as f64).sqrt());
        let fc2_bias = uniform(1, classes, 0.1).row(0).to_owned();
        Ok(ModelWeights { conv, fc1_weight, fc1_bias, fc2_weight, fc2_bias, act1: ACT1, act2: ACT2 })
    }

    /// The reference network shape: four 3x3 kernels on 28x28 images, 64
    /// hidden units, 10 classes.
    pub fn random_mnist(seed: u64) -> Self {
        Self::random(seed, ImageShape::new(28, 28), 4, 3, 64, 10).expect("reference shape is valid")
    }
}

fn read_vector(path: &Path) -> Result<Array1<f64>> {
    let m = read_matrix_csv(path)?;
    Ok(Array1::from_iter(m.iter().copied()))
}

fn read_poly(path: &Path) -> Result<Poly> {
    let v = read_vector(path)?;
    if v.len() != 4 {
        return Err(Error::input(path, format!("expected 4 coefficients, found {}", v.len())));
    }
    Ok([v[0], v[1], v[2], v[3]])
}

fn require(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::input(&path, "file not found"));
    }
    Ok(path)
}

/// Load a weights directory: `conv_k0.csv`, `conv_k1.csv`, ... (as many as
/// are present, at least one), `conv_bias.csv`, `fc1_weight.csv`,
/// `fc1_bias.csv`, `fc2_weight.csv`, `fc2_bias.csv`, `act1.csv`, `act2.csv`.
pub fn load_weights_csv(dir: &Path) -> Result<ModelWeights> {
    let mut kernels = Vec::new();
    while dir.join(format!("conv_k{}.csv", kernels.len())).is_file() {
        let path = dir.join(format!("conv_k{}.csv", kernels.len()));
        let w = read_matrix_csv(&path)?;
        if w.nrows() != w.ncols() {
            return Err(Error::input(&path, format!("kernel must be square, got {}x{}", w.nrows(), w.ncols())));
        }
        kernels.push(w);
    }
    if kernels.is_empty() {
        return Err(Error::input(dir.join("conv_k0.csv"), "file not found"));
    }
    let bias_path = require(dir, "conv_bias.csv")?;
    let conv_bias = read_vector(&bias_path)?;
    if conv_bias.len() != kernels.len() {
        return Err(Error::input(
            &bias_path,
            format!("{} kernels but {} biases", kernels.len(), conv_bias.len()),
        ));
    }
    let conv = kernels
        .into_iter()
        .zip(conv_bias.iter())
        .map(|(w, &b)| Kernel::new(w, b))
        .collect::<Result<_>>()?;
    let fc1_path = require(dir, "fc1_weight.csv")?;
    let fc1_weight = read_matrix_csv(&fc1_path)?;
    let fc1_bias_path = require(dir, "fc1_bias.csv")?;
    let fc1_bias = read_vector(&fc1_bias_path)?;
    if fc1_bias.len() != fc1_weight.nrows() {
        return Err(Error::input(&fc1_bias_path, format!("expected {} values, found {}", fc1_weight.nrows(), fc1_bias.len())));
    }
    let fc2_path = require(dir, "fc2_weight.csv")?;
    let fc2_weight = read_matrix_csv(&fc2_path)?;
    if fc2_weight.ncols() != fc1_weight.nrows() {
        return Err(Error::input(
            &fc2_path,
            format!("expected {} columns to match FC-1 outputs, found {}", fc1_weight.nrows(), fc2_weight.ncols()),
        ));
    }
    let fc2_bias_path = require(dir, "fc2_bias.csv")?;
    let fc2_bias = read_vector(&fc2_bias_path)?;
    if fc2_bias.len() != fc2_weight.nrows() {
        return Err(Error::input(&fc2_bias_path, format!("expected {} values, found {}", fc2_weight.nrows(), fc2_bias.len())));
    }
    let act1 = read_poly(&require(dir, "act1.csv")?)?;
    let act2 = read_poly(&require(dir, "act2.csv")?)?;
    Ok(ModelWeights { conv, fc1_weight, fc1_bias, fc2_weight, fc2_bias, act1, act2 })
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = Vec<f64>> + 'a) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `weights` in the layout [`load_weights_csv`] reads. Values are
/// printed with full round-trip precision.
pub fn save_weights_csv(weights: &ModelWeights, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, kernel) in weights.conv.iter().enumerate() {
        write_rows(&dir.join(format!("conv_k{i}.csv")), kernel.weights.rows().into_iter().map(|r| r.to_vec()))?;
    }
    write_rows(&dir.join("conv_bias.csv"), std::iter::once(weights.conv.iter().map(|k| k.bias).collect()))?;
    write_rows(&dir.join("fc1_weight.csv"), weights.fc1_weight.rows().into_iter().map(|r| r.to_vec()))?;
    write_rows(&dir.join("fc1_bias.csv"), std::iter::once(weights.fc1_bias.to_vec()))?;
    write_rows(&dir.join("fc2_weight.csv"), weights.fc2_weight.rows().into_iter().map(|r| r.to_vec()))?;
    write_rows(&dir.join("fc2_bias.csv"), std::iter::once(weights.fc2_bias.to_vec()))?;
    write_rows(&dir.join("act1.csv"), std::iter::once(weights.act1.to_vec()))?;
    write_rows(&dir.join("act2.csv"), std::iter::once(weights.act2.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shape_validates() {
        let w = ModelWeights::random_mnist(1);
        assert_eq!(w.fc1_weight.dim(), (64, 2704));
        assert_eq!(w.fc2_weight.dim(), (10, 64));
        w.validate(ImageShape::new(28, 28)).unwrap();
        assert!(w.validate(ImageShape::new(27, 28)).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::random(7, ImageShape::new(6, 6), 2, 3, 4, 3).unwrap();
        save_weights_csv(&w, dir.path()).unwrap();
        assert_eq!(load_weights_csv(dir.path()).unwrap(), w);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::random(7, ImageShape::new(6, 6), 2, 3, 4, 3).unwrap();
        save_weights_csv(&w, dir.path()).unwrap();
        fs::remove_file(dir.path().join("fc2_bias.csv")).unwrap();
        let err = load_weights_csv(dir.path()).unwrap_err().to_string();
        assert!(err.contains("fc2_bias.csv"), "{err}");
    }

    #[test]
    fn act2_at_one() {
        let s: f64 = ACT2.iter().sum();
        assert!((s - -0.3449455).abs() < 1e-12);
    }
}
