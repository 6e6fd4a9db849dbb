//! Plaintext reference implementations used to check encrypted results.
//!
//! These are deliberately naive: loops over indices with no packing, no
//! rotations and no masks.

use ndarray::Array2;

use crate::cnn::{ModelWeights, Poly};
use crate::error::{Error, Result};

/// Triple-loop product.
pub fn oracle_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, n) = a.dim();
    let (nb, p) = b.dim();
    if n != nb {
        return Err(Error::shape(format!("cannot multiply {m}x{n} by {nb}x{p}")));
    }
    let mut c = Array2::zeros((m, p));
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..n {
                s += a[[i, t]] * b[[t, j]];
            }
            c[[i, j]] = s;
        }
    }
    Ok(c)
}

/// Valid convolution (cross-correlation, stride 1):
/// `out[i][j] = k0 + sum_{p,q} image[i + p][j + q] * kernel[p][q]`.
pub fn oracle_conv(image: &Array2<f64>, kernel: &Array2<f64>, k0: f64) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    let (k, k2) = kernel.dim();
    if k != k2 || k == 0 || k > h || k > w {
        return Err(Error::shape(format!("{k}x{k2} kernel does not fit a {h}x{w} image")));
    }
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for i in 0..=h - k {
        for j in 0..=w - k {
            let mut s = k0;
            for p in 0..k {
                for q in 0..k {
                    s += image[[i + p, j + q]] * kernel[[p, q]];
                }
            }
            out[[i, j]] = s;
        }
    }
    Ok(out)
}

fn poly(c: &Poly, x: f64) -> f64 {
    c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x
}

/// Plaintext forward pass of the network for one image (`h x w` pixels),
/// with the same polynomial activations and map-major flatten order as the
/// encrypted pipeline. Returns the output scores.
pub fn oracle_forward_one(weights: &ModelWeights, image: &Array2<f64>) -> Result<Vec<f64>> {
    let mut features = Vec::new();
    for kernel in &weights.conv {
        let map = oracle_conv(image, &kernel.weights, kernel.bias)?;
        features.extend(map.iter().map(|&x| poly(&weights.act1, x)));
    }
    if features.len() != weights.fc1_weight.ncols() {
        return Err(Error::shape(format!(
            "flattened feature length {} does not match FC-1 input width {}",
            features.len(),
            weights.fc1_weight.ncols()
        )));
    }
    let hidden: Vec<f64> = (0..weights.fc1_weight.nrows())
        .map(|o| {
            let z = weights.fc1_bias[o]
                + features.iter().enumerate().map(|(t, &x)| weights.fc1_weight[[o, t]] * x).sum::<f64>();
            poly(&weights.act2, z)
        })
        .collect();
    Ok((0..weights.fc2_weight.nrows())
        .map(|o| weights.fc2_bias[o] + hidden.iter().enumerate().map(|(t, &x)| weights.fc2_weight[[o, t]] * x).sum::<f64>())
        .collect())
}

/// [`oracle_forward_one`] over a list of images; row `b` holds image `b`'s
/// scores.
pub fn oracle_forward(weights: &ModelWeights, images: &[Array2<f64>]) -> Result<Array2<f64>> {
    let classes = weights.fc2_weight.nrows();
    let mut out = Array2::zeros((images.len(), classes));
    for (b, img) in images.iter().enumerate() {
        let scores = oracle_forward_one(weights, img)?;
        out.row_mut(b).assign(&ndarray::Array1::from(scores));
    }
    Ok(out)
}
