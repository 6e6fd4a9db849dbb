//! Encrypted inference for the 28x28 network on one batch of 32 images,
//! compared with the plaintext forward pass.

use ndarray::Array2;
use packed_he::cnn::{self, BatchPlan, ModelWeights, PIPELINE_DEPTH};
use packed_he::oracle::oracle_forward;
use packed_he::SimEngine;
use rand::{Rng, SeedableRng};

fn main() -> packed_he::Result<()> {
    let weights = ModelWeights::random_mnist(42);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Array2<f64>> =
        (0..32).map(|_| Array2::from_shape_fn((28, 28), |_| rng.gen_range(0.0..1.0))).collect();

    let e = SimEngine::with_slots(32768)?;
    let plan = BatchPlan::new(32768, 28, 28, images.len())?;
    let layout = plan.layout(28, 28)?;
    let model = cnn::encode_model(&e, &weights, layout)?;
    println!("model encoded as {} ciphertexts", model.ciphertext_count());

    let batch = cnn::pack_batch(&e, &images, layout)?;
    let out = cnn::forward(&e, &model, &batch)?;
    for (stage, m) in &out.stages {
        println!("{stage:<8} mul {:>4} cmul {:>5} rot {:>6} add {:>6} depth {}", m.mul_count, m.cmul_count, m.rot_count, m.add_count, m.max_depth);
    }
    let scores = cnn::decode_scores(&e, &out.scores, &model.fc2);
    let reference = oracle_forward(&weights, &images)?;
    let err = scores.iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let labels = cnn::argmax_decide(&scores);
    assert_eq!(labels, cnn::argmax_decide(&reference));
    println!("labels {labels:?}");
    println!("max score error {err:.2e}, documented depth {PIPELINE_DEPTH}");
    Ok(())
}
