//! The `packed-he` command line.
//!
//! Exit codes: 0 on success, 1 on any input or validation error, 2 when a
//! `--verify` cross-check disagrees with the plaintext reference.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bench;
use crate::cnn::{self, store, BatchPlan, ModelWeights, Prediction};
use crate::conv::{self, ImageShape, Kernel};
use crate::encode;
use crate::engine::{Backend, EngineParams, OpMeter, SimEngine};
use crate::error::{Error, Result};
use crate::matmul;
use crate::multi_ct;
use crate::oracle;
use crate::serialize;
use crate::virtual_ct::{self, VirtualLayout};

#[derive(Debug, Parser)]
#[command(name = "packed-he", version, about = "Packed-slot homomorphic matrix and CNN evaluation (simulated backend)")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Engine parameters as TOML (slots, logq, logn, delta, delta_c).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the slot count.
    #[arg(long, global = true)]
    pub slots: Option<usize>,
    /// Cross-check results against the plaintext reference.
    #[arg(long, global = true)]
    pub verify: bool,
    /// Write a JSON report here.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack an IDX image file into batch ciphertexts.
    OwnerEncode {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encode only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Encode a CSV weights directory into a model bundle.
    ProviderEncode {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 28)]
        height: usize,
        #[arg(long, default_value_t = 28)]
        width: usize,
    },
    /// Run the encrypted network over every batch and write predictions.
    CloudInfer {
        #[arg(long)]
        batches: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Predictions file, one JSON object per line.
        #[arg(long)]
        out: PathBuf,
        /// Plaintext weights, required by --verify.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Score tolerance for --verify.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Measure operation counts and compare them with the documented costs.
    Bench,
    /// Randomised cross-checks of every primitive against the reference.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        cases: usize,
    },
}

/// Parse `args` and run. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Verification(_)) {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let params = engine_params(&cli.global)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.parallel {
        if n == 0 {
            return Err(Error::Params("--parallel must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Params(e.to_string()))?;
    let g = &cli.global;
    pool.install(|| match &cli.command {
        Command::OwnerEncode { images, out, limit } => owner_encode(g, &params, images, out, *limit),
        Command::ProviderEncode { weights, out, height, width } => {
            provider_encode(g, &params, weights, out, ImageShape::new(*height, *width))
        }
        Command::CloudInfer { batches, model, out, weights, tolerance } => {
            cloud_infer(g, &params, batches, model, out, weights.as_deref(), *tolerance)
        }
        Command::Bench => run_bench(g),
        Command::Verify { seed, cases } => run_verify(g, *seed, *cases),
    })
}

fn engine_params(g: &GlobalOpts) -> Result<EngineParams> {
    let mut params = match &g.config {
        Some(path) => EngineParams::load(path)?,
        None => EngineParams::default(),
    };
    if let Some(slots) = g.slots {
        params.slots = slots;
    }
    params.validate()?;
    Ok(params)
}

fn write_report<T: Serialize>(g: &GlobalOpts, value: &T) -> Result<()> {
    if let Some(path) = &g.report {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn owner_encode(g: &GlobalOpts, params: &EngineParams, images: &Path, out: &Path, limit: Option<usize>) -> Result<()> {
    let mut imgs = cnn::read_idx_images(images)?;
    if let Some(n) = limit {
        imgs.truncate(n);
    }
    let (h, w) = imgs.first().map(Array2::dim).ok_or_else(|| Error::input(images, "no images to encode"))?;
    let plan = BatchPlan::new(params.slots, h, w, imgs.len())?;
    let layout = plan.layout(h, w)?;
    create_dir(out)?;
    let engine = SimEngine::new(*params)?;
    let mut entries = Vec::with_capacity(plan.batches);
    for b in 0..plan.batches {
        let range = plan.range(b);
        let chunk = &imgs[range.clone()];
        let ct = cnn::pack_batch(&engine, chunk, layout)?;
        let file = store::batch_file_name(b);
        let path = out.join(&file);
        serialize::write_ciphertext(&path, &ct)?;
        if g.verify {
            let back = serialize::read_ciphertext(&path)?;
            let rows = virtual_ct::decode_batch(&engine, &back, layout);
            for (i, img) in chunk.iter().enumerate() {
                if rows[i].iter().zip(img.iter()).any(|(a, b)| a != b) {
                    return Err(Error::Verification(format!("{}: image {} did not round-trip", path.display(), range.start + i)));
                }
            }
        }
        entries.push(store::BatchEntry { file, images: chunk.len(), first_index: range.start });
    }
    let manifest = store::BatchManifest {
        slots: params.slots,
        images_per_ct: plan.images_per_ct,
        stride: plan.stride,
        h,
        w,
        total_images: imgs.len(),
        batches: entries,
    };
    store::write_batch_manifest(out, &manifest)?;
    println!(
        "encoded {} images into {} batches of {} (stride {}, {} zero-filled rows)",
        plan.total, plan.batches, plan.images_per_ct, plan.stride, plan.zero_fill
    );
    write_report(g, &plan)
}

fn provider_encode(g: &GlobalOpts, params: &EngineParams, weights: &Path, out: &Path, image: ImageShape) -> Result<()> {
    let w = cnn::load_weights_csv(weights)?;
    w.validate(image).map_err(|e| Error::input(weights, e.to_string()))?;
    let plan = BatchPlan::new(params.slots, image.h, image.w, 0)?;
    let layout = plan.layout(image.h, image.w)?;
    let engine = SimEngine::new(*params)?;
    let model = cnn::encode_model(&engine, &w, layout)?;
    let manifest = store::save_model(out, &model, params.slots)?;
    if g.verify {
        let (back, _) = store::load_model(out)?;
        if back.ciphertext_count() != model.ciphertext_count() || back.fc2.tiles[0].ct != model.fc2.tiles[0].ct {
            return Err(Error::Verification(format!("{}: model bundle did not round-trip", out.display())));
        }
    }
    println!(
        "encoded {} kernels, FC-1 {}x{} tiles, FC-2 {}x{} tiles: {} ciphertexts",
        manifest.kernels,
        manifest.fc1.inner_blocks,
        manifest.fc1.col_blocks,
        manifest.fc2.inner_blocks,
        manifest.fc2.col_blocks,
        manifest.ciphertexts
    );
    write_report(g, &manifest)
}

#[derive(Debug, Serialize)]
struct InferReport {
    batches: usize,
    images: usize,
    pipeline_depth: usize,
    stages: Vec<(String, OpMeter)>,
    total: OpMeter,
}

struct BatchResult {
    predictions: Vec<Prediction>,
    stages: Vec<(String, OpMeter)>,
}

fn cloud_infer(
    g: &GlobalOpts,
    params: &EngineParams,
    batches: &Path,
    model_dir: &Path,
    out: &Path,
    weights: Option<&Path>,
    tolerance: f64,
) -> Result<()> {
    let plain = match (g.verify, weights) {
        (true, Some(dir)) => Some(cnn::load_weights_csv(dir)?),
        (true, None) => return Err(Error::Params("--verify needs --weights".into())),
        (false, _) => None,
    };
    let manifest = store::read_batch_manifest(batches)?;
    let (model, model_manifest) = store::load_model(model_dir)?;
    for (what, slots) in [("batch manifest", manifest.slots), ("model", model_manifest.slots)] {
        if slots != params.slots {
            return Err(Error::Params(format!("{what} was encoded for {slots} slots, engine has {}", params.slots)));
        }
    }
    let layout = manifest.layout()?;
    if layout != model.layout {
        return Err(Error::Params(format!("batch layout {layout:?} does not match model layout {:?}", model.layout)));
    }
    let results: Vec<BatchResult> = manifest
        .batches
        .par_iter()
        .map(|entry| infer_batch(params, batches, entry, &model, layout, plain.as_ref(), tolerance))
        .collect::<Result<_>>()?;

    let mut predictions = Vec::with_capacity(manifest.total_images);
    let mut stages: Vec<(String, OpMeter)> = Vec::new();
    for r in results {
        predictions.extend(r.predictions);
        for (name, meter) in r.stages {
            match stages.iter_mut().find(|(n, _)| *n == name) {
                Some((_, m)) => *m = m.merge(&meter),
                None => stages.push((name, meter)),
            }
        }
    }
    cnn::write_predictions(out, &predictions)?;
    let total: OpMeter = stages.iter().map(|(_, m)| *m).sum();
    println!("{} predictions from {} batches", predictions.len(), manifest.batches.len());
    for (name, m) in &stages {
        println!(
            "  {name:<8} add {:>9} mul {:>7} cmul {:>9} rot {:>9} depth {}",
            m.add_count, m.mul_count, m.cmul_count, m.rot_count, m.max_depth
        );
    }
    if g.verify {
        println!("verified against the plaintext network (tolerance {tolerance:e})");
    }
    write_report(
        g,
        &InferReport {
            batches: manifest.batches.len(),
            images: predictions.len(),
            pipeline_depth: total.max_depth,
            stages,
            total,
        },
    )
}

fn infer_batch(
    params: &EngineParams,
    dir: &Path,
    entry: &store::BatchEntry,
    model: &cnn::EncryptedModel<crate::engine::Ciphertext>,
    layout: VirtualLayout,
    plain: Option<&ModelWeights>,
    tolerance: f64,
) -> Result<BatchResult> {
    let path = dir.join(&entry.file);
    let ct = serialize::read_ciphertext(&path)?;
    serialize::check_slots(&path, std::slice::from_ref(&ct), params.slots)?;
    if entry.images > layout.m {
        return Err(Error::input(&path, format!("manifest lists {} images, capacity is {}", entry.images, layout.m)));
    }
    let engine = SimEngine::new(*params)?;
    let out = cnn::forward(&engine, model, &ct)?;
    let scores = cnn::decode_scores(&engine, &out.scores, &model.fc2);
    let labels = cnn::argmax_decide(&scores);

    if let Some(weights) = plain {
        // Simulator-only check: the batch is decrypted to feed the reference.
        let images: Vec<Array2<f64>> = virtual_ct::decode_batch(&engine, &ct, layout)
            .into_iter()
            .take(entry.images)
            .map(|v| Array2::from_shape_vec((layout.h, layout.w), v).expect("prefix has h*w slots"))
            .collect();
        let expected = oracle::oracle_forward(weights, &images)?;
        for (i, row) in expected.rows().into_iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                let got = scores[[i, j]];
                if (got - want).abs() > tolerance * want.abs().max(1.0) {
                    return Err(Error::Verification(format!(
                        "image {} class {j}: encrypted score {got} vs reference {want}",
                        entry.first_index + i
                    )));
                }
            }
        }
    }

    let predictions = (0..entry.images)
        .map(|i| Prediction { index: entry.first_index + i, label: labels[i], scores: scores.row(i).to_vec() })
        .collect();
    Ok(BatchResult { predictions, stages: out.stages })
}

fn run_bench(g: &GlobalOpts) -> Result<()> {
    let report = bench::run_default()?;
    print!("{}", report.render());
    let flagged: Vec<_> = report.flagged().collect();
    if flagged.is_empty() {
        println!("all measured counts within the documented costs");
    } else {
        for row in &flagged {
            println!("FLAG {} {} step {}: measured {:?} exceeds {:?}", row.algorithm, row.scenario, row.step, row.measured, row.documented);
        }
    }
    write_report(g, &report)
}

#[derive(Debug, Serialize)]
struct CheckResult {
    check: String,
    cases: usize,
    max_error: f64,
    passed: bool,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-9..=9) as f64)
}

/// Runs every primitive on random inputs and compares with the reference.
pub fn self_check(seed: u64, cases: usize) -> Result<Vec<(String, usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [1, 2, 4, 8];
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (m, n, p) = (dims[rng.gen_range(0..4)], dims[rng.gen_range(0..4)], dims[rng.gen_range(0..4)]);
        let a = random_matrix(&mut rng, m, n);
        let b = random_matrix(&mut rng, n, p);
        let want = oracle::oracle_matmul(&a, &b)?;
        let e = SimEngine::with_slots(256)?;
        let (ca, cb, _) = matmul::prepare_operands(&e, &a, &b)?;
        let got = matmul::decode_block(&e, &matmul::matmul(&e, &ca, &cb)?, m, p);
        worst = worst.max(max_abs_diff(&got, &want));
        let left = multi_ct::encode_left(&e, &a, p)?;
        let right = multi_ct::encode_right(&e, &b, m)?;
        let outer = encode::decode(&e, &multi_ct::matmul_outer(&e, &left, &right)?);
        worst = worst.max(max_abs_diff(&outer, &want));
    }
    out.push(("matmul".to_string(), cases, worst));

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = [2, 3][rng.gen_range(0..2)];
        let (h, w) = (rng.gen_range(2 * k - 1..=10), rng.gen_range(2 * k - 1..=10));
        let image = random_matrix(&mut rng, h, w);
        let kernel = Kernel::new(random_matrix(&mut rng, k, k), rng.gen_range(-3..=3) as f64)?;
        let want = oracle::oracle_conv(&image, &kernel.weights, kernel.bias)?;
        let e = SimEngine::with_slots(128)?;
        let span = conv::kernel_spanner(&e, &kernel, ImageShape::new(h, w))?;
        let ct = conv::conv(&e, &conv::encode_image(&e, &image)?, &span)?;
        worst = worst.max(max_abs_diff(&conv::decode_conv(&e, &ct, ImageShape::new(h, w), k)?, &want));
        let cols = multi_ct::encode_image_columns(&e, std::slice::from_ref(&image))?;
        let res = multi_ct::decode_image_columns(&e, &multi_ct::conv_columns(&e, &cols, &kernel)?);
        worst = worst.max(max_abs_diff(&res[0], &want));
    }
    out.push(("convolution".to_string(), cases, worst));

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let layout = VirtualLayout::new(4, 16, h, w)?;
        let e = SimEngine::with_slots(64)?;
        let imgs: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut rng, h, w)).collect();
        let r = rng.gen_range(0..h * w);
        let ct = virtual_ct::vrot(&e, &virtual_ct::encode_batch(&e, &imgs, layout)?, layout, r)?;
        let slots = e.dec(&ct);
        for (b, img) in imgs.iter().enumerate() {
            let flat: Vec<f64> = img.iter().copied().collect();
            for s in 0..layout.f {
                let want = if s < h * w { flat[(s + r) % (h * w)] } else { 0.0 };
                worst = worst.max((slots[b * layout.f + s] - want).abs());
            }
        }
    }
    out.push(("virtual rotation".to_string(), cases, worst));
    Ok(out)
}

fn run_verify(g: &GlobalOpts, seed: u64, cases: usize) -> Result<()> {
    let results: Vec<CheckResult> = self_check(seed, cases)?
        .into_iter()
        .map(|(check, cases, max_error)| CheckResult { passed: max_error <= 1e-9, check, cases, max_error })
        .collect();
    for r in &results {
        println!("{} {:<18} {} cases, max error {:e}", if r.passed { "PASS" } else { "FAIL" }, r.check, r.cases, r.max_error);
    }
    write_report(g, &results)?;
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(Error::Verification(format!("{} exceeded tolerance: {:e}", r.check, r.max_error))),
        None => Ok(()),
    }
}
