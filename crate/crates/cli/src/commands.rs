//! `rem eval`, `rem convert` and `rem synth`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use rem_core::checkpoint::Checkpoint;
use rem_core::data::{evaluation_matrix, read_idx_images, stochastic_binarize, subset, to_text, DataMode, Dataset};
use rem_core::evaluation::{collapse_diagnostic, estimate_log_likelihood, EvalReport, LikelihoodEstimate};
use rem_core::model::synthesize;
use rem_core::rng::{stream_rng, Stream};

use crate::datasets::{data_root, load_split, spec_for};
use crate::{CliError, ConvertArgs, EvalArgs, SynthArgs};

/// Writes `eval-<split>-k<K>-seed<seed>.json` and the per-point NLL file next
/// to it; returns both file names.
pub fn write_eval_report(
    dir: &Path,
    mut report: EvalReport,
    est: &LikelihoodEstimate,
) -> Result<(String, String), CliError> {
    let stem = format!("eval-{}-k{}-seed{}", report.split, report.k, report.seed);
    let points_name = format!("{stem}.nll.txt");
    let json_name = format!("{stem}.json");
    let points: String = est.per_point.iter().map(|v| format!("{}\n", -v)).collect();
    fs::write(dir.join(&points_name), points)?;
    report.nll_per_point_path = points_name.clone();
    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    fs::write(dir.join(&json_name), text + "\n")?;
    Ok((json_name, points_name))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(CliError::runtime)?;
    let cfg = &ckpt.config;
    let dataset = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let spec = spec_for(&dataset, &data_root(args.data_dir.as_deref()))?;
    let mut split: Dataset = load_split(&spec, &args.split)?;
    if args.split == "train" {
        if let Some(n) = cfg.subset {
            split = subset(&split, n, cfg.seed).map_err(CliError::usage)?;
        }
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let k = args.eval_k.unwrap_or(cfg.eval_k);
    if k == 0 {
        return Err(CliError::Usage("--eval-k must be at least 1".into()));
    }
    if let Some(n) = args.subset {
        split = subset(&split, n, seed).map_err(CliError::usage)?;
    }
    if split.dims() != ckpt.model.arch.data_dim {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {} columns, {dataset} has {}",
            ckpt.model.arch.data_dim,
            split.dims()
        )));
    }
    let x = evaluation_matrix(&split, seed);
    let workers = args.workers.unwrap_or(cfg.workers);
    let est = estimate_log_likelihood(&ckpt.model, &x, k, seed, workers).map_err(CliError::runtime)?;
    let kl = collapse_diagnostic(&ckpt.model, &x).map_err(CliError::runtime)?;
    let report = EvalReport {
        method: cfg.method.to_string(),
        dataset,
        split: args.split.clone(),
        k,
        seed,
        nll_mean: est.nll(),
        nll_per_point_path: String::new(),
        kl_to_prior: kl,
        degenerate_count: est.degenerate,
    };
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| ".".into()),
    };
    fs::create_dir_all(&dir)?;
    let (json_name, _) = write_eval_report(&dir, report.clone(), &est)?;
    println!(
        "{} {} split={} K={} seed={} nll={:.4} kl_to_prior={:.4} degenerate={} -> {}",
        report.method,
        report.dataset,
        report.split,
        k,
        seed,
        report.nll_mean,
        kl,
        est.degenerate,
        dir.join(json_name).display()
    );
    Ok(())
}

pub fn convert(args: ConvertArgs) -> Result<(), CliError> {
    let mut images = read_idx_images(&args.images).map_err(CliError::runtime)?;
    if let Some(n) = args.limit {
        if n < images.rows() {
            images = images.gather_rows(&(0..n).collect::<Vec<_>>());
        }
    }
    let (data, mode) = match args.binarize_seed {
        Some(seed) => (
            stochastic_binarize(&images, &mut stream_rng(seed, Stream::Binarize, 0)),
            DataMode::Binary,
        ),
        None => (images, DataMode::Gray),
    };
    let ds = Dataset::new(data, mode, args.images.display().to_string()).map_err(CliError::runtime)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.output, ds.to_text())?;
    let mut sidecar = args.output.clone().into_os_string();
    sidecar.push(".json");
    let manifest = serde_json::to_string_pretty(&ds.manifest()).map_err(CliError::runtime)?;
    fs::write(&sidecar, manifest + "\n")?;
    println!("{} images x {} values ({mode}) -> {}", ds.len(), ds.dims(), args.output.display());
    Ok(())
}

#[derive(Serialize)]
struct SynthModelFile {
    data_dim: usize,
    latent_dim: usize,
    noise_var: f64,
    loading_scale: f64,
    seed: u64,
    /// A, row-major (D rows of L values).
    loading: Vec<Vec<f64>>,
    n_train: usize,
    n_test: usize,
    train_checksum: String,
    test_checksum: String,
    /// Sum and mean of the analytic log p(x) over each emitted split.
    log_marginal_train_total: f64,
    log_marginal_train_mean: f64,
    log_marginal_test_total: f64,
    log_marginal_test_mean: f64,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    if !(args.noise_var > 0.0 && args.noise_var.is_finite()) {
        return Err(CliError::Usage(format!("--noise-var must be positive, got {}", args.noise_var)));
    }
    if args.dim == 0 || args.latent_dim == 0 {
        return Err(CliError::Usage("--dim and --latent-dim must be at least 1".into()));
    }
    if !args.loading_scale.is_finite() {
        return Err(CliError::Usage("--loading-scale must be finite".into()));
    }
    let s = synthesize(
        args.dim,
        args.latent_dim,
        args.noise_var,
        args.loading_scale,
        args.n,
        args.test_n,
        args.seed,
    )
    .map_err(CliError::usage)?;
    let train = Dataset::new(s.train, DataMode::Real, "synth").map_err(CliError::runtime)?;
    let test = Dataset::new(s.test, DataMode::Real, "synth").map_err(CliError::runtime)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("train.txt"), to_text(train.data()))?;
    fs::write(args.out.join("test.txt"), to_text(test.data()))?;
    let mean = |total: f64, n: usize| if n == 0 { 0.0 } else { total / n as f64 };
    let train_total = s.model.log_marginal_total(train.data());
    let test_total = s.model.log_marginal_total(test.data());
    let file = SynthModelFile {
        data_dim: args.dim,
        latent_dim: args.latent_dim,
        noise_var: args.noise_var,
        loading_scale: args.loading_scale,
        seed: args.seed,
        loading: (0..args.dim)
            .map(|r| (0..args.latent_dim).map(|c| s.model.loading[(r, c)]).collect())
            .collect(),
        n_train: train.len(),
        n_test: test.len(),
        train_checksum: train.checksum().to_string(),
        test_checksum: test.checksum().to_string(),
        log_marginal_train_total: train_total,
        log_marginal_train_mean: mean(train_total, train.len()),
        log_marginal_test_total: test_total,
        log_marginal_test_mean: mean(test_total, test.len()),
    };
    let text = serde_json::to_string_pretty(&file).map_err(CliError::runtime)?;
    fs::write(args.out.join("model.json"), text + "\n")?;
    println!(
        "{} train / {} test points, D={} L={}, mean log p(x) train {:.6} -> {}",
        train.len(),
        test.len(),
        args.dim,
        args.latent_dim,
        file.log_marginal_train_mean,
        args.out.display()
    );
    Ok(())
}
