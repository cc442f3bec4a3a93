//! `rem train`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde_json::json;
use sha2::{Digest, Sha256};

use rem_core::checkpoint::Checkpoint;
use rem_core::config::RunConfig;
use rem_core::data::{evaluation_matrix, subset, Dataset};
use rem_core::evaluation::{EvalReport, LikelihoodEstimate};
use rem_core::model::Architecture;
use rem_core::trainer::{Trainer, METRICS_HEADER};

use crate::commands::write_eval_report;
use crate::datasets::{data_root, load_split, spec_for};
use crate::{CliError, RunFlags, TrainArgs};

/// Keys that may differ between a checkpoint and a resumed run.
const RESUMABLE_KEYS: [&str; 7] = [
    "epochs",
    "eval-subset",
    "eval-k",
    "eval-every",
    "checkpoint-every",
    "out",
    "workers",
];

pub fn resolve_config(base: RunConfig, flags: &RunFlags) -> Result<RunConfig, CliError> {
    let mut cfg = base;
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(CliError::usage)?;
    }
    for (key, value) in flags.pairs() {
        cfg.set(key, value).map_err(CliError::usage)?;
    }
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

/// `<parent>/<UTC timestamp>-<config hash prefix>`, suffixed until unused.
fn create_run_dir(parent: &Path, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(parent)?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", &config_hash(cfg)[..8]);
    let mut n = 0;
    loop {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

struct Prepared {
    train: Dataset,
    test: Dataset,
    test_eval: rem_core::autodiff::Tensor,
    arch: Architecture,
    data_paths: (PathBuf, PathBuf),
}

fn prepare(cfg: &RunConfig, flags: &RunFlags) -> Result<Prepared, CliError> {
    let root = data_root(flags.data_dir.as_deref());
    let spec = spec_for(&cfg.dataset, &root)?;
    let mut train = load_split(&spec, "train")?;
    let mut test = load_split(&spec, "test")?;
    if let Some(n) = cfg.subset {
        train = subset(&train, n, cfg.seed).map_err(CliError::usage)?;
    }
    if let Some(n) = cfg.eval_subset {
        test = subset(&test, n, cfg.seed).map_err(CliError::usage)?;
    }
    if train.dims() != test.dims() {
        return Err(CliError::Runtime(format!(
            "train has {} columns but test has {}",
            train.dims(),
            test.dims()
        )));
    }
    let arch = Architecture {
        data_dim: train.dims(),
        latent_dim: cfg.latent_dim,
        hidden: cfg.hidden,
        decoder: spec.decoder,
        encoder: spec.encoder,
    };
    let test_eval = evaluation_matrix(&test, cfg.seed);
    Ok(Prepared {
        train,
        test,
        test_eval,
        arch,
        data_paths: (spec.train_path, spec.test_path),
    })
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let started = now();
    let (cfg, resume) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(CliError::runtime)?;
            let cfg = resolve_config(ckpt.config.clone(), &args.flags)?;
            for key in RunConfig::KEYS {
                if !RESUMABLE_KEYS.contains(&key) && cfg.get(key) != ckpt.config.get(key) {
                    return Err(CliError::Usage(format!("--resume cannot change {key}")));
                }
            }
            (cfg, Some((path.clone(), ckpt)))
        }
        None => (resolve_config(RunConfig::default(), &args.flags)?, None),
    };
    let prep = prepare(&cfg, &args.flags)?;
    let (mut trainer, resumed_from) = match resume {
        Some((path, ckpt)) => {
            if ckpt.model.arch != prep.arch {
                return Err(CliError::Runtime(format!(
                    "checkpoint architecture {:?} does not match dataset {:?}",
                    ckpt.model.arch, prep.arch
                )));
            }
            let mut t = Trainer::from_checkpoint(ckpt);
            t.config = cfg.clone();
            (t, Some(path))
        }
        None => (Trainer::new(cfg.clone(), prep.arch).map_err(CliError::usage)?, None),
    };

    let run_dir = create_run_dir(Path::new(&cfg.out), &cfg)?;
    let hash = config_hash(&cfg);
    fs::write(run_dir.join("config.txt"), cfg.to_text())?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path)?;
    for line in cfg.to_text().lines() {
        writeln!(metrics, "# {line}")?;
    }
    writeln!(metrics, "{METRICS_HEADER}")?;
    fs::create_dir_all(run_dir.join("checkpoints"))?;

    let mut artifacts = vec![
        "config.txt".to_string(),
        "metrics.csv".to_string(),
    ];
    let mut final_estimate: Option<LikelihoodEstimate> = None;
    let result = trainer.run(&prep.train, Some(&prep.test_eval), |t, m, est| {
        writeln!(metrics, "{}", m.csv_row(&t.config))?;
        metrics.flush()?;
        if m.epoch % t.config.checkpoint_every == 0 {
            let rel = format!("checkpoints/epoch-{:04}.ckpt", m.epoch);
            t.checkpoint().save(&run_dir.join(&rel))?;
            artifacts.push(rel);
        }
        if m.epoch == t.config.epochs {
            final_estimate = est.cloned();
        }
        Ok(())
    });

    let manifest_base = json!({
        "engine_version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_map(),
        "config_hash": hash,
        "data_dir": data_root(args.flags.data_dir.as_deref()),
        "data": {
            "train_path": prep.data_paths.0,
            "test_path": prep.data_paths.1,
            "train": prep.train.provenance(),
            "test": prep.test.provenance(),
        },
        "resumed_from": resumed_from,
        "started_at": started,
    });

    if let Err(e) = result {
        let mut manifest = manifest_base;
        manifest["finished_at"] = json!(now());
        manifest["status"] = json!("failed");
        manifest["error"] = json!(e.to_string());
        manifest["artifacts"] = json!(artifacts);
        fs::write(run_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json"))?;
        return Err(CliError::Runtime(format!("{e} (run directory {})", run_dir.display())));
    }

    trainer.checkpoint().save(&run_dir.join("final.ckpt")).map_err(CliError::runtime)?;
    artifacts.push("final.ckpt".into());

    if let Some(est) = final_estimate {
        let kl = rem_core::evaluation::collapse_diagnostic(&trainer.model, &prep.test_eval).map_err(CliError::runtime)?;
        let report = EvalReport {
            method: cfg.method.to_string(),
            dataset: cfg.dataset.clone(),
            split: "test".into(),
            k: cfg.eval_k,
            seed: cfg.seed,
            nll_mean: est.nll(),
            nll_per_point_path: String::new(),
            kl_to_prior: kl,
            degenerate_count: est.degenerate,
        };
        let (json_name, points_name) = write_eval_report(&run_dir, report, &est)?;
        artifacts.push(json_name);
        artifacts.push(points_name);
    }

    let mut manifest = manifest_base;
    manifest["finished_at"] = json!(now());
    manifest["status"] = json!("ok");
    manifest["artifacts"] = json!(artifacts);
    fs::write(run_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json"))?;
    println!("{}", run_dir.display());
    Ok(())
}
