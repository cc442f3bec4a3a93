//! Dataset ids to files on disk.

use std::env;
use std::path::{Path, PathBuf};

use rem_core::data::{load_text, DataMode, Dataset, IMAGE_DIMS};
use rem_core::model::{DecoderKind, EncoderKind};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "REM_DATA_DIR";

/// `--data-dir`, else `$REM_DATA_DIR`, else `./data`.
pub fn data_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub mode: DataMode,
    pub dims: Option<usize>,
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
}

pub fn spec_for(id: &str, root: &Path) -> Result<DatasetSpec, CliError> {
    let image = |train: &str, test: &str, mode| DatasetSpec {
        train_path: root.join(train),
        test_path: root.join(test),
        mode,
        dims: Some(IMAGE_DIMS),
        decoder: DecoderKind::Bernoulli,
        encoder: EncoderKind::Mlp,
    };
    match id {
        "mnist-fixed" => Ok(image(
            "binarized_mnist_train.amat",
            "binarized_mnist_test.amat",
            DataMode::Binary,
        )),
        "mnist-stochastic" => Ok(image("mnist_train.txt", "mnist_test.txt", DataMode::Gray)),
        "omniglot" => Ok(image("omniglot_train.txt", "omniglot_test.txt", DataMode::Gray)),
        _ => match id.strip_prefix("synth:") {
            Some(dir) if !dir.is_empty() => {
                let dir = PathBuf::from(dir);
                Ok(DatasetSpec {
                    train_path: dir.join("train.txt"),
                    test_path: dir.join("test.txt"),
                    mode: DataMode::Real,
                    dims: None,
                    decoder: DecoderKind::LinearGaussian,
                    encoder: EncoderKind::Linear,
                })
            }
            _ => Err(CliError::Usage(format!(
                "unknown dataset {id:?} (expected mnist-fixed, mnist-stochastic, omniglot or synth:<dir>)"
            ))),
        },
    }
}

pub fn load_split(spec: &DatasetSpec, split: &str) -> Result<Dataset, CliError> {
    let path = match split {
        "train" => &spec.train_path,
        "test" => &spec.test_path,
        other => return Err(CliError::Usage(format!("unknown split {other:?} (expected train or test)"))),
    };
    if !path.exists() {
        return Err(CliError::Runtime(format!("dataset file {} not found", path.display())));
    }
    load_text(path, spec.mode, spec.dims).map_err(|e| CliError::Runtime(e.to_string()))
}
