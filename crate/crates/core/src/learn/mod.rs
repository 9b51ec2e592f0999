//! Feature preprocessing and the two classifiers (linear SVM, small CNN),
//! plus their JSON model files.

pub mod cnn;
pub mod features;
pub mod svm;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cnn::{cnn_grad_check, cnn_predict, cnn_train, CnnMode, CnnModel, CnnPrediction, TrainerConfig};
pub use features::{normalize_kernel, standardize, KernelFeatureImage, NormalizationStats};
pub use svm::{svm_predict, svm_train, SvmModel, SvmPrediction};

use crate::error::{Error, Result};
use crate::io;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "kebab-case")]
pub enum LearnedModel {
    Svm(SvmModel),
    Cnn(CnnModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    /// Kernel side the features came from; `None` for pixel input.
    pub kernel_side: Option<usize>,
    pub model: LearnedModel,
}

impl ModelFile {
    pub fn new(kernel_side: Option<usize>, model: LearnedModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            kernel_side,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported model format version {}", file.format_version),
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{ClassLabel, RandomSeed};

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let xs = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0]];
        let ls = ClassLabel::ALL.to_vec();
        let svm = svm_train(&xs, &ls, 1.0).unwrap();
        let f = ModelFile::new(Some(9), LearnedModel::Svm(svm));
        let p = dir.path().join("svm.json");
        f.save(&p).unwrap();
        assert_eq!(ModelFile::load(&p).unwrap(), f);

        let cnn = CnnModel::new(
            CnnMode::Kernel,
            3,
            3,
            TrainerConfig::for_mode(CnnMode::Kernel, RandomSeed(1)),
        )
        .unwrap();
        let f = ModelFile::new(Some(3), LearnedModel::Cnn(cnn));
        let p = dir.path().join("cnn.json");
        f.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"learner\": \"cnn\""));
        assert_eq!(ModelFile::load(&p).unwrap(), f);
        std::fs::write(&p, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(ModelFile::load(&p).is_err());
    }
}
