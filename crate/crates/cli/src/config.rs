//! TOML run configuration for `tribind train`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tribind_core::trainer::TrainConfig;

use crate::commands::CliError;

/// ```toml
/// manifest = "data/manifest.jsonl"
/// run_dir = "runs/trimodal"
/// # vocab = "vocab.txt"   # built from the training texts when absent
///
/// [train]
/// strategy = "pt_ft"
/// modality = "trimodal"
/// batch_size = 16
/// pretrain = { steps = 800 }
/// finetune = { epochs = 20 }
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub manifest: PathBuf,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunFile {
    /// Relative paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let mut run: RunFile = toml::from_str(&text).map_err(|e| CliError::Config(path.to_path_buf(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        run.manifest = resolve(&run.manifest);
        run.run_dir = resolve(&run.run_dir);
        run.vocab = run.vocab.as_deref().map(resolve);
        Ok(run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tribind_core::trainer::{PhaseLength, Strategy, TrainMode};

    #[test]
    fn parses_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            r#"
manifest = "data/m.jsonl"
run_dir = "/abs/run"

[train]
strategy = "pt_ft"
modality = "symbolic"
batch_size = 8
finetune = { epochs = 3 }
mixture = { weak_weight = 1.0, strong_weight = 1.0 }
"#,
        )
        .unwrap();
        let run = RunFile::load(&p).unwrap();
        assert_eq!(run.manifest, dir.path().join("data/m.jsonl"));
        assert_eq!(run.run_dir, PathBuf::from("/abs/run"));
        assert_eq!(run.train.strategy, Strategy::PretrainFinetune);
        assert_eq!(run.train.mode, TrainMode::Symbolic);
        assert_eq!(run.train.finetune, PhaseLength::Epochs(3));
        assert_eq!(run.train.lr, 5e-5);
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "manifest = \"m\"\nrun_dir = \"r\"\n[train]\nlearning_rate = 1.0\n").unwrap();
        assert!(matches!(RunFile::load(&p), Err(CliError::Config(..))));
    }
}
