use std::path::{Path, PathBuf};

use amil_core::Variant;
use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a run did, with its inputs. Together with the resolved
/// configuration this is enough to execute the run again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Generate,
    Train { data: PathBuf, variant: Variant },
    Ablation { data: PathBuf, variants: Vec<Variant> },
    Score { checkpoint: PathBuf, data: PathBuf },
    Holdout { data: PathBuf, class: usize, variant: Variant },
}

impl Job {
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Job::Generate => vec![],
            Job::Train { data, .. } | Job::Ablation { data, .. } | Job::Holdout { data, .. } => {
                vec![data]
            }
            Job::Score { checkpoint, data } => vec![checkpoint, data],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    pub seed: u64,
    pub config: RunConfig,
    pub output_dir: PathBuf,
    /// Files written by the run, relative to `output_dir`.
    pub outputs: Vec<String>,
    pub duration_secs: f64,
    /// Command-specific facts worth auditing, e.g. the training split of a
    /// holdout run.
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn write(&self) -> anyhow::Result<()> {
        let path = self.output_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<RunManifest> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| amil_core::Error::Schema(format!("manifest {}: {e}", path.display())))?;
        Ok(m)
    }
}
