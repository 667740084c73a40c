//! Flat-file persistence under a data directory:
//!
//! ```text
//! <root>/index.json            demo and run metadata
//! <root>/demos/<name>.demo     demonstration files
//! <root>/runs/<id>/config.toml run configuration
//! <root>/runs/<id>/status.jsonl one TrainingStatus per line
//! <root>/checkpoints/<id>.ckpt latest checkpoint of a run
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{RunState, RunSummary};
use crate::config::RunConfig;
use crate::curriculum::{Checkpoint, TrainingStatus};
use crate::demo::{validate_replay, Demonstration};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub name: String,
    pub env_id: String,
    pub digest: String,
    pub steps: usize,
    pub total_return: f64,
    pub note: String,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run_id: String,
    pub demo: Option<String>,
    pub state: RunState,
    #[serde(default)]
    pub summary: Option<RunSummary>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Index {
    demos: BTreeMap<String, DemoEntry>,
    runs: BTreeMap<String, RunEntry>,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    index: Mutex<Index>,
}

/// Names become file names, so keep them to a safe alphabet.
pub fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "invalid name '{name}': use 1-64 letters, digits, '-', '_' or '.', not starting with '.'"
        )))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["demos", "runs", "checkpoints"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let index_path = root.join("index.json");
        let mut index: Index = if index_path.exists() {
            serde_json::from_slice(&fs::read(&index_path)?)?
        } else {
            Index::default()
        };
        // a process that died mid-run leaves the run marked running
        for run in index.runs.values_mut() {
            if run.state == RunState::Running {
                run.state = RunState::Paused;
            }
        }
        let store = Self { root, index: Mutex::new(index) };
        store.flush(&store.index.lock().expect("index lock"))?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn flush(&self, index: &Index) -> Result<()> {
        write_atomic(&self.root.join("index.json"), &serde_json::to_vec_pretty(index)?)
    }

    fn demo_path(&self, name: &str) -> PathBuf {
        self.root.join("demos").join(format!("{name}.demo"))
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Store a finalized demonstration that replays exactly.
    pub fn save_demo(&self, name: &str, demo: &Demonstration, overwrite: bool) -> Result<DemoEntry> {
        check_name(name)?;
        if !demo.is_finalized() {
            return Err(Error::validation("only finalized demonstrations can be stored"));
        }
        let report = validate_replay(demo, &demo.env_spec()?)?;
        if let Some(d) = report.divergence {
            return Err(Error::validation(format!("demonstration does not replay: diverges at step {}", d.step)));
        }
        let mut index = self.index.lock().expect("index lock");
        if !overwrite && index.demos.contains_key(name) {
            return Err(Error::Conflict(format!("a demonstration named '{name}' already exists")));
        }
        write_atomic(&self.demo_path(name), &demo.to_bytes())?;
        let header = demo.header();
        let entry = DemoEntry {
            name: name.to_owned(),
            env_id: header.env_id.clone(),
            digest: header.digest_hex(),
            steps: demo.len(),
            total_return: demo.total_return(),
            note: header.note.clone(),
            created_unix: header.created_unix,
        };
        index.demos.insert(name.to_owned(), entry.clone());
        self.flush(&index)?;
        Ok(entry)
    }

    /// Load and re-validate a stored demonstration.
    pub fn load_demo(&self, name: &str) -> Result<Demonstration> {
        check_name(name)?;
        if !self.index.lock().expect("index lock").demos.contains_key(name) {
            return Err(Error::NotFound(format!("no demonstration named '{name}'")));
        }
        let demo = Demonstration::load(self.demo_path(name))?;
        let report = validate_replay(&demo, &demo.env_spec()?)?;
        if let Some(d) = report.divergence {
            return Err(Error::validation(format!("stored demonstration '{name}' diverges at step {}", d.step)));
        }
        Ok(demo)
    }

    pub fn delete_demo(&self, name: &str) -> Result<()> {
        check_name(name)?;
        let mut index = self.index.lock().expect("index lock");
        if index.demos.remove(name).is_none() {
            return Err(Error::NotFound(format!("no demonstration named '{name}'")));
        }
        let path = self.demo_path(name);
        if path.exists() {
            fs::remove_file(path)?;
        }
        self.flush(&index)
    }

    pub fn list_demos(&self) -> Vec<DemoEntry> {
        self.index.lock().expect("index lock").demos.values().cloned().collect()
    }

    pub fn run(&self, run_id: &str) -> Option<RunEntry> {
        self.index.lock().expect("index lock").runs.get(run_id).cloned()
    }

    pub fn list_runs(&self) -> Vec<RunEntry> {
        self.index.lock().expect("index lock").runs.values().cloned().collect()
    }

    pub fn put_run(&self, entry: RunEntry) -> Result<()> {
        let mut index = self.index.lock().expect("index lock");
        index.runs.insert(entry.run_id.clone(), entry);
        self.flush(&index)
    }

    pub fn write_run_config(&self, run_id: &str, config: &RunConfig) -> Result<()> {
        let dir = self.run_dir(run_id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())
    }

    pub fn read_run_config(&self, run_id: &str) -> Result<RunConfig> {
        let path = self.run_dir(run_id).join("config.toml");
        if !path.exists() {
            return Err(Error::NotFound(format!("no run named '{run_id}'")));
        }
        RunConfig::load(path)
    }

    pub fn append_status(&self, run_id: &str, status: &TrainingStatus) -> Result<()> {
        let dir = self.run_dir(run_id);
        fs::create_dir_all(&dir)?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("status.jsonl"))?;
        let mut line = serde_json::to_vec(status)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn read_statuses(&self, run_id: &str) -> Result<Vec<TrainingStatus>> {
        let path = self.run_dir(run_id).join("status.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn checkpoint_path(&self, run_id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{run_id}.ckpt"))
    }

    pub fn save_checkpoint(&self, run_id: &str, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(self.checkpoint_path(run_id))
    }

    pub fn load_checkpoint(&self, run_id: &str) -> Result<Checkpoint> {
        let path = self.checkpoint_path(run_id);
        if !path.exists() {
            return Err(Error::NotFound(format!("run '{run_id}' has no checkpoint")));
        }
        Checkpoint::load(path)
    }
}
