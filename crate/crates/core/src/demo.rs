//! Demonstrations: recording with rewind, the on-disk container, replay
//! validation and the suffix-return index used by the success test.
//!
//! # File format (version 1, little-endian)
//!
//! ```text
//! "BSDM"                     magic
//! u32                        format version
//! u32 len | utf-8            env id
//! [u8; 32]                   SHA-256 config digest
//! u32 len | bytes            canonical env config (map text for grids)
//! u64                        created, unix seconds
//! u32 len | utf-8            note
//! u8                         1 = finalized, 0 = draft
//! u32                        step count T
//! T x { u32 len | step record }
//!
//! step record: snapshot_before | u32 action | f64 reward | u8 done
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::codec::{Reader, Writer};
use crate::env::{Action, EnvSnapshot, EnvSpec, Environment, StepResult};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BSDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoHeader {
    pub env_id: String,
    pub config_digest: [u8; 32],
    pub env_config: Vec<u8>,
    pub format_version: u32,
    pub created_unix: u64,
    pub note: String,
    pub finalized: bool,
}

impl DemoHeader {
    pub fn for_spec(spec: &EnvSpec, note: impl Into<String>) -> Self {
        Self {
            env_id: spec.env_id().to_owned(),
            config_digest: spec.digest(),
            env_config: spec.config_bytes(),
            format_version: FORMAT_VERSION,
            created_unix: 0,
            note: note.into(),
            finalized: false,
        }
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let spec = EnvSpec::from_config_bytes(&self.env_id, &self.env_config)?;
        if spec.digest() != self.config_digest {
            return Err(Error::Incompatible("header config digest does not match its config".into()));
        }
        Ok(spec)
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.config_digest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub snapshot_before: EnvSnapshot,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
}

/// `sums[t]` is the total reward from step `t` to the end; `sums[T] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixReturnIndex {
    sums: Vec<f64>,
}

impl SuffixReturnIndex {
    pub fn build(rewards: impl DoubleEndedIterator<Item = f64> + ExactSizeIterator) -> Self {
        let mut sums = vec![0.0; rewards.len() + 1];
        for (t, r) in rewards.enumerate().rev() {
            sums[t] = r + sums[t + 1];
        }
        Self { sums }
    }

    pub fn get(&self, t: usize) -> Result<f64> {
        self.sums.get(t).copied().ok_or_else(|| {
            Error::validation(format!("suffix index {t} outside 0..={}", self.sums.len() - 1))
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sums
    }
}

/// An immutable recorded trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    header: DemoHeader,
    steps: Vec<DemoStep>,
    suffix: SuffixReturnIndex,
}

impl Demonstration {
    /// Checks that `done` appears only on the last step, and that a finalized
    /// demonstration is non-empty and ends with `done`.
    pub fn new(header: DemoHeader, steps: Vec<DemoStep>) -> Result<Self> {
        if let Some(i) = steps.iter().rev().skip(1).position(|s| s.done) {
            return Err(Error::validation(format!(
                "done flag at step {} before the final step",
                steps.len() - 2 - i
            )));
        }
        if header.finalized {
            match steps.last() {
                None => return Err(Error::validation("a finalized demonstration needs at least one step")),
                Some(s) if !s.done => {
                    return Err(Error::validation("a finalized demonstration must end with done=true"))
                }
                _ => {}
            }
        } else if steps.last().is_some_and(|s| s.done) {
            return Err(Error::validation("a completed recording must be finalized, not saved as a draft"));
        }
        let suffix = SuffixReturnIndex::build(steps.iter().map(|s| s.reward));
        Ok(Self { header, steps, suffix })
    }

    pub fn header(&self) -> &DemoHeader {
        &self.header
    }

    pub fn steps(&self) -> &[DemoStep] {
        &self.steps
    }

    /// Number of recorded steps, T.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_finalized(&self) -> bool {
        self.header.finalized
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        self.header.env_spec()
    }

    /// Σ of rewards from step `t` to the end, for `0 <= t <= T`.
    pub fn suffix_return(&self, t: usize) -> Result<f64> {
        self.suffix.get(t)
    }

    pub fn suffix_index(&self) -> &SuffixReturnIndex {
        &self.suffix
    }

    pub fn total_return(&self) -> f64 {
        self.suffix.sums[0]
    }

    pub fn snapshot(&self, t: usize) -> Option<&EnvSnapshot> {
        self.steps.get(t).map(|s| &s.snapshot_before)
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    /// The last index whose state is not terminal: the final pre-terminal
    /// state, one step before the demonstration ends.
    pub fn last_start_index(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer::new();
        w.raw(MAGIC)
            .u32(FORMAT_VERSION)
            .str(&h.env_id)
            .raw(&h.config_digest)
            .bytes(&h.env_config)
            .u64(h.created_unix)
            .str(&h.note)
            .bool(h.finalized)
            .u32(self.steps.len() as u32);
        for s in &self.steps {
            let mut rec = Writer::new();
            s.snapshot_before.encode(&mut rec);
            rec.u32(s.action.0).f64(s.reward).bool(s.done);
            w.bytes(&rec.finish());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.raw(4)? != MAGIC {
            return Err(Error::decode("not a demonstration file (bad magic)"));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "demonstration format version {format_version}, expected {FORMAT_VERSION}"
            )));
        }
        let env_id = r.str()?.to_owned();
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.raw(32)?);
        let header = DemoHeader {
            env_id,
            config_digest,
            env_config: r.bytes()?.to_vec(),
            format_version,
            created_unix: r.u64()?,
            note: r.str()?.to_owned(),
            finalized: r.bool()?,
        };
        let n = r.u32()? as usize;
        let mut steps = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut rec = Reader::new(r.bytes()?);
            steps.push(DemoStep {
                snapshot_before: EnvSnapshot::decode(&mut rec)?,
                action: Action(rec.u32()?),
                reward: rec.f64()?,
                done: rec.bool()?,
            });
            rec.finish()?;
        }
        r.finish()?;
        Self::new(header, steps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Debug view for clients. Snapshot payloads are hex encoded.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct StepView<'a> {
            t: usize,
            step_index: u64,
            action: u32,
            reward: f64,
            done: bool,
            suffix_return: f64,
            snapshot: &'a str,
        }
        let names = self.env_spec().ok().and_then(|s| s.build().ok()).map(|e| e.action_names());
        let hexes: Vec<String> = self.steps.iter().map(|s| hex(&s.snapshot_before.payload)).collect();
        let steps: Vec<_> = self
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let mut v = serde_json::to_value(StepView {
                    t,
                    step_index: s.snapshot_before.step_index,
                    action: s.action.0,
                    reward: s.reward,
                    done: s.done,
                    suffix_return: self.suffix.sums[t],
                    snapshot: &hexes[t],
                })
                .expect("plain struct");
                if let Some(name) = names.and_then(|n| n.get(s.action.index())) {
                    v["action_name"] = serde_json::Value::from(*name);
                }
                v
            })
            .collect();
        serde_json::json!({
            "header": {
                "env_id": self.header.env_id,
                "config_digest": self.header.digest_hex(),
                "env_config": String::from_utf8_lossy(&self.header.env_config),
                "format_version": self.header.format_version,
                "created_unix": self.header.created_unix,
                "note": self.header.note,
                "finalized": self.header.finalized,
            },
            "length": self.len(),
            "total_return": self.total_return(),
            "steps": steps,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Records a demonstration step by step, with the ability to rewind.
pub struct Recorder {
    spec: EnvSpec,
    env: Box<dyn Environment>,
    steps: Vec<DemoStep>,
    note: String,
}

impl Recorder {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        let mut env = spec.build()?;
        env.reset();
        Ok(Self { spec: spec.clone(), env, steps: Vec::new(), note: String::new() })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn steps(&self) -> &[DemoStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.env.is_done()
    }

    pub fn score(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).fold(0.0, |acc, r| acc + r)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let snapshot_before = self.env.snapshot();
        let result = self.env.step(action)?;
        self.steps.push(DemoStep { snapshot_before, action, reward: result.reward, done: result.done });
        Ok(result)
    }

    /// Discard the last `k` steps and restore the environment to the
    /// retained frontier.
    pub fn rewind(&mut self, k: usize) -> Result<()> {
        if k > self.steps.len() {
            return Err(Error::validation(format!(
                "cannot rewind {k} steps, only {} recorded",
                self.steps.len()
            )));
        }
        if k == 0 {
            return Ok(());
        }
        let keep = self.steps.len() - k;
        let frontier = self.steps[keep].snapshot_before.clone();
        self.env.restore(&frontier)?;
        self.steps.truncate(keep);
        Ok(())
    }

    fn header(&self, finalized: bool) -> DemoHeader {
        let mut h = DemoHeader::for_spec(&self.spec, self.note.clone());
        h.finalized = finalized;
        h
    }

    /// Snapshot of the recording so far as an unfinalized draft.
    pub fn draft(&self) -> Result<Demonstration> {
        Demonstration::new(self.header(false), self.steps.clone())
    }

    pub fn finish(self) -> Result<Demonstration> {
        self.finalized(0)
    }

    /// Finalize with an explicit creation timestamp.
    pub fn finish_at(self, created_unix: u64) -> Result<Demonstration> {
        self.finalized(created_unix)
    }

    /// The finished demonstration, leaving the recorder untouched.
    pub fn finalized(&self, created_unix: u64) -> Result<Demonstration> {
        if !self.env.is_done() {
            return Err(Error::validation(
                "the episode has not ended; keep recording or save a draft",
            ));
        }
        let mut header = self.header(true);
        header.created_unix = created_unix;
        Demonstration::new(header, self.steps.clone())
    }
}

/// Bytes of the demonstration shipped for the default key-door layout: the
/// shortest solution found by exhaustive search, worth 400.
pub const SHIPPED_KEY_DOOR_DEMO: &[u8] = include_bytes!("../demos/key_door_default.demo");

pub fn shipped_key_door_demo() -> Demonstration {
    Demonstration::from_bytes(SHIPPED_KEY_DOOR_DEMO).expect("shipped demonstration decodes")
}

/// Record a complete episode by playing `actions` from a fresh environment.
pub fn record(spec: &EnvSpec, actions: impl IntoIterator<Item = Action>, note: &str) -> Result<Demonstration> {
    let mut rec = Recorder::new(spec)?.with_note(note);
    for a in actions {
        rec.step(a)?;
    }
    rec.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivergenceKind {
    Snapshot,
    Reward { recorded: f64, replayed: f64 },
    Done { recorded: bool, replayed: bool },
    StepFailed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    #[serde(flatten)]
    pub kind: DivergenceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub steps_checked: usize,
    pub divergence: Option<Divergence>,
}

impl ValidationReport {
    pub fn is_exact(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Replay every recorded action from the initial snapshot and report the
/// first step whose snapshot bytes, reward or done flag disagree.
///
/// A header that names a different environment or config digest is
/// rejected before any replay.
pub fn validate_replay(demo: &Demonstration, spec: &EnvSpec) -> Result<ValidationReport> {
    let h = demo.header();
    if h.env_id != spec.env_id() {
        return Err(Error::Incompatible(format!(
            "demonstration is for '{}', not '{}'",
            h.env_id,
            spec.env_id()
        )));
    }
    if h.config_digest != spec.digest() {
        return Err(Error::Incompatible(
            "demonstration was recorded under a different environment config".into(),
        ));
    }
    let mut env = spec.build()?;
    env.reset();
    let report = |step, kind| ValidationReport { steps_checked: step, divergence: Some(Divergence { step, kind }) };
    for (t, s) in demo.steps().iter().enumerate() {
        if t == 0 {
            if let Err(e) = env.restore(&s.snapshot_before) {
                return Ok(report(0, DivergenceKind::StepFailed { message: e.to_string() }));
            }
        }
        if env.snapshot() != s.snapshot_before {
            return Ok(report(t, DivergenceKind::Snapshot));
        }
        let r = match env.step(s.action) {
            Ok(r) => r,
            Err(e) => return Ok(report(t, DivergenceKind::StepFailed { message: e.to_string() })),
        };
        if r.reward.to_bits() != s.reward.to_bits() {
            return Ok(report(t, DivergenceKind::Reward { recorded: s.reward, replayed: r.reward }));
        }
        if r.done != s.done {
            return Ok(report(t, DivergenceKind::Done { recorded: s.done, replayed: r.done }));
        }
    }
    Ok(ValidationReport { steps_checked: demo.len(), divergence: None })
}
