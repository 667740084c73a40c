//! Long-running service state: recorder sessions, training runs and the
//! persistent store. [`http`] exposes it over HTTP and WebSocket; the CLI
//! drives it in-process.

pub mod http;
pub mod store;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::config::{Condition, RunConfig};
use crate::curriculum::{run_training, Control, StopReason, TrainingResult, TrainingStatus};
use crate::demo::{shipped_key_door_demo, Recorder};
use crate::env::{Action, EnvSpec};
use crate::error::{Error, Result};
pub use store::{DemoEntry, RunEntry, Store};

/// Name under which a fresh data directory receives the shipped demo.
pub const SHIPPED_DEMO_NAME: &str = "key_door_default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Finalized,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Paused,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    pub env_id: String,
    pub steps: usize,
    pub score: f64,
    pub done: bool,
    pub action_names: Vec<String>,
    pub view: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub reward: f64,
    #[serde(flatten)]
    pub session: SessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub token: String,
    #[serde(flatten)]
    pub session: SessionView,
}

/// An action given either by index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionRef {
    Index(u32),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub reason: StopReason,
    pub converged: bool,
    pub tau: usize,
    pub iterations: u64,
    pub live_steps: u64,
    pub warmup_steps: u64,
    pub policy_version: u64,
    pub final_greedy_return: Option<f64>,
}

impl From<&TrainingResult> for RunSummary {
    fn from(r: &TrainingResult) -> Self {
        Self {
            reason: r.reason,
            converged: r.converged,
            tau: r.tau,
            iterations: r.iterations,
            live_steps: r.live_steps,
            warmup_steps: r.warmup_steps,
            policy_version: r.params.version,
            final_greedy_return: r.final_greedy_return,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub demo: Option<String>,
    pub state: RunState,
    pub latest: Option<TrainingStatus>,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub demo: Option<String>,
    pub config: RunConfig,
}

struct Session {
    recorder: Recorder,
    state: SessionState,
    token: String,
}

struct RunShared {
    state: RunState,
    latest: Option<TrainingStatus>,
    summary: Option<RunSummary>,
    error: Option<String>,
    sender: Option<broadcast::Sender<TrainingStatus>>,
}

struct RunHandle {
    demo: Option<String>,
    shared: Arc<Mutex<RunShared>>,
    stop: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

struct Inner {
    store: Store,
    sessions: Mutex<HashMap<String, Session>>,
    runs: Mutex<HashMap<String, Arc<RunHandle>>>,
}

/// Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

/// What a status subscriber receives first, then live events.
pub struct Subscription {
    pub last: Option<TrainingStatus>,
    pub events: Option<broadcast::Receiver<TrainingStatus>>,
}

fn random_hex(bytes: usize) -> String {
    let mut rng = rand::thread_rng();
    (0..bytes).map(|_| format!("{:02x}", rng.gen::<u8>())).collect()
}

fn session_view(id: &str, s: &Session) -> SessionView {
    let env = s.recorder.env();
    SessionView {
        session_id: id.to_owned(),
        state: s.state,
        env_id: env.env_id().to_owned(),
        steps: s.recorder.len(),
        score: s.recorder.score(),
        done: s.recorder.is_done(),
        action_names: env.action_names().iter().map(|n| n.to_string()).collect(),
        view: env.render_view(),
    }
}

impl Service {
    /// Open (or create) a data directory. A brand-new directory receives the
    /// shipped key-door demonstration.
    pub fn open(data_dir: impl Into<std::path::PathBuf>) -> Result<Self> {
        let data_dir = data_dir.into();
        let fresh = !data_dir.join("index.json").exists();
        let store = Store::open(data_dir)?;
        if fresh {
            store.save_demo(SHIPPED_DEMO_NAME, &shipped_key_door_demo(), false)?;
        }
        Ok(Self {
            inner: Arc::new(Inner { store, sessions: Mutex::new(HashMap::new()), runs: Mutex::new(HashMap::new()) }),
        })
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    // ---- recorder sessions ----

    pub fn session_create(&self, spec: &EnvSpec, note: Option<String>) -> Result<SessionCreated> {
        let recorder = Recorder::new(spec)?.with_note(note.unwrap_or_default());
        let id = format!("s-{}", random_hex(6));
        let token = random_hex(16);
        let session = Session { recorder, state: SessionState::Active, token: token.clone() };
        let view = session_view(&id, &session);
        self.inner.sessions.lock().expect("sessions lock").insert(id, session);
        Ok(SessionCreated { token, session: view })
    }

    pub fn session_view(&self, id: &str) -> Result<SessionView> {
        let sessions = self.inner.sessions.lock().expect("sessions lock");
        let s = sessions.get(id).ok_or_else(|| Error::NotFound(format!("no session '{id}'")))?;
        Ok(session_view(id, s))
    }

    fn with_controlled<T>(&self, id: &str, token: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let mut sessions = self.inner.sessions.lock().expect("sessions lock");
        let s = sessions.get_mut(id).ok_or_else(|| Error::NotFound(format!("no session '{id}'")))?;
        if s.token != token {
            return Err(Error::Conflict(format!("session '{id}' is controlled by another client")));
        }
        if s.state != SessionState::Active {
            return Err(Error::Conflict(format!("session '{id}' is {:?}", s.state).to_lowercase()));
        }
        f(s)
    }

    pub fn session_step(&self, id: &str, token: &str, action: &ActionRef) -> Result<StepView> {
        self.with_controlled(id, token, |s| {
            let env = s.recorder.env();
            let action = match action {
                ActionRef::Index(i) => Action(*i),
                ActionRef::Name(n) => env
                    .action_names()
                    .iter()
                    .position(|a| a == n)
                    .map(|i| Action(i as u32))
                    .ok_or_else(|| Error::validation(format!("unknown action '{n}'")))?,
            };
            if s.recorder.is_done() {
                return Err(Error::Conflict("the episode has ended; rewind or save".into()));
            }
            let result = s.recorder.step(action)?;
            Ok(StepView { reward: result.reward, session: session_view(id, s) })
        })
    }

    pub fn session_rewind(&self, id: &str, token: &str, k: usize) -> Result<SessionView> {
        self.with_controlled(id, token, |s| {
            s.recorder.rewind(k)?;
            Ok(session_view(id, s))
        })
    }

    /// Finalize the session into a stored demonstration named `name`.
    pub fn session_save(&self, id: &str, token: &str, name: &str) -> Result<DemoEntry> {
        let store = &self.inner.store;
        self.with_controlled(id, token, |s| {
            if !s.recorder.is_done() {
                return Err(Error::validation(
                    "the episode has not ended yet; only a completed episode can be saved as a demonstration",
                ));
            }
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            let demo = s.recorder.finalized(now)?;
            let entry = store.save_demo(name, &demo, false)?;
            s.state = SessionState::Finalized;
            Ok(entry)
        })
    }

    pub fn session_discard(&self, id: &str, token: &str) -> Result<SessionView> {
        self.with_controlled(id, token, |s| {
            s.state = SessionState::Discarded;
            Ok(session_view(id, s))
        })
    }

    // ---- demonstrations ----

    pub fn demo_list(&self) -> Vec<DemoEntry> {
        self.inner.store.list_demos()
    }

    pub fn demo_get(&self, name: &str) -> Result<serde_json::Value> {
        Ok(self.inner.store.load_demo(name)?.to_json())
    }

    pub fn demo_delete(&self, name: &str) -> Result<()> {
        self.inner.store.delete_demo(name)
    }

    // ---- training runs ----

    pub fn run_start(&self, request: RunRequest) -> Result<RunView> {
        request.config.validate()?;
        let run_id = request.run_id.clone().unwrap_or_else(|| format!("run-{}", random_hex(4)));
        store::check_name(&run_id)?;
        let mut runs = self.inner.runs.lock().expect("runs lock");
        if runs.contains_key(&run_id) || self.inner.store.run(&run_id).is_some() {
            return Err(Error::Conflict(format!("run '{run_id}' already exists")));
        }
        self.check_demo(&request)?;
        self.inner.store.write_run_config(&run_id, &request.config)?;
        let handle = self.launch(&run_id, request.config, request.demo, false)?;
        runs.insert(run_id.clone(), handle.clone());
        Ok(view_of(&run_id, &handle))
    }

    /// Continue a stopped or finished run from its checkpoint.
    pub fn run_resume(&self, run_id: &str) -> Result<RunView> {
        let mut runs = self.inner.runs.lock().expect("runs lock");
        if let Some(h) = runs.get(run_id) {
            if h.shared.lock().expect("run lock").state == RunState::Running {
                return Err(Error::Conflict(format!("run '{run_id}' is already running")));
            }
        }
        let entry = self.inner.store.run(run_id).ok_or_else(|| Error::NotFound(format!("no run '{run_id}'")))?;
        let config = self.inner.store.read_run_config(run_id)?;
        let handle = self.launch(run_id, config, entry.demo, true)?;
        runs.insert(run_id.to_owned(), handle.clone());
        Ok(view_of(run_id, &handle))
    }

    fn check_demo(&self, request: &RunRequest) -> Result<()> {
        match (&request.demo, request.config.condition) {
            (None, Condition::DemoCurriculum) => Err(Error::validation("the curriculum condition needs a demonstration")),
            (Some(name), _) => {
                let demo = self.inner.store.load_demo(name)?;
                if demo.env_spec()? != request.config.env {
                    return Err(Error::Incompatible(format!(
                        "demonstration '{name}' was recorded in a different environment than the run config"
                    )));
                }
                Ok(())
            }
            (None, Condition::FromStart) => Ok(()),
        }
    }

    fn launch(&self, run_id: &str, config: RunConfig, demo: Option<String>, resume: bool) -> Result<Arc<RunHandle>> {
        let store = &self.inner.store;
        let loaded = demo.as_deref().map(|n| store.load_demo(n)).transpose()?.map(Arc::new);
        let checkpoint = if resume { Some(store.load_checkpoint(run_id)?) } else { None };
        let latest = if resume { store.read_statuses(run_id)?.pop() } else { None };
        let (sender, _) = broadcast::channel(1024);
        let shared = Arc::new(Mutex::new(RunShared {
            state: RunState::Running,
            latest,
            summary: None,
            error: None,
            sender: Some(sender),
        }));
        let stop = Arc::new(AtomicBool::new(false));
        store.put_run(RunEntry { run_id: run_id.to_owned(), demo: demo.clone(), state: RunState::Running, summary: None, error: None })?;

        let service = self.clone();
        let id = run_id.to_owned();
        let (thread_shared, thread_stop, thread_demo) = (shared.clone(), stop.clone(), demo.clone());
        let thread = std::thread::Builder::new().name(format!("train-{run_id}")).spawn(move || {
            let store = &service.inner.store;
            let mut observer = |status: &TrainingStatus, _: &crate::policy::PolicyParams| {
                if let Err(e) = store.append_status(&id, status) {
                    log::warn!("run {id}: could not persist status: {e}");
                }
                let mut sh = thread_shared.lock().expect("run lock");
                sh.latest = Some(status.clone());
                if let Some(tx) = &sh.sender {
                    let _ = tx.send(status.clone());
                }
                if thread_stop.load(Ordering::SeqCst) {
                    Control::Stop
                } else {
                    Control::Continue
                }
            };
            let outcome = run_training(&config, loaded, checkpoint.as_ref(), &mut observer);
            let (state, summary, error) = match outcome {
                Ok(result) => {
                    let saved = store.save_checkpoint(&id, &result.checkpoint);
                    let state = if result.reason == StopReason::Stopped { RunState::Paused } else { RunState::Finished };
                    match saved {
                        Ok(()) => (state, Some(RunSummary::from(&result)), None),
                        Err(e) => (RunState::Failed, Some(RunSummary::from(&result)), Some(format!("checkpoint not saved: {e}"))),
                    }
                }
                Err(e) => (RunState::Failed, None, Some(e.to_string())),
            };
            let mut sh = thread_shared.lock().expect("run lock");
            sh.state = state;
            sh.summary = summary.clone();
            sh.error = error.clone();
            sh.sender = None;
            drop(sh);
            if let Err(e) = store.put_run(RunEntry { run_id: id.clone(), demo: thread_demo, state, summary, error }) {
                log::warn!("run {id}: could not update index: {e}");
            }
        })?;
        Ok(Arc::new(RunHandle { demo, shared, stop, thread: Mutex::new(Some(thread)) }))
    }

    pub fn run_status(&self, run_id: &str) -> Result<RunView> {
        if let Some(h) = self.inner.runs.lock().expect("runs lock").get(run_id) {
            return Ok(view_of(run_id, h));
        }
        let entry = self.inner.store.run(run_id).ok_or_else(|| Error::NotFound(format!("no run '{run_id}'")))?;
        Ok(RunView {
            run_id: entry.run_id,
            demo: entry.demo,
            state: entry.state,
            latest: self.inner.store.read_statuses(run_id)?.pop(),
            summary: entry.summary,
            error: entry.error,
        })
    }

    pub fn run_list(&self) -> Result<Vec<RunView>> {
        self.inner.store.list_runs().iter().map(|e| self.run_status(&e.run_id)).collect()
    }

    /// The last known status followed by live events while the run is active.
    pub fn run_subscribe(&self, run_id: &str) -> Result<Subscription> {
        if let Some(h) = self.inner.runs.lock().expect("runs lock").get(run_id) {
            let sh = h.shared.lock().expect("run lock");
            return Ok(Subscription { last: sh.latest.clone(), events: sh.sender.as_ref().map(|s| s.subscribe()) });
        }
        let view = self.run_status(run_id)?;
        Ok(Subscription { last: view.latest, events: None })
    }

    /// Ask a run to stop without waiting for it.
    pub fn run_request_stop(&self, run_id: &str) -> Result<()> {
        let runs = self.inner.runs.lock().expect("runs lock");
        let h = runs.get(run_id).ok_or_else(|| Error::NotFound(format!("run '{run_id}' is not active")))?;
        h.stop.store(true, Ordering::SeqCst);
        Ok(())
    }

    /// Ask a run to stop and wait until its checkpoint is written.
    pub fn run_stop(&self, run_id: &str) -> Result<RunView> {
        let handle = self.inner.runs.lock().expect("runs lock").get(run_id).cloned();
        match handle {
            Some(h) => {
                h.stop.store(true, Ordering::SeqCst);
                join(&h);
                Ok(view_of(run_id, &h))
            }
            None => self.run_status(run_id),
        }
    }

    /// Block until a run's training thread has finished.
    pub fn run_wait(&self, run_id: &str) -> Result<RunView> {
        let handle = self.inner.runs.lock().expect("runs lock").get(run_id).cloned();
        match handle {
            Some(h) => {
                join(&h);
                Ok(view_of(run_id, &h))
            }
            None => self.run_status(run_id),
        }
    }
}

fn join(h: &RunHandle) {
    let thread = h.thread.lock().expect("thread lock").take();
    if let Some(t) = thread {
        if t.join().is_err() {
            let mut sh = h.shared.lock().expect("run lock");
            sh.state = RunState::Failed;
            sh.error = Some("training thread panicked".into());
        }
    }
}

fn view_of(run_id: &str, h: &RunHandle) -> RunView {
    let sh = h.shared.lock().expect("run lock");
    RunView {
        run_id: run_id.to_owned(),
        demo: h.demo.clone(),
        state: sh.state,
        latest: sh.latest.clone(),
        summary: sh.summary.clone(),
        error: sh.error.clone(),
    }
}
