use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use relayout::concept_learning::ConceptConfig;
use relayout::error::{Error, Result};
use relayout::pipeline::{
    edit_layout, sha256_hex, validate_spec, BackendSelector, Backends, CancelToken, EditJobSpec, EditOptions,
    Finding, ObjectLoss, ProgressEvent, ProgressSink,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc};

use crate::store::{ErrorDetail, IndexEntry, JobRecord, JobState, JobStore, Progress};

/// What to do with jobs found RUNNING at startup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    #[default]
    Requeue,
    Fail,
}

impl FromStr for Recovery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "requeue" => Ok(Recovery::Requeue),
            "fail" => Ok(Recovery::Fail),
            _ => Err(Error::Config(format!("recovery must be `requeue` or `fail`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    /// Backend for submissions that do not name one.
    pub backend: BackendSelector,
    pub max_upload_bytes: usize,
    pub recovery: Recovery,
    /// Decode a preview every this many steps on backends with cheap decode.
    pub preview_every: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            workers: 1,
            backend: BackendSelector::default(),
            max_upload_bytes: 64 << 20,
            recovery: Recovery::Requeue,
            preview_every: 5,
        }
    }

    /// Read `RELAYOUT_DATA_DIR`, `RELAYOUT_WORKERS`, `RELAYOUT_BACKEND`,
    /// `RELAYOUT_RECOVERY` and `RELAYOUT_MAX_UPLOAD_BYTES`.
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let mut c = ServiceConfig::new(var("RELAYOUT_DATA_DIR").unwrap_or_else(|| "relayout-data".into()));
        if let Some(w) = var("RELAYOUT_WORKERS") {
            c.workers = w
                .parse()
                .map_err(|_| Error::Config(format!("RELAYOUT_WORKERS must be a positive integer, got `{w}`")))?;
        }
        if let Some(b) = var("RELAYOUT_BACKEND") {
            c.backend = b.parse()?;
        }
        if let Some(r) = var("RELAYOUT_RECOVERY") {
            c.recovery = r.parse()?;
        }
        if let Some(m) = var("RELAYOUT_MAX_UPLOAD_BYTES") {
            c.max_upload_bytes = m
                .parse()
                .map_err(|_| Error::Config(format!("RELAYOUT_MAX_UPLOAD_BYTES must be an integer, got `{m}`")))?;
        }
        if c.workers == 0 {
            return Err(Error::Config("RELAYOUT_WORKERS must be at least 1".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    State {
        state: JobState,
    },
    Step {
        step: usize,
        total: usize,
        t: usize,
        guided: bool,
        losses: Vec<ObjectLoss>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preview: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl JobEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, EventKind::State { state } if state.is_terminal())
    }
}

/// Edit settings sent with a submission.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    #[serde(default)]
    pub backend: Option<BackendSelector>,
    #[serde(default)]
    pub learn_concepts: Option<ConceptConfig>,
    #[serde(flatten)]
    pub options: EditOptions,
}

/// Files of a submission.
#[derive(Clone, Debug, Default)]
pub struct Upload {
    pub image: Vec<u8>,
    pub source_layout: Vec<u8>,
    pub target_layout: Vec<u8>,
    /// Mask PNGs referenced by the layouts, by file name.
    pub files: Vec<(String, Vec<u8>)>,
    pub config: JobConfig,
}

#[derive(Debug)]
pub enum SubmitError {
    Invalid(Vec<Finding>),
    Internal(Error),
}

impl From<Error> for SubmitError {
    fn from(e: Error) -> Self {
        SubmitError::Internal(e)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Submitted {
    pub id: String,
    pub state: JobState,
    /// False when an earlier submission with the same idempotency key was returned.
    pub created: bool,
}

struct JobEntry {
    /// Held across read-modify-commit of the state.
    transition: Mutex<()>,
    record: Mutex<JobRecord>,
    events: Mutex<Vec<JobEvent>>,
    tx: broadcast::Sender<JobEvent>,
    cancel: CancelToken,
}

impl JobEntry {
    fn new(record: JobRecord, events: Vec<JobEvent>) -> Arc<Self> {
        Arc::new(JobEntry {
            transition: Mutex::new(()),
            record: Mutex::new(record),
            events: Mutex::new(events),
            tx: broadcast::channel(256).0,
            cancel: CancelToken::default(),
        })
    }
}

const RESERVED: [&str; 6] = ["job.json", "events.jsonl", "source.png", "source.json", "target.json", "result.png"];

fn safe_name(name: &str) -> Option<&str> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && !RESERVED.contains(&name);
    ok.then_some(name)
}

/// The job queue: persistence, a fixed worker pool and per-job event streams.
pub struct JobService {
    config: ServiceConfig,
    store: JobStore,
    backends: Backends,
    jobs: RwLock<HashMap<String, Arc<JobEntry>>>,
    keys: Mutex<HashMap<String, String>>,
    queue: mpsc::UnboundedSender<String>,
    running: AtomicUsize,
}

impl JobService {
    /// Open the data directory, recover interrupted jobs and start the
    /// workers. Must be called inside a Tokio runtime.
    pub fn start(config: ServiceConfig, backends: Backends) -> Result<Arc<Self>> {
        if config.workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let store = JobStore::open(&config.data_dir)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let svc = Arc::new(JobService {
            config,
            store,
            backends,
            jobs: RwLock::new(HashMap::new()),
            keys: Mutex::new(HashMap::new()),
            queue: tx,
            running: AtomicUsize::new(0),
        });
        svc.recover()?;
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        for _ in 0..svc.config.workers {
            tokio::spawn(worker(Arc::clone(&svc), Arc::clone(&rx)));
        }
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn recover(&self) -> Result<()> {
        for mut record in self.store.scan()? {
            let id = record.id.clone();
            let events = read_events(&self.store.job_dir(&id));
            let entry = JobEntry::new(record.clone(), events);
            if let Some(k) = &record.idempotency_key {
                self.keys.lock().insert(k.clone(), id.clone());
            }
            self.jobs.write().insert(id.clone(), Arc::clone(&entry));
            match (record.state, self.config.recovery) {
                (JobState::Running, Recovery::Requeue) => {
                    log::warn!("job {id} was running at shutdown; queueing it again");
                    record.transition(JobState::Queued)?;
                    record.progress = Progress::default();
                    self.commit(&entry, record)?;
                    self.enqueue(&id);
                }
                (JobState::Running, Recovery::Fail) => {
                    log::warn!("job {id} was running at shutdown; marking it failed");
                    record.transition(JobState::Failed)?;
                    record.error = Some(ErrorDetail {
                        code: "interrupted".into(),
                        message: "the service stopped while this job was running".into(),
                    });
                    self.commit(&entry, record)?;
                }
                (JobState::Queued, _) => self.enqueue(&id),
                _ => {}
            }
        }
        self.write_index()
    }

    fn enqueue(&self, id: &str) {
        // The receiver lives as long as the workers, which outlive the service handle.
        let _ = self.queue.send(id.to_string());
    }

    fn entry(&self, id: &str) -> Option<Arc<JobEntry>> {
        self.jobs.read().get(id).cloned()
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.store.job_dir(id)
    }

    fn emit(&self, id: &str, entry: &JobEntry, kind: EventKind) {
        let mut events = entry.events.lock();
        let event = JobEvent {
            seq: events.last().map_or(1, |e| e.seq + 1),
            kind,
        };
        let path = self.job_dir(id).join("events.jsonl");
        let line = serde_json::to_string(&event).expect("events serialize");
        if let Err(e) = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{line}"))
        {
            log::warn!("{}: {e}", path.display());
        }
        events.push(event.clone());
        let _ = entry.tx.send(event);
    }

    /// Persist `record` as the entry's state and announce a state change.
    fn commit(&self, entry: &JobEntry, record: JobRecord) -> Result<()> {
        let changed = {
            let mut cur = entry.record.lock();
            let changed = cur.state != record.state;
            self.store.save(&record)?;
            *cur = record.clone();
            changed
        };
        if changed {
            self.emit(&record.id, entry, EventKind::State { state: record.state });
            self.write_index()?;
        }
        Ok(())
    }

    fn write_index(&self) -> Result<()> {
        let mut index: Vec<IndexEntry> = self
            .jobs
            .read()
            .values()
            .map(|e| {
                let r = e.record.lock();
                IndexEntry {
                    id: r.id.clone(),
                    state: r.state,
                    idempotency_key: r.idempotency_key.clone(),
                }
            })
            .collect();
        index.sort_by(|a, b| a.id.cmp(&b.id));
        self.store.write_index(&index)
    }

    pub fn submit(&self, upload: Upload, key: Option<String>) -> std::result::Result<Submitted, SubmitError> {
        let mut keys = self.keys.lock();
        if let Some(k) = &key {
            if let Some(id) = keys.get(k) {
                let state = self.entry(id).map_or(JobState::Queued, |e| e.record.lock().state);
                return Ok(Submitted {
                    id: id.clone(),
                    state,
                    created: false,
                });
            }
        }
        let id = ulid::Ulid::new().to_string();
        let dir = self.job_dir(&id);
        let prepared = self.prepare(&dir, upload);
        let spec = match prepared {
            Ok(spec) => spec,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir);
                return Err(e);
            }
        };
        let record = JobRecord::new(id.clone(), spec, key.clone());
        self.store.save(&record)?;
        let entry = JobEntry::new(record, Vec::new());
        self.jobs.write().insert(id.clone(), Arc::clone(&entry));
        if let Some(k) = key {
            keys.insert(k, id.clone());
        }
        drop(keys);
        self.emit(&id, &entry, EventKind::State { state: JobState::Queued });
        self.write_index()?;
        self.enqueue(&id);
        Ok(Submitted {
            id,
            state: JobState::Queued,
            created: true,
        })
    }

    fn prepare(&self, dir: &Path, upload: Upload) -> std::result::Result<EditJobSpec, SubmitError> {
        let inputs = dir.join("inputs");
        fs::create_dir_all(&inputs).map_err(|e| Error::io(&inputs, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = inputs.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        let mut bad = Vec::new();
        for (name, bytes) in &upload.files {
            match safe_name(name) {
                Some(n) => write(n, bytes)?,
                None => bad.push(Finding::error("bad_file_name", format!("file name `{name}` is not allowed"))),
            }
        }
        for (name, bytes, field) in [
            ("source.png", &upload.image, "image"),
            ("source.json", &upload.source_layout, "source_layout"),
            ("target.json", &upload.target_layout, "target_layout"),
        ] {
            if bytes.is_empty() {
                bad.push(Finding::error("missing_part", format!("multipart field `{field}` is required")));
            } else {
                write(name, bytes)?;
            }
        }
        if !bad.is_empty() {
            return Err(SubmitError::Invalid(bad));
        }
        let spec = EditJobSpec {
            source_image: inputs.join("source.png"),
            source_layout: inputs.join("source.json"),
            target_layout: inputs.join("target.json"),
            concepts: None,
            learn_concepts: upload.config.learn_concepts,
            backend: upload.config.backend.unwrap_or_else(|| self.config.backend.clone()),
            options: upload.config.options,
            output: dir.join("result.png"),
            debug_dir: None,
            telemetry: Some(dir.join("telemetry.csv")),
        };
        let findings = validate_spec(&spec);
        if findings.iter().any(Finding::is_error) {
            return Err(SubmitError::Invalid(findings));
        }
        fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&spec).map_err(Error::from)?)
            .map_err(|e| Error::io(dir, e))?;
        Ok(spec)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.entry(id).map(|e| e.record.lock().clone())
    }

    pub fn list(&self) -> Vec<JobRecord> {
        let mut out: Vec<JobRecord> = self.jobs.read().values().map(|e| e.record.lock().clone()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Cancel a job. Queued jobs are cancelled at once; running ones stop
    /// before their next denoising step. Finished jobs are left alone.
    pub fn cancel(&self, id: &str) -> Option<Result<JobState>> {
        let entry = self.entry(id)?;
        let _guard = entry.transition.lock();
        let mut record = entry.record.lock().clone();
        Some(match record.state {
            JobState::Queued => record
                .transition(JobState::Cancelled)
                .and_then(|_| self.commit(&entry, record))
                .map(|_| JobState::Cancelled),
            JobState::Running => {
                entry.cancel.cancel();
                Ok(JobState::Running)
            }
            s => Ok(s),
        })
    }

    /// Events after `after`, plus a live receiver when the job may still emit.
    pub fn subscribe(&self, id: &str, after: u64) -> Option<(Vec<JobEvent>, Option<broadcast::Receiver<JobEvent>>)> {
        let entry = self.entry(id)?;
        let events = entry.events.lock();
        let past: Vec<JobEvent> = events.iter().filter(|e| e.seq > after).cloned().collect();
        let done = entry.record.lock().state.is_terminal() && events.last().is_some_and(JobEvent::is_terminal);
        let live = (!done).then(|| entry.tx.subscribe());
        Some((past, live))
    }

    pub fn events(&self, id: &str, after: u64) -> Option<Vec<JobEvent>> {
        self.subscribe(id, after).map(|(p, _)| p)
    }

    pub fn job_file(&self, id: &str, name: &str) -> Option<PathBuf> {
        self.entry(id)?;
        let p = self.job_dir(id).join(name);
        p.is_file().then_some(p)
    }

    pub fn preview_path(&self, id: &str, name: &str) -> Option<PathBuf> {
        let name = safe_name(name)?;
        self.job_file(id, &format!("previews/{name}"))
    }

    pub fn counts(&self) -> HashMap<JobState, usize> {
        let mut out = HashMap::new();
        for e in self.jobs.read().values() {
            *out.entry(e.record.lock().state).or_insert(0) += 1;
        }
        out
    }

    pub fn running(&self) -> usize {
        self.running.load(Ordering::SeqCst)
    }

    async fn run_one(self: &Arc<Self>, id: String) {
        let Some(entry) = self.entry(&id) else { return };
        let spec = {
            let _guard = entry.transition.lock();
            let mut record = entry.record.lock().clone();
            if record.state != JobState::Queued {
                return;
            }
            let spec = record.spec.clone();
            if let Err(e) = record.transition(JobState::Running).and_then(|_| self.commit(&entry, record)) {
                log::error!("job {id}: {e}");
                return;
            }
            spec
        };
        self.running.fetch_add(1, Ordering::SeqCst);
        let svc = Arc::clone(self);
        let job_entry = Arc::clone(&entry);
        let job_id = id.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            let previews = matches!(spec.backend, BackendSelector::Toy { .. }).then_some(svc.config.preview_every);
            let mut sink = JobSink {
                svc: Arc::clone(&svc),
                entry: Arc::clone(&job_entry),
                id: job_id,
                previews,
            };
            let result = edit_layout(&spec, &svc.backends, &mut sink, &job_entry.cancel);
            result.and_then(|out| {
                let bytes = fs::read(&spec.output).map_err(|e| Error::io(&spec.output, e))?;
                if sha256_hex(&bytes) != out.manifest.output_hash {
                    return Err(Error::Contract("result does not match its manifest hash".into()));
                }
                Ok((spec.output.clone(), out.manifest.output_hash))
            })
        })
        .await;
        self.running.fetch_sub(1, Ordering::SeqCst);

        let _guard = entry.transition.lock();
        let mut record = entry.record.lock().clone();
        let next = match outcome {
            Ok(Ok((path, hash))) => {
                record.result = Some(path);
                record.output_hash = Some(hash);
                JobState::Done
            }
            Ok(Err(Error::Cancelled(_))) => JobState::Cancelled,
            Ok(Err(e)) => {
                log::warn!("job {id} failed: {e}");
                record.error = Some(ErrorDetail {
                    code: e.code().into(),
                    message: e.to_string(),
                });
                JobState::Failed
            }
            Err(join) => {
                log::error!("job {id} panicked: {join}");
                record.error = Some(ErrorDetail {
                    code: "internal".into(),
                    message: "the job crashed".into(),
                });
                JobState::Failed
            }
        };
        if let Err(e) = record.transition(next).and_then(|_| self.commit(&entry, record)) {
            log::error!("job {id}: {e}");
        }
    }
}

async fn worker(svc: Arc<JobService>, rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<String>>>) {
    loop {
        let next = rx.lock().await.recv().await;
        match next {
            Some(id) => svc.run_one(id).await,
            None => break,
        }
    }
}

fn read_events(dir: &Path) -> Vec<JobEvent> {
    fs::read_to_string(dir.join("events.jsonl"))
        .map(|s| s.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
        .unwrap_or_default()
}

struct JobSink {
    svc: Arc<JobService>,
    entry: Arc<JobEntry>,
    id: String,
    previews: Option<usize>,
}

impl ProgressSink for JobSink {
    fn emit(&mut self, event: ProgressEvent) {
        let ProgressEvent::Step {
            index,
            t,
            total_steps,
            guided,
            losses,
            preview,
        } = event
        else {
            return;
        };
        let preview = preview.and_then(|png| {
            let dir = self.svc.job_dir(&self.id).join("previews");
            let name = format!("step_{index:03}.png");
            fs::create_dir_all(&dir)
                .and_then(|_| fs::write(dir.join(&name), png))
                .map_err(|e| log::warn!("preview for job {}: {e}", self.id))
                .ok()
                .map(|_| format!("/api/jobs/{}/previews/{name}", self.id))
        });
        let record = {
            let mut r = self.entry.record.lock();
            r.progress = Progress {
                step: index,
                total: total_steps,
                losses: losses.clone(),
            };
            r.updated_at = chrono::Utc::now();
            r.clone()
        };
        if let Err(e) = self.svc.store.save(&record) {
            log::warn!("job {}: {e}", self.id);
        }
        self.svc.emit(
            &self.id,
            &self.entry,
            EventKind::Step {
                step: index,
                total: total_steps,
                t,
                guided,
                losses,
                preview,
            },
        );
    }

    fn preview_every(&self) -> Option<usize> {
        self.previews
    }
}
