//! Job records and their on-disk home: one directory per job plus an index
//! that is rebuilt by scanning those directories.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use relayout::error::{Error, Result};
use relayout::pipeline::{EditJobSpec, ObjectLoss};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    /// QUEUED→RUNNING→{DONE, FAILED}; QUEUED or RUNNING→CANCELLED.
    /// RUNNING→QUEUED and QUEUED→FAILED are allowed for restart recovery.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Running, Done) | (Running, Failed) | (Queued, Cancelled) | (Running, Cancelled)
                | (Running, Queued) | (Queued, Failed)
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub total: usize,
    pub losses: Vec<ObjectLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub spec: EditJobSpec,
    pub progress: Progress,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

impl JobRecord {
    pub fn new(id: String, spec: EditJobSpec, idempotency_key: Option<String>) -> Self {
        let now = Utc::now();
        JobRecord {
            id,
            state: JobState::Queued,
            spec,
            progress: Progress::default(),
            created_at: now,
            updated_at: now,
            started_at: None,
            finished_at: None,
            result: None,
            output_hash: None,
            error: None,
            idempotency_key,
        }
    }

    /// Move to `next`, refusing illegal transitions.
    pub fn transition(&mut self, next: JobState) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(Error::Contract(format!(
                "job {} cannot go from {:?} to {:?}",
                self.id, self.state, next
            )));
        }
        let now = Utc::now();
        match next {
            JobState::Running => self.started_at = Some(now),
            JobState::Queued => self.started_at = None,
            _ => self.finished_at = Some(now),
        }
        self.state = next;
        self.updated_at = now;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// `<root>/jobs/<id>/job.json` per job and `<root>/index.json`.
#[derive(Clone, Debug)]
pub struct JobStore {
    root: PathBuf,
}

impl JobStore {
    pub fn open(root: &Path) -> Result<Self> {
        let jobs = root.join("jobs");
        fs::create_dir_all(&jobs).map_err(|e| Error::io(&jobs, e))?;
        Ok(JobStore { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(id)
    }

    pub fn save(&self, record: &JobRecord) -> Result<()> {
        let dir = self.job_dir(&record.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tmp = dir.join("job.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(record)?).map_err(|e| Error::io(&tmp, e))?;
        let path = dir.join("job.json");
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Every readable record, oldest first. Unreadable directories are logged and skipped.
    pub fn scan(&self) -> Result<Vec<JobRecord>> {
        let jobs = self.root.join("jobs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&jobs).map_err(|e| Error::io(&jobs, e))? {
            let dir = entry.map_err(|e| Error::io(&jobs, e))?.path();
            let path = dir.join("job.json");
            if !path.is_file() {
                continue;
            }
            let parsed = fs::read_to_string(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|s| serde_json::from_str::<JobRecord>(&s).map_err(Error::from));
            match parsed {
                Ok(r) => out.push(r),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn write_index(&self, records: &[IndexEntry]) -> Result<()> {
        let path = self.root.join("index.json");
        let tmp = self.root.join("index.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(records)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
