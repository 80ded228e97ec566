use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use crate::AppState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Train,
    Layout,
    ReprojectLocal,
    Recut,
}

/// Ordered so that `a < b` means `b` may follow `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn is_final(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: u64,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
pub(crate) struct JobTable {
    next: u64,
    jobs: BTreeMap<u64, Job>,
}

impl AppState {
    pub(crate) fn create_job(&self, kind: JobKind) -> Job {
        let mut table = self.inner.jobs.lock().unwrap();
        table.next += 1;
        let job = Job {
            id: table.next,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            result: None,
            error: None,
        };
        table.jobs.insert(job.id, job.clone());
        job
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        self.inner.jobs.lock().unwrap().jobs.get(&id).cloned()
    }

    pub(crate) fn job_running(&self, id: u64) {
        self.update_job(id, |j| {
            if j.state < JobState::Running {
                j.state = JobState::Running;
            }
        });
    }

    pub(crate) fn job_progress(&self, id: u64, progress: f64, extra: Value) {
        let kind = self.update_job(id, |j| {
            if !j.state.is_final() {
                j.progress = progress.clamp(0.0, 1.0);
            }
        });
        if let Some(kind) = kind {
            let mut data = json!({ "id": id, "kind": kind, "progress": progress });
            if let (Value::Object(d), Value::Object(e)) = (&mut data, extra) {
                d.extend(e);
            }
            self.emit("job-progress", data);
        }
    }

    /// Moves the job to its final state and emits `job-done`; later calls are no-ops.
    pub(crate) fn job_finish(&self, id: u64, outcome: Result<Value, String>) {
        let mut first = false;
        let mut table = self.inner.jobs.lock().unwrap();
        let snapshot = table.jobs.get_mut(&id).map(|j| {
            if !j.state.is_final() {
                first = true;
                match outcome {
                    Ok(v) => {
                        j.state = JobState::Done;
                        j.progress = 1.0;
                        j.result = Some(v);
                    }
                    Err(e) => {
                        j.state = JobState::Failed;
                        j.error = Some(e);
                    }
                }
            }
            j.clone()
        });
        drop(table);
        if let (true, Some(job)) = (first, snapshot) {
            self.emit("job-done", serde_json::to_value(&job).unwrap());
        }
    }

    fn update_job(&self, id: u64, f: impl FnOnce(&mut Job)) -> Option<JobKind> {
        let mut table = self.inner.jobs.lock().unwrap();
        table.jobs.get_mut(&id).map(|j| {
            f(j);
            j.kind
        })
    }
}
