//! In-process job queue with a fixed worker pool. Job records are mirrored
//! to the artifact store on every state change.

use std::collections::HashMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::error::Result;
use crate::store::{ArtifactKey, ArtifactStore, JobKind, JobRecord, JobState};

/// What a finished job hands back.
pub struct JobOutcome {
    pub result: Option<ArtifactKey>,
    pub output: Option<serde_json::Value>,
}

type Task = Box<dyn FnOnce(&JobHandle) -> Result<JobOutcome> + Send>;
/// Job id, coalescing key and the work itself.
type Queued = (String, Option<String>, Task);

struct Shared {
    store: Arc<ArtifactStore>,
    jobs: Mutex<Inner>,
}

struct Inner {
    records: HashMap<String, JobRecord>,
    /// Coalescing key -> id of the job computing it.
    pending: HashMap<String, String>,
    next_id: u64,
}

/// Lets a running task report progress.
pub struct JobHandle {
    id: String,
    shared: Arc<Shared>,
}

impl JobHandle {
    /// Records progress in [0, 1]; never moves backwards.
    pub fn progress(&self, fraction: f64) {
        let mut inner = self.shared.jobs.lock().expect("job table poisoned");
        if let Some(rec) = inner.records.get_mut(&self.id) {
            let f = fraction.clamp(0.0, 1.0);
            if f > rec.progress {
                rec.progress = f;
            }
        }
    }
}

pub struct JobQueue {
    shared: Arc<Shared>,
    sender: Mutex<Sender<Queued>>,
}

impl JobQueue {
    /// Starts `workers` threads. Jobs persisted as queued or running by an
    /// earlier process are marked failed.
    pub fn start(store: Arc<ArtifactStore>, workers: usize) -> Result<Self> {
        let mut records = HashMap::new();
        let mut next_id = 1;
        for mut job in store.load_jobs()? {
            if let Some(n) = job
                .id
                .strip_prefix("job-")
                .and_then(|n| n.parse::<u64>().ok())
            {
                next_id = next_id.max(n + 1);
            }
            if !job.state.is_terminal() {
                job.state = JobState::Failed;
                job.error = Some("interrupted by a server restart".into());
                store.save_job(&job)?;
            }
            records.insert(job.id.clone(), job);
        }
        let shared = Arc::new(Shared {
            store,
            jobs: Mutex::new(Inner {
                records,
                pending: HashMap::new(),
                next_id,
            }),
        });
        let (tx, rx) = channel();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let shared = shared.clone();
            let rx = rx.clone();
            thread::spawn(move || worker(shared, rx));
        }
        Ok(JobQueue {
            shared,
            sender: Mutex::new(tx),
        })
    }

    /// Enqueues a task. When `coalesce` names a key that an unfinished job
    /// is already computing, that job's id is returned instead.
    pub fn submit(
        &self,
        kind: JobKind,
        coalesce: Option<String>,
        task: impl FnOnce(&JobHandle) -> Result<JobOutcome> + Send + 'static,
    ) -> Result<String> {
        let mut inner = self.shared.jobs.lock().expect("job table poisoned");
        if let Some(id) = coalesce.as_ref().and_then(|k| inner.pending.get(k)) {
            return Ok(id.clone());
        }
        let id = format!("job-{:06}", inner.next_id);
        inner.next_id += 1;
        let record = JobRecord::queued(id.clone(), kind);
        self.shared.store.save_job(&record)?;
        inner.records.insert(id.clone(), record);
        if let Some(k) = &coalesce {
            inner.pending.insert(k.clone(), id.clone());
        }
        drop(inner);
        self.sender
            .lock()
            .expect("job sender poisoned")
            .send((id.clone(), coalesce, Box::new(task)))
            .expect("job workers stopped");
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.shared
            .jobs
            .lock()
            .expect("job table poisoned")
            .records
            .get(id)
            .cloned()
    }
}

fn update(shared: &Shared, id: &str, f: impl FnOnce(&mut JobRecord)) {
    let mut inner = shared.jobs.lock().expect("job table poisoned");
    if let Some(rec) = inner.records.get_mut(id) {
        f(rec);
        if let Err(e) = shared.store.save_job(rec) {
            log::error!("could not persist job {id}: {e}");
        }
    }
}

fn worker(shared: Arc<Shared>, rx: Arc<Mutex<Receiver<Queued>>>) {
    loop {
        let next = rx.lock().expect("job receiver poisoned").recv();
        let Ok((id, coalesce, task)) = next else {
            return;
        };
        update(&shared, &id, |r| r.state = JobState::Running);
        let handle = JobHandle {
            id: id.clone(),
            shared: shared.clone(),
        };
        let outcome = task(&handle);
        update(&shared, &id, |r| match outcome {
            Ok(out) => {
                r.state = JobState::Done;
                r.progress = 1.0;
                r.result = out.result;
                r.output = out.output;
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                r.state = JobState::Failed;
                r.error = Some(e.to_string());
            }
        });
        if let Some(k) = coalesce {
            shared
                .jobs
                .lock()
                .expect("job table poisoned")
                .pending
                .remove(&k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn wait_done(q: &JobQueue, id: &str) -> JobRecord {
        for _ in 0..500 {
            let r = q.get(id).unwrap();
            if r.state.is_terminal() {
                return r;
            }
            thread::sleep(Duration::from_millis(10));
        }
        panic!("job {id} did not finish");
    }

    #[test]
    fn jobs_run_and_coalesce() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ArtifactStore::open(dir.path()).unwrap());
        let q = JobQueue::start(store, 1).unwrap();
        let (gate_tx, gate_rx) = channel::<()>();
        let a = q
            .submit(JobKind::Precompute, Some("k".into()), move |h| {
                gate_rx.recv().unwrap();
                h.progress(0.5);
                Ok(JobOutcome {
                    result: None,
                    output: None,
                })
            })
            .unwrap();
        let b = q
            .submit(JobKind::Precompute, Some("k".into()), |_| unreachable!())
            .unwrap();
        assert_eq!(a, b);
        gate_tx.send(()).unwrap();
        let rec = wait_done(&q, &a);
        assert_eq!((rec.state, rec.progress), (JobState::Done, 1.0));
        let failing = q
            .submit(JobKind::Optimize, None, |_| {
                Err(crate::error::EditError::InvalidArgument("nope".into()))
            })
            .unwrap();
        assert_eq!(wait_done(&q, &failing).state, JobState::Failed);
    }

    #[test]
    fn restart_fails_unfinished_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ArtifactStore::open(dir.path()).unwrap());
        store
            .save_job(&JobRecord::queued("job-000007", JobKind::TrainMapper))
            .unwrap();
        let q = JobQueue::start(store, 1).unwrap();
        let rec = q.get("job-000007").unwrap();
        assert_eq!(rec.state, JobState::Failed);
        let next = q
            .submit(JobKind::Optimize, None, |_| {
                Ok(JobOutcome {
                    result: None,
                    output: None,
                })
            })
            .unwrap();
        assert_eq!(next, "job-000008");
    }
}
