//! Filesystem artifact store.
//!
//! Layout: `<root>/<kind>/<fingerprint>.bin` plus `<root>/index.json`, and
//! job records under `<root>/jobs/<id>.json`. Every file is written to a
//! temporary name and renamed into place, so the index never points at a
//! partial artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EditError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Stats,
    Mapper,
    Trace,
    Image,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [
        ArtifactKind::Stats,
        ArtifactKind::Mapper,
        ArtifactKind::Trace,
        ArtifactKind::Image,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Stats => "stats",
            ArtifactKind::Mapper => "mapper",
            ArtifactKind::Trace => "trace",
            ArtifactKind::Image => "image",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| EditError::InvalidArgument(format!("unknown artifact kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactKey {
    pub kind: ArtifactKind,
    pub fingerprint: String,
    pub label: String,
}

impl ArtifactKey {
    pub fn new(
        kind: ArtifactKind,
        fingerprint: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        ArtifactKey {
            kind,
            fingerprint: fingerprint.into(),
            label: label.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        validate_name(&self.fingerprint, "fingerprint")
    }
}

fn validate_name(name: &str, what: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(EditError::InvalidArgument(format!(
            "invalid {what} {name:?}"
        )))
    }
}

/// Hex SHA-256 prefix of some bytes; the default fingerprint for content
/// that has no producing configuration of its own.
pub fn content_fingerprint(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub key: ArtifactKey,
    /// Relative to the store root.
    pub path: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub size: u64,
    pub sha256: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct IndexFile {
    records: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Precompute,
    TrainMapper,
    Optimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub result: Option<ArtifactKey>,
    pub error: Option<String>,
    /// Kind-specific summary written on completion.
    #[serde(default)]
    pub output: Option<serde_json::Value>,
}

impl JobRecord {
    pub fn queued(id: impl Into<String>, kind: JobKind) -> Self {
        JobRecord {
            id: id.into(),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            result: None,
            error: None,
            output: None,
        }
    }
}

pub struct ArtifactStore {
    root: PathBuf,
    index: Mutex<Vec<ArtifactRecord>>,
}

impl fmt::Debug for ArtifactStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArtifactStore")
            .field("root", &self.root)
            .finish()
    }
}

impl ArtifactStore {
    /// Opens (creating if needed) a store and replays its index. Records
    /// whose file is missing or has the wrong size are dropped and leftover
    /// temporary files removed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        for kind in ArtifactKind::ALL {
            let dir = root.join(kind.as_str());
            fs::create_dir_all(&dir)?;
            remove_temp_files(&dir)?;
        }
        fs::create_dir_all(root.join("jobs"))?;
        remove_temp_files(&root.join("jobs"))?;
        remove_temp_files(&root)?;
        let index_path = root.join("index.json");
        let mut records = if index_path.exists() {
            serde_json::from_slice::<IndexFile>(&fs::read(&index_path)?)?.records
        } else {
            Vec::new()
        };
        let before = records.len();
        records.retain(|r| {
            fs::metadata(root.join(&r.path))
                .map(|m| m.len() == r.size)
                .unwrap_or(false)
        });
        if records.len() != before {
            log::warn!(
                "dropped {} index records with missing artifacts",
                before - records.len()
            );
            write_atomic(
                &index_path,
                &serde_json::to_vec_pretty(&IndexFile {
                    records: records.clone(),
                })?,
            )?;
        }
        Ok(ArtifactStore {
            root,
            index: Mutex::new(records),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn relative_path(kind: ArtifactKind, fingerprint: &str) -> String {
        format!("{}/{fingerprint}.bin", kind.as_str())
    }

    /// Stores bytes under a key. Re-putting identical bytes returns the
    /// existing record; different bytes under the same kind and fingerprint
    /// is an integrity error.
    pub fn put(&self, key: &ArtifactKey, bytes: &[u8]) -> Result<ArtifactRecord> {
        key.validate()?;
        let digest = hex::encode(Sha256::digest(bytes));
        let mut index = self.index.lock().expect("store index poisoned");
        if let Some(existing) = index
            .iter()
            .find(|r| r.key.kind == key.kind && r.key.fingerprint == key.fingerprint)
        {
            if existing.sha256 == digest {
                return Ok(existing.clone());
            }
            return Err(EditError::Integrity(format!(
                "{} artifact {} already stored with different content",
                key.kind, key.fingerprint
            )));
        }
        let path = Self::relative_path(key.kind, &key.fingerprint);
        write_atomic(&self.root.join(&path), bytes)?;
        let record = ArtifactRecord {
            key: key.clone(),
            path,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            size: bytes.len() as u64,
            sha256: digest,
        };
        let mut next = index.clone();
        next.push(record.clone());
        write_atomic(
            &self.root.join("index.json"),
            &serde_json::to_vec_pretty(&IndexFile {
                records: next.clone(),
            })?,
        )?;
        *index = next;
        Ok(record)
    }

    pub fn record(&self, kind: ArtifactKind, fingerprint: &str) -> Option<ArtifactRecord> {
        self.index
            .lock()
            .expect("store index poisoned")
            .iter()
            .find(|r| r.key.kind == kind && r.key.fingerprint == fingerprint)
            .cloned()
    }

    pub fn contains(&self, kind: ArtifactKind, fingerprint: &str) -> bool {
        self.record(kind, fingerprint).is_some()
    }

    /// Reads an artifact, checking its digest.
    pub fn get(&self, kind: ArtifactKind, fingerprint: &str) -> Result<Vec<u8>> {
        let record = self.record(kind, fingerprint).ok_or_else(|| {
            EditError::NotFound(format!("no {kind} artifact with fingerprint {fingerprint}"))
        })?;
        let bytes = fs::read(self.root.join(&record.path))?;
        if hex::encode(Sha256::digest(&bytes)) != record.sha256 {
            return Err(EditError::Integrity(format!(
                "{kind} artifact {fingerprint} does not match its recorded digest"
            )));
        }
        Ok(bytes)
    }

    /// Records of one kind in insertion order.
    pub fn list(&self, kind: ArtifactKind) -> Vec<ArtifactRecord> {
        self.index
            .lock()
            .expect("store index poisoned")
            .iter()
            .filter(|r| r.key.kind == kind)
            .cloned()
            .collect()
    }

    /// Most recent record of a kind carrying `label`.
    pub fn find_label(&self, kind: ArtifactKind, label: &str) -> Option<ArtifactRecord> {
        self.list(kind)
            .into_iter()
            .rev()
            .find(|r| r.key.label == label)
    }

    pub fn save_job(&self, job: &JobRecord) -> Result<()> {
        validate_name(&job.id, "job id")?;
        write_atomic(
            &self.root.join("jobs").join(format!("{}.json", job.id)),
            &serde_json::to_vec_pretty(job)?,
        )
    }

    /// Every persisted job record, sorted by id.
    pub fn load_jobs(&self) -> Result<Vec<JobRecord>> {
        let mut jobs = BTreeMap::new();
        for entry in fs::read_dir(self.root.join("jobs"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let job: JobRecord = serde_json::from_slice(&fs::read(&path)?)?;
            jobs.insert(job.id.clone(), job);
        }
        Ok(jobs.into_values().collect())
    }
}

fn remove_temp_files(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_tmp = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with(".tmp-"));
        if is_tmp && path.is_file() {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| EditError::InvalidArgument(format!("{} has no parent", path.display())))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".tmp-{name}-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(kind: ArtifactKind, fp: &str) -> ArtifactKey {
        ArtifactKey::new(kind, fp, "label")
    }

    #[test]
    fn put_get_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let k = key(ArtifactKind::Stats, "abc");
        let r1 = store.put(&k, b"hello").unwrap();
        let r2 = store.put(&k, b"hello").unwrap();
        assert_eq!(r1, r2);
        assert_eq!(store.list(ArtifactKind::Stats).len(), 1);
        assert_eq!(store.get(ArtifactKind::Stats, "abc").unwrap(), b"hello");
        assert!(matches!(
            store.put(&k, b"other"),
            Err(EditError::Integrity(_))
        ));
        assert!(matches!(
            store.get(ArtifactKind::Mapper, "abc"),
            Err(EditError::NotFound(_))
        ));
    }

    #[test]
    fn kinds_list_separately_and_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = ArtifactStore::open(dir.path()).unwrap();
            store.put(&key(ArtifactKind::Stats, "s1"), b"1").unwrap();
            store.put(&key(ArtifactKind::Mapper, "m1"), b"2").unwrap();
        }
        let store = ArtifactStore::open(dir.path()).unwrap();
        let stats = store.list(ArtifactKind::Stats);
        let mappers = store.list(ArtifactKind::Mapper);
        assert_eq!((stats.len(), mappers.len()), (1, 1));
        assert_eq!(stats[0].key.fingerprint, "s1");
        assert_eq!(mappers[0].key.fingerprint, "m1");
        assert!(store.list(ArtifactKind::Trace).is_empty());
    }

    #[test]
    fn reopen_drops_records_without_files_and_temp_debris() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = ArtifactStore::open(dir.path()).unwrap();
            store
                .put(&key(ArtifactKind::Image, "gone"), b"xyz")
                .unwrap();
            store
                .put(&key(ArtifactKind::Image, "kept"), b"abc")
                .unwrap();
        }
        fs::remove_file(dir.path().join("image/gone.bin")).unwrap();
        fs::write(dir.path().join("image/.tmp-partial.bin-1"), b"half").unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let images = store.list(ArtifactKind::Image);
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].key.fingerprint, "kept");
        assert!(!dir.path().join("image/.tmp-partial.bin-1").exists());
    }

    #[test]
    fn rejects_path_like_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        for bad in ["", "../x", "a/b", ".hidden"] {
            assert!(store.put(&key(ArtifactKind::Trace, bad), b"x").is_err());
        }
    }

    #[test]
    fn jobs_persist() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let mut job = JobRecord::queued("job-1", JobKind::Optimize);
        store.save_job(&job).unwrap();
        job.state = JobState::Done;
        job.progress = 1.0;
        store.save_job(&job).unwrap();
        assert_eq!(store.load_jobs().unwrap(), vec![job]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            "stats".parse::<ArtifactKind>().unwrap(),
            ArtifactKind::Stats
        );
        assert!("blob".parse::<ArtifactKind>().is_err());
    }
}
