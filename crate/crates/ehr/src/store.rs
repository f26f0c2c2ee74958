//! File-backed patient store.
//!
//! Layout:
//!
//! ```text
//! <dir>/meta.json              {"format": "ctdx-ehr-store/v1", "next_patient": 3}
//! <dir>/patients/<id>.json     one StoreRecord per patient
//! ```
//!
//! Every write goes to a hidden temporary file in the same directory and is
//! renamed over the target, so a record file is always either the old or
//! the new version. Readers see an immutable snapshot that is swapped only
//! after the file is in place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use ctdx_core::diagnosis::DiagnosisResult;
use ctdx_core::quantification::Baseline;
use ctdx_core::PatientRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STORE_FORMAT: &str = "ctdx-ehr-store/v1";
const META_FILE: &str = "meta.json";
const PATIENTS_DIR: &str = "patients";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("external id {0} is already registered")]
    DuplicateExternalId(String),
    #[error("write aborted: {0}")]
    Aborted(String),
}

type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// 1-based position in this patient's log.
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub actor: String,
    pub action: String,
    #[serde(default)]
    pub detail: String,
}

/// Everything stored about one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub patient: PatientRecord,
    #[serde(default)]
    pub diagnoses: Vec<DiagnosisResult>,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
    /// Registration ordinal.
    pub registered: u64,
}

impl StoreRecord {
    pub fn push_audit(&mut self, actor: &str, action: &str, detail: impl Into<String>) {
        self.audit.push(AuditEntry {
            seq: self.audit.len() as u64 + 1,
            at: Utc::now(),
            actor: actor.to_string(),
            action: action.to_string(),
            detail: detail.into(),
        });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format: String,
    next_patient: u64,
}

pub type Snapshot = Arc<BTreeMap<String, Arc<StoreRecord>>>;

pub struct Store {
    dir: PathBuf,
    snapshot: RwLock<Snapshot>,
    meta: Mutex<Meta>,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn patient_id(ordinal: u64) -> String {
    format!("p-{ordinal:06}")
}

/// Writes `bytes` to `path` via a temporary sibling. `before_rename` runs
/// after the data is synced; an error from it leaves `path` untouched.
fn write_atomic(
    path: &Path,
    bytes: &[u8],
    before_rename: &dyn Fn() -> std::result::Result<(), String>,
) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let written = (|| {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        before_rename().map_err(StoreError::Aborted)?;
        fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if written.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    written
}

impl Store {
    /// Opens or creates a store. Leftover temporary files are removed.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let patients = dir.join(PATIENTS_DIR);
        fs::create_dir_all(&patients).map_err(io_err(&patients))?;

        let meta_path = dir.join(META_FILE);
        let mut meta = match fs::read(&meta_path) {
            Ok(bytes) => {
                let m: Meta = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                    path: meta_path.clone(),
                    message: e.to_string(),
                })?;
                if m.format != STORE_FORMAT {
                    return Err(StoreError::Corrupt {
                        path: meta_path,
                        message: format!("unsupported format {:?}", m.format),
                    });
                }
                m
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Meta {
                format: STORE_FORMAT.into(),
                next_patient: 1,
            },
            Err(e) => return Err(io_err(&meta_path)(e)),
        };

        let mut records = BTreeMap::new();
        for entry in fs::read_dir(&patients).map_err(io_err(&patients))? {
            let path = entry.map_err(io_err(&patients))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if name.starts_with('.') {
                fs::remove_file(&path).map_err(io_err(&path))?;
                continue;
            }
            if !name.ends_with(".json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let rec: StoreRecord = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if format!("{}.json", rec.patient.patient_id) != name {
                return Err(StoreError::Corrupt {
                    path,
                    message: format!("holds patient {}", rec.patient.patient_id),
                });
            }
            meta.next_patient = meta.next_patient.max(rec.registered + 1);
            records.insert(rec.patient.patient_id.clone(), Arc::new(rec));
        }

        Ok(Self {
            dir,
            snapshot: RwLock::new(Arc::new(records)),
            meta: Mutex::new(meta),
            writers: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.dir.join(PATIENTS_DIR).join(format!("{id}.json"))
    }

    /// A consistent view of every record.
    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn get(&self, id: &str) -> Option<Arc<StoreRecord>> {
        self.snapshot().get(id).cloned()
    }

    /// The lock serializing writes to one patient.
    pub fn writer(&self, id: &str) -> Arc<Mutex<()>> {
        lock(&self.writers).entry(id.to_string()).or_default().clone()
    }

    fn install(&self, rec: StoreRecord) -> Arc<StoreRecord> {
        let rec = Arc::new(rec);
        let mut guard = self.snapshot.write().unwrap_or_else(|e| e.into_inner());
        let mut map = (**guard).clone();
        map.insert(rec.patient.patient_id.clone(), rec.clone());
        *guard = Arc::new(map);
        rec
    }

    /// Allocates an id, builds the record and persists it. Nothing changes
    /// on error.
    pub fn register(
        &self,
        external_id: Option<&str>,
        build: impl FnOnce(String, u64) -> StoreRecord,
        before_rename: &dyn Fn() -> std::result::Result<(), String>,
    ) -> Result<Arc<StoreRecord>> {
        let mut meta = lock(&self.meta);
        if let Some(ext) = external_id {
            if self
                .snapshot()
                .values()
                .any(|r| r.patient.external_id.as_deref() == Some(ext))
            {
                return Err(StoreError::DuplicateExternalId(ext.to_string()));
            }
        }
        let ordinal = meta.next_patient;
        let rec = build(patient_id(ordinal), ordinal);
        let path = self.record_path(&rec.patient.patient_id);
        write_atomic(&path, &to_json(&rec), before_rename)?;
        let next = Meta {
            format: STORE_FORMAT.into(),
            next_patient: ordinal + 1,
        };
        let meta_path = self.dir.join(META_FILE);
        if let Err(e) = write_atomic(&meta_path, &to_json(&next), &|| Ok(())) {
            let _ = fs::remove_file(&path);
            return Err(e);
        }
        *meta = next;
        Ok(self.install(rec))
    }

    /// Replaces an existing record. Callers hold [`Store::writer`] for the
    /// patient. Nothing changes on error.
    pub fn commit(
        &self,
        rec: StoreRecord,
        before_rename: &dyn Fn() -> std::result::Result<(), String>,
    ) -> Result<Arc<StoreRecord>> {
        let path = self.record_path(&rec.patient.patient_id);
        write_atomic(&path, &to_json(&rec), before_rename)?;
        Ok(self.install(rec))
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("store types serialize");
    bytes.push(b'\n');
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctdx_core::{Demographics, Sex};

    fn build(id: String, ordinal: u64) -> StoreRecord {
        StoreRecord {
            patient: PatientRecord::new(
                id,
                Demographics {
                    age: 50,
                    sex: Sex::Unknown,
                },
            ),
            diagnoses: vec![],
            baseline: Baseline::default(),
            audit: vec![],
            registered: ordinal,
        }
    }

    #[test]
    fn register_commit_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.register(None, build, &|| Ok(())).unwrap();
        let b = store.register(None, build, &|| Ok(())).unwrap();
        assert_eq!(a.patient.patient_id, "p-000001");
        assert_eq!(b.patient.patient_id, "p-000002");

        let mut changed = (*a).clone();
        changed.push_audit("t", "touch", "");
        store.commit(changed.clone(), &|| Ok(())).unwrap();
        drop(store);

        let store = Store::open(dir.path()).unwrap();
        assert_eq!(*store.get("p-000001").unwrap(), changed);
        let c = store.register(None, build, &|| Ok(())).unwrap();
        assert_eq!(c.patient.patient_id, "p-000003");
    }

    #[test]
    fn aborted_commit_leaves_file_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.register(None, build, &|| Ok(())).unwrap();
        let path = store.record_path("p-000001");
        let before = fs::read(&path).unwrap();
        let mut changed = (*a).clone();
        changed.patient.prior_history.push("asthma".into());
        let err = store.commit(changed, &|| Err("boom".into())).unwrap_err();
        assert!(matches!(err, StoreError::Aborted(_)));
        assert_eq!(fs::read(&path).unwrap(), before);
        assert_eq!(store.get("p-000001").unwrap(), a);
        let names: Vec<_> = fs::read_dir(dir.path().join(PATIENTS_DIR))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn aborted_register_allocates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.register(None, build, &|| Err("x".into())).is_err());
        assert!(store.snapshot().is_empty());
        let a = store.register(None, build, &|| Ok(())).unwrap();
        assert_eq!(a.patient.patient_id, "p-000001");
    }

    #[test]
    fn external_ids_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let with_ext = |id: String, n: u64| {
            let mut r = build(id, n);
            r.patient.external_id = Some("MRN-1".into());
            r
        };
        store.register(Some("MRN-1"), with_ext, &|| Ok(())).unwrap();
        assert!(matches!(
            store.register(Some("MRN-1"), with_ext, &|| Ok(())),
            Err(StoreError::DuplicateExternalId(_))
        ));
    }

    #[test]
    fn stray_temp_files_are_cleaned_and_corruption_reported() {
        let dir = tempfile::tempdir().unwrap();
        Store::open(dir.path()).unwrap();
        let tmp = dir.path().join(PATIENTS_DIR).join(".p-000009.json.tmp");
        fs::write(&tmp, b"partial").unwrap();
        Store::open(dir.path()).unwrap();
        assert!(!tmp.exists());
        fs::write(dir.path().join(PATIENTS_DIR).join("p-000001.json"), b"{").unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::Corrupt { .. })));
    }
}
