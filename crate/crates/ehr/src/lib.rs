//! Patient records, longitudinal severity tracking and the HTTP API the
//! dashboard talks to.

pub mod api;
pub mod service;
pub mod store;

pub use service::{
    EhrService, FaultHook, FaultPoint, ForecastStatus, IngestOutcome, NewPatient, PrioritySource, ServiceError,
    TimelineView, TriageEntry,
};
pub use store::{AuditEntry, Store, StoreError, StoreRecord};
