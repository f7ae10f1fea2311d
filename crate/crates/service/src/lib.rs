//! Durable session service: storage, the session state machine driven
//! through the coordinator, an HTTP API and remote backend clients.

pub mod api;
pub mod config;
pub mod remote;
pub mod service;
pub mod store;

pub use api::router;

pub use config::{ImageSpec, Layer, PlannerSpec, Settings};
pub use remote::{RemoteConfig, RemoteImageBackend, RemotePlanner};
pub use service::{Manifest, ManifestEntry, Service, ServiceError};
pub use store::{Event, FileStore, MemoryStore, SessionStore, StoreError};
