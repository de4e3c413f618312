//! HTTP service for caption rewards and question filtering.
//!
//! `POST /v1/reward` scores a rollout group and returns rewards plus
//! group-normalized advantages; `POST /v1/filter` probes one question with
//! and without its image. `GET /health` and `GET /metrics` cover operations.

pub mod app;
pub mod config;
pub mod metrics;
pub mod wire;

pub use app::{router, serve, shutdown_signal, AppState};
pub use config::{ConfigError, ParseDiagnostic, ServiceConfig};
pub use wire::{
    CaptionWire, ErrorBody, FilterRequestWire, FilterResponseWire, HealthBody, QuestionSetRef, RewardRequestWire,
    RewardResponseWire,
};
