//! Annotation service: serves instances with heatmaps from several models under
//! per-instance random aliases, records Likert ratings in an append-only log, and
//! exports them de-aliased for correlation with localization metrics.
//!
//! Endpoints (JSON unless noted):
//!
//! | method | path | purpose |
//! |---|---|---|
//! | GET | `/session?rater_id=` | queue size and progress |
//! | GET | `/item/next?rater_id=[&instance_id=]` | next unrated instance, heatmaps keyed by alias |
//! | GET | `/heatmap.png?rater_id=&instance_id=&alias=&sentence_index=` | one heatmap as PNG (or `&prompt=`) |
//! | POST | `/rating` | store one rating |
//! | POST | `/custom-prompt` | heatmaps for free text on an instance |
//! | GET | `/export.csv` | all ratings, with true model ids (CSV) |
//!
//! When a token is configured, every request must carry it as
//! `Authorization: Bearer <token>`, an `x-annot-token` header, or a `token` query
//! parameter.

pub mod alias;
pub mod api;
pub mod config;
pub mod store;

pub use alias::AliasMap;
pub use api::{router, serve, Service};
pub use config::{ModelEntry, ServiceConfig};
pub use store::{export_csv, Appended, Rating, Store};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("store: {0}")]
    Store(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] attnprobe::Error),
}
