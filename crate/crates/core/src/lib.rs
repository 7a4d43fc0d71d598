//! Retrieval-augmented modeling of longitudinal patient timelines.
//!
//! The pipeline: build event timelines from raw records ([`timeline`]),
//! cut histories into chunks ([`chunker`]), embed and encode them
//! ([`encoder`]), retrieve the closest history chunks for a query
//! ([`index`]), align retrieved chunks to the query over a shared
//! prototype bank ([`prototypes`]), and fuse the weighted evidence into a
//! prediction ([`fusion`]). [`tasks`] defines the prediction targets and a
//! synthetic data generator; [`metrics`] scores predictions.

pub mod chunker;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod index;
pub mod inspect;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod optim;
pub mod prototypes;
pub mod rng;
pub mod tasks;
pub mod timeline;

pub use error::{Error, Result};
pub use tasks::{TaskName, TaskSpec};
pub use timeline::vocab::Vocabulary;
pub use timeline::{PatientTimeline, RawEvent, TimelineEvent};
