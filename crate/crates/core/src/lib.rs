//! Core of the feedlab classroom social-media simulator.
//!
//! Everything here is a pure function of a catalog and an action log:
//! engagement scoring, hashtag profiles, the classroom graphs, the
//! recommender and its heat map, and the offline latent-profile analytics.

pub mod agents;
pub mod analytics;
pub mod classroom;
pub mod domain;
pub mod engagement;
pub mod error;
pub mod profiling;
pub mod recommender;

pub use classroom::Classroom;
pub use domain::{
    classify_event, ActionEvent, ActionKind, ActionLog, ActionType, Catalog, DataCategory,
    ImageId, ImageItem, UserId,
};
pub use engagement::{EngagementRecord, EngagementWeights};
pub use error::{Error, Result};
pub use profiling::UserProfile;
pub use recommender::{RecommenderParams, Scope};
