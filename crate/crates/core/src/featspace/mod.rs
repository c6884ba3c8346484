//! Feature space: projectors into the space where set distances and metrics
//! are measured, and the exact nearest-neighbor engine.

mod knn;
mod projector;

pub use knn::{squared_distance, NeighborIndex, Neighbors, Strategy};
pub use projector::{FeatureSet, Projector, ProjectorKind, Source};
