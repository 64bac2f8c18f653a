//! Training-free group prompting for cell instance segmentation.
//!
//! One click per cell type is expanded into point prompts for every
//! same-type instance. The pipeline runs on frozen encoder features at two
//! resolutions:
//!
//! 1. [`hsg`] gates the high- and low-resolution cosine similarity maps of a
//!    prompt, binarizes at `mean + std`, and turns every connected region
//!    into a similarity-weighted centroid.
//! 2. [`fpr`] repeatedly picks the discovered point farthest from every
//!    prompt used so far and feeds it back into [`hsg`] until nothing new
//!    turns up.
//! 3. [`decode`] turns the points into instance masks and resolves overlaps
//!    with non-maximum suppression.
//! 4. [`metrics`] scores the result (AJI, Dice, point precision/recall) and
//!    simulates ground-truth clicks.

pub mod decode;
pub mod error;
pub mod fpr;
pub mod hsg;
pub mod labels;
pub mod metrics;
pub mod npy;
pub mod tensor;

pub use error::{Error, Result};
pub use fpr::{run_chain, ChainConfig, ChainOutcome, ChainTrace, PromptQueue, SelectionStrategy, Termination};
pub use hsg::{hsg, GatedMap, GatingVariant, ReliablePoint, ReliableSet};
pub use labels::LabelMap;
pub use tensor::{FeatureMap, FeaturePair, GridPoint, ImagePoint, Level, SimilarityMap};
