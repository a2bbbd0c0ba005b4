//! Synthetic two-domain data, augmentation, image files and metrics.

pub mod augment;
pub mod dataset;
pub mod generate;
pub mod metrics;
pub mod pnm;

pub use augment::{augment, AugmentConfig, Geometry};
pub use dataset::{Dataset, DatasetSpec, Domain};
pub use generate::{generate_domain, generate_sample, Appearance, Line, Sample, SceneSpec, Texture};
pub use metrics::{iou, IouCounts};
pub use pnm::{Pnm, PnmKind};
