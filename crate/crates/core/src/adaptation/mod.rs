//! Self-training machinery: prototype bank, pseudo labels with online
//! correction, and SSIM-based two-way image pairing.

pub mod pairing;
pub mod prototypes;
pub mod pseudo;
pub mod ssim;

pub use pairing::{pair_two_way, pairs_from_matrix, similarity_matrix, Origin, Pair, PairSet};
pub use prototypes::{batch_prototype, normalize_rows, pseudo_class_weights, PrototypeBank};
pub use pseudo::{correct_pseudo_labels, pool_probs, PseudoLabel, PseudoLabelSet, Provenance};
pub use ssim::{ssim, ssim_prepared, GrayImage, SsimPrepared};
