//! Probe heads over frozen features, trained with cross-entropy plus a local
//! gradient-matching penalty, and the diagnostics used to compare them.

mod data;
mod diagnostics;
mod head;
mod objective;
mod train;

pub use data::{gaussian_blobs, read_feature_file, BlobSpec, FeatureDataset, FeatureSplits, Split};
pub use diagnostics::{
    beta_hat_linear, beta_hat_sampled, flatness_report, input_flatness, mean_correct_fraction, orthonormal_plane, random_plane, sensitivity_map,
    FlatnessReport, SensitivityMap,
};
pub use head::{HeadKind, ProbeBatch, ProbeHead};
pub use objective::{lgm_loss, lgm_value, perturb, total_loss_and_grad, Objective, PerturbDraws, ZERO_GAP};
pub use train::{train_probe, LgmConfig, ProbeMetrics};
