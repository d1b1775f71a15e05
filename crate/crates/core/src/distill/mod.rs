//! Teacher ensembles, soft targets and distillation into one student.

mod ensemble;
mod kd;
mod store;

pub use ensemble::{
    average_outputs, ensemble_soft_targets, export_soft_targets, train_teachers, CandidateReport, EnsembleSpec,
    TeacherEnsemble,
};
pub use kd::{distill_trainer, kd_loss, kl_divergence, kl_to_store, kl_to_teacher, train_distill, KdConfig};
pub use store::{SoftTargetStore, SOFT_VERSION};
