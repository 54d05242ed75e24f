//! Concrete models: random-effect logistic regression and a conjugate
//! linear-Gaussian model whose evidence is known in closed form.

mod conjugate;
mod data;
mod relogit;

pub use conjugate::{conjugate_log_evidence, ConjugateGaussianModel, ConjugateProposal};
pub use data::{
    generate_conjugate_data, generate_relogit_data, read_dataset_csv, write_dataset_csv,
    SyntheticDataset, DEFAULT_N, DEFAULT_T, RELOGIT_THETA_STAR,
};
pub use relogit::RandomEffectLogisticModel;
