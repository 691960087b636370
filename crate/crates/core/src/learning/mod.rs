//! Online adaptation of the lattice generator through a small prior network.

mod learner;
mod loss;
mod normalize;
mod prior;

pub use learner::{
    fit_scale_mode, online_lattice_learning, overload_heuristic_minus1, training_objective, LearnedLattice,
    LearnerConfig, OverloadMode,
};
pub use loss::{
    assignments, compute_loss, lattice_grad, loss_with_assignments, Batch, ClientObjective, LossKind, TaskContext,
};
pub use normalize::{codebook_budget, normalize_generator, Normalized};
pub use prior::{prior_param_count, warm_start_target, ForwardPass, PriorNet, PRIOR_HIDDEN, PRIOR_INPUT};
