//! Exact checks of the mixture-loss theory on enumerable distributions.
//!
//! The NTP loss of a model on a joint distribution is linear in the
//! distribution, so the loss on a clean/noise mixture splits into the two
//! component losses. Whether noise moves the optimum then reduces to the sign
//! of a scalar function `f(ε)` of four parameters.

mod joint;
mod prop1;

pub use joint::{
    exact_ntp_loss, lemma1_check, mix_joint, mix_joint_exact, optimal_model, DiscreteJoint, ExactJoint, Lemma1Check, ModelTable,
    MASS_TOLERANCE, OPTIMAL_FLOOR,
};
pub use prop1::{
    case3_large_alpha_k_bound, case3_multiple, case3_small_alpha_k_bound, check_case, draw_params, eta, eta_exact, f_epsilon, f_prime,
    hypotheses, k_from_losses, verify_prop1, Counterexample, KEstimate, Prop1Case, Prop1Report, PropositionParams, Skipped,
    SIGN_TOLERANCE,
};
