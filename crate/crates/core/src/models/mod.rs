//! Interaural cue models: the reflection-aware comb-filter IPD model, ILD
//! and IPD Gaussians, the garbage source and the coherence mask.

mod coherence;
mod comb;
mod cue;

pub use coherence::{ic_mask, IcMask, KappaMode};
pub use comb::{comb_ipd_model, comb_phase_at, phase_residual, CombParams, CombPhase, PhaseResidual};
pub use cue::{
    cue_log_likelihood, garbage_model, ild_model, ild_model_ir, log_gaussian, IldModel, SourceCueModel,
    GARBAGE_ILD_VAR, LOG_UNIFORM_IPD, VARIANCE_FLOOR,
};
