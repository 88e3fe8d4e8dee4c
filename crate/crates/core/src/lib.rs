//! Causal survival estimation for longitudinal treatment strategies when a
//! time-varying covariate is monitored irregularly.

pub mod design;
pub mod dgm;
pub mod forms;
pub mod gcomp;
pub mod glm;
pub mod harness;
pub mod ipw;
pub mod msm;
pub mod panel;
pub mod rng;
pub mod strategy;
pub mod survival;
pub mod tmle;

pub use design::{Covariates, DesignMatrix, DesignSpec, Term, Var};
pub use glm::{fit_glm, Family, FittedGlm, GlmError};
pub use panel::{risk_set, validate_panel, Panel, PanelRecord, Violation};
pub use strategy::{classify_period, enumerate_compatible, is_compatible, PeriodClass, Strategy};
pub use survival::{survival_from_hazards, CurveMode, SurvivalCurve};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/panel.md")]
    mod panel {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/glm.md")]
    mod glm {}
    #[doc = include_str!("../../../book/src/ipw.md")]
    mod ipw {}
    #[doc = include_str!("../../../book/src/gcomp.md")]
    mod gcomp {}
    #[doc = include_str!("../../../book/src/tmle.md")]
    mod tmle {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
