//! Unsupervised domain adaptation algorithms and explicit ReLU-attention
//! transformers whose forward pass reproduces them.
//!
//! The reference algorithms live in [`uda_ref`]; [`build_iwl`], [`build_dann`]
//! and [`build_select`] emit transformer weights, and [`harness`] drives
//! experiments from a JSON configuration.

pub mod build_dann;
pub mod build_iwl;
pub mod build_select;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod relu_approx;
pub mod tfcore;
pub mod uda_ref;

pub use build_dann::{build_dann_transformer, run_dann, DannBuild, DannConfig, DannTfRun, StepCheck};
pub use build_iwl::{build_iwl_transformer, run_iwl, IwlBuild, IwlCertificate, IwlConfig, IwlTfRun};
pub use build_select::{build_icuda_transformer, run_icuda, IcudaBuild, IcudaConfig, IcudaRun, SelectConfig, SelectionReport};
pub use datagen::{Bounds, DomainPair, Generated, HeldOut, LabeledSample};
pub use error::{Error, Result};
pub use harness::{Algorithm, ExperimentConfig, GeneratorSpec, VerificationReport};
pub use relu_approx::{ReluSum, ReluTerm};
pub use tfcore::{SlotLayout, TokenMatrix, Transformer, TransformerLayer};
pub use uda_ref::{Activation, Branch, DannHyper, DannState, FeatureKind, FeatureMap, Loss, SelectorConfig};
