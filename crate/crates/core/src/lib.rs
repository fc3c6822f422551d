//! Learned data augmentation for point-cloud classification.
//!
//! A classifier and a stochastic augmentor are trained jointly: each
//! minibatch takes a virtual SGD step on the classifier, measures the
//! validation loss at the stepped weights, and moves the augmentor along a
//! finite-difference estimate of the validation-loss hypergradient.

pub mod augmentor;
pub mod bilevel;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod transform;

pub use bilevel::{BilevelConfig, BilevelProblem, BilevelState, CloudProblem};
pub use augmentor::{AugNoise, Augmentor, AugmentorKind, AugmentorSpec, Op, OpSet, Policy};
pub use classifier::{Classifier, ClassifierConfig};
pub use dataset::{PoseShift, ShapeFamily, Split, SyntheticConfig};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Preset, RunOutcome, RunSummary};
pub use optim::{OptimKind, Optimizer};
pub use params::ParamSet;
pub use tape::{Gradients, Slot, Tape, Var};
pub use tensor::{Real, Tensor};
pub use transform::{AugParams, JitterDraw, PointCloud, THETA_DIM};
