//! Label propagation engine for tracking objects through video by dense
//! feature correspondence.
//!
//! The pipeline is:
//!
//! 1. obtain per-pixel feature volumes (motion-aware and appearance-aware),
//!    either from an external extractor via the TEDF format or from the
//!    analytic oracles in [`synthkit`];
//! 2. stitch per-clip volumes into one video volume ([`scheduler`]);
//! 3. normalize and fuse the two streams ([`fusion`]);
//! 4. propagate first-frame labels with restricted-window top-K affinity
//!    ([`propagator`]);
//! 5. score predictions with region similarity and contour accuracy
//!    ([`metrics`]).
//!
//! [`pipeline`] wires these together for benchmark runs and parameter sweeps.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod propagator;
pub mod scheduler;
pub mod synthkit;
pub mod tensorio;
pub mod viz;

pub use error::{Error, Result};
pub use fusion::{fuse, l2_normalize_channels, FusionWeight, NormAxis};
pub use metrics::{evaluate_sequence, BinaryMask, EvalReport};
pub use pipeline::{DatasetProfile, SweepAxis, SweepRow};
pub use propagator::{
    predict_frame, run, LabelField, LabelFrame, PropagationConfig, PropagationOutput,
    ReferenceQueue, TopKMode,
};
pub use scheduler::{plan_clips, stitch_features, ClipPlan, OverlapPolicy};
pub use synthkit::{ObjectTrack, SynthConfig, SyntheticVideo};
pub use tensorio::{
    FeatureFrame, FeatureKind, FeatureMeta, FeatureVolume, MaskSequence, RgbFrame, Shape4,
};
