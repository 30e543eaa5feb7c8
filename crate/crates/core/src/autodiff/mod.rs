//! Reverse-mode differentiation, the per-point network, optimizers and checkpoints.

mod checkpoint;
mod gradcheck;
mod net;
mod optim;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointKind, MAGIC, VERSION};
pub use gradcheck::{finite_diff_check, Entry, GradCheckConfig, GradCheckReport};
pub use net::{
    argmax_rows, gaussian_mat, sample_rows, softmax_rows, uniform_mat, Dense, FeatureRecipe,
    ParamTensor, Parameterized, PointFeatures, Recorded, SegModel, CONTEXT_FEATURES,
    COORD_FEATURES,
};
pub use optim::{adam_step, sgd_step, AdamHyper, AdamState, SgdState};
pub use tape::{Cache, FusedOp, Gradients, Mat, Tape, Var};
