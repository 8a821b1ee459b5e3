//! A small CPU neural-network engine: tensors, layers with hand-written
//! gradients, the two classifier builders, and the training loop.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use loss::{cross_entropy, log_softmax, softmax, CrossEntropy, Objective};
pub use model::{build_conv1d_baseline, build_model, build_student_cnn, count_params, Architecture, Model, ModelSpec};
pub use tensor::{Scalar, Tensor};
pub use train::{train, EarlyStopping, LossKind, TrainConfig, TrainData};
