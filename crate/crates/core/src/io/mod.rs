//! On-disk formats: tensors, manifests and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod tensor;
