//! Operation-priority neural architecture search over attention DAGs and
//! convolution layers, with a weight-sharing supernet and a toy masked
//! language model for fitness.

pub mod tensor;
pub mod model;
pub mod search_space;
pub mod biws;
pub mod container;
pub mod evolution;
pub mod metrics;
