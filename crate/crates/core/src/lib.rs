//! Edge deployment toolkit for small image classifiers: an NHWC inference
//! runtime with f32 and int8 kernels, a prune / cluster / quantize
//! compression pipeline, the EMDL model container, a latency benchmark
//! harness and an evaluation harness for seven-class emotion recognition.

pub mod bench;
pub mod compress;
pub mod error;
pub mod eval;
pub mod format;
pub mod graph;
pub mod mobilenet;
pub mod model;
pub mod plot;
pub mod rten;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{GraphSpec, NodeSpec, OpKind, Padding};
pub use model::{ClusterCodebook, Model};
pub use runtime::Executor;
pub use tensor::{QuantParams, Shape, Tensor};
