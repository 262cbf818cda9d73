//! Knowledge-aware dialogue generation with transfer from a pre-trained
//! knowledge base question answering (KBQA) matcher.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod dialog;
pub mod error;
pub mod gradcheck;
pub mod kb;
pub mod kbqa;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod vocab;

pub use error::{DataError, Error, Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, Tensor, Var};
