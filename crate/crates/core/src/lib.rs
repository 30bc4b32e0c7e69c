pub mod backbone;
pub mod datasets;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod oti;
pub mod phi;
pub mod phrasebank;
pub mod retrieval;
pub mod store;
pub mod util;

pub use error::{Error, Result};
