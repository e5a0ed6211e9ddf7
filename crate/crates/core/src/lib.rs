pub mod ingest;
pub mod kg;
pub mod kge;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod triplets;
pub mod tsg;

pub use pipeline::Error;
