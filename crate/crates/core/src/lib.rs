pub mod dynamics;
pub mod error;
pub mod fitting;
pub mod fockspace;
pub mod linalg;
pub mod measurement;
pub mod pipeline;
pub mod reconstruction;
pub mod serde_util;
pub mod verification;
