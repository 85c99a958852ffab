//! Dense linear algebra and seeded sampling shared by every other module.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{
    eigenvalues, linear_fit, pseudoinverse, svd, ComplexValue, LinearFit, Svd, RANK_TOLERANCE,
};
pub use rng::{mix_seed, sample_normal, sample_uniform, Rng};
pub use tensor::{cosine, dot, norm, softmax_rows, Tensor};
