pub mod dirichlet;
pub mod error;
pub mod gammadiag;
pub mod grid;
pub mod integrand;
pub mod lbfgs;
pub mod matrix;
pub mod oracle;
pub mod homogenize;
pub mod relax;
pub mod schedule;
pub mod setfn;
pub mod verify;

pub use error::{Error, Result};
