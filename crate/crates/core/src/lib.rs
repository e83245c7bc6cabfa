pub mod barycenter;
pub mod dadil;
pub mod datasets;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod gmm;
pub mod io;
pub mod msda;
pub mod online;
pub mod ot;
pub mod simplex;

pub use error::{Error, Result};
