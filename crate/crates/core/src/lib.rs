//! Planar conductivity reconstruction from Dirichlet-to-Neumann data.
//!
//! The pipeline runs boundary data through four stages:
//! CGO boundary traces ([`cgo`]), the scattering transform ([`scatter`]),
//! a ∂̄ solve in the spectral plane ([`dbar`]) and pointwise recovery of the
//! conductivity ([`recon`]). Forward data for synthetic phantoms comes from
//! [`dtn`]; [`pipeline`] strings the stages together with persistence.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod cgo;
pub mod dbar;
pub mod dtn;
pub mod error;
pub mod fem;
pub mod gmres;
pub mod io;
mod fourier;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod scatter;

pub use error::{Error, Result};
