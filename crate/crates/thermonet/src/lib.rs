//! Neural constitutive modeling toolkit for short-fiber/nanoparticle-filled
//! epoxy composites at finite deformation.
//!
//! The crate has two halves. The first is a classical finite-strain
//! viscoelastic-viscoplastic damage model ([`oracle`]) together with a
//! quasi-random loading-path generator ([`pathgen`]) that produces labeled
//! stress-strain sequence datasets. The second is a thermodynamically
//! consistent deep-learning constitutive model ([`pidl`]): an LSTM history
//! encoder feeding an internal-variable head and a free-energy network, with
//! stress and dissipation obtained by differentiating the learned free
//! energy ([`autodiff`]). Training with the dissipation penalty and adaptive
//! loss weighting lives in [`training`].

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod nn;
pub mod oracle;
pub mod pathgen;
pub mod pidl;
pub mod tensor;
pub mod training;

pub use tensor::{FiberFrame, Tensor3};
