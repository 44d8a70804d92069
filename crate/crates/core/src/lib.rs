//! Probabilistic dynamic OD demand estimation on a differentiable traffic simulator.
//!
//! The pipeline samples OD demand from a Gaussian PDOD, routes it with a logit model,
//! loads it with a point-queue DNL, and compares simulated link-flow statistics with
//! observed ones. Gradients flow back through the DAR matrix and the route-choice shares
//! to the PDOD mean and standard deviation.

pub mod behavior;
pub mod demand;
pub mod distance;
pub mod dnl;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod io;
pub mod net;
pub mod obs;
pub mod sparse;

pub use demand::{Pdod, SIGMA_MIN};
pub use dnl::{run_dnl, DnlOptions, DnlResult, Loader};
pub use error::{Error, Result};
pub use obs::ObservationSet;
pub use net::{enumerate_paths, load_network, Entity, Layout, Network, PathTable, TimeGrid};
