//! DER siting and sizing from Monte Carlo sampled AC-OPF nodal prices.
//!
//! The pipeline: a [`net::NetworkCase`] is solved by [`opf::solve_opf`] at
//! load levels drawn from a clustered [`load::LoadModel`]; [`mcs::run_mcs`]
//! accumulates the nodal multipliers after trial DER placements, and
//! [`placement::run_study`] turns the converged averages into a
//! [`placement::PlacementPlan`].

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod load;
pub mod mcs;
pub mod net;
pub mod opf;
pub mod placement;
