//! Simulation, estimation and verification of the mildly stationary AR(1)
//! model with AR(1) errors.

pub mod estimate;
pub mod harness;
pub mod ledger;
pub mod noise;
pub mod params;
pub mod rates;
pub mod simulate;
pub mod sum;
