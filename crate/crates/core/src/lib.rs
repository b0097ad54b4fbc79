//! Long-term hydrothermal bid-based market simulator.
//!
//! Core pieces: a physical system description ([`system`]), scenario
//! generation for inflows and renewables ([`scenario`]), a dense LP kernel
//! with dual values ([`lp`]), a multi-stage stochastic LP engine with
//! Benders cuts and a Markov lattice ([`sddp`]), stage-problem builders for
//! centralized dispatch and single-agent bidding ([`dispatch`]), market
//! clearing and strategic revenue curves ([`market`]), Markov chain
//! estimation from scenario data ([`markov`]), and the multi-agent
//! equilibrium loop ([`equilibrium`]).

pub mod cli;
pub mod dispatch;
pub mod equilibrium;
pub mod io;
pub mod lp;
pub mod market;
pub mod markov;
pub mod scenario;
pub mod sddp;
pub mod system;
