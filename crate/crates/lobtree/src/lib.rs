//! Simulation and verification toolkit for a one-sided limit order book.
//!
//! The model: orders sit on the nonnegative integer grid; the price is the
//! highest occupied level. At rate lambda a new order arrives at
//! `max(price + J, 0)` for an integer jump `J <= 1` with `E(J) > 0` and
//! `P(J = 1) > 0`; at rate lambda (while the book is nonempty) the order at
//! the price is removed. Under diffusive rescaling the price converges to a
//! reflected Brownian motion and the book profile flattens to a deterministic
//! density `1/E(J)` below the price.
//!
//! The crate has three layers:
//!
//! * exact simulation of the book and its path functionals ([`sim`],
//!   [`measures`]),
//! * the pathwise correspondence between price excursions and barrier-pruned
//!   critical branching trees with geometric(1/2) offspring ([`tree`]),
//! * Monte Carlo experiments with pass/fail verdicts against closed-form
//!   targets ([`experiments`], [`stats`], [`verify`]).
//!
//! Everything is deterministic given a master seed: replicas get
//! counter-derived ChaCha streams and trees draw their randomness from
//! position-derived keys (see [`rng`]), so lazy and eager tree constructions
//! agree bit for bit.

pub mod experiments;
pub mod measures;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tree;
pub mod verify;
