//! Brute-force oracles for caption metrics, written independently of the main
//! implementations so test comparisons mean something. Everything here favors
//! the most literal possible formulation over speed.

pub mod oracle;
