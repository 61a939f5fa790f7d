//! Policy-conditioned spatio-temporal world model for monthly state-level overdose mortality.
//!
//! The model encodes each state-month from its graph neighbourhood, conditions it on the
//! knowledge graph of policies in force through a vector-quantised strategy codebook, and
//! forecasts the next months with a Transformer encoder and cross-attention query heads.
//! Once trained it doubles as a simulator for counterfactual policy edits and tree search
//! over policy schedules.

pub mod data;
pub mod error;
pub mod month;
pub mod model;
pub mod params;
pub mod sim;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use month::Month;
