//! Closed-loop collaborative driving over natural-language V2V messages.
//!
//! Each connected vehicle runs a staged reasoning pipeline ([`m3cot`]) against
//! a completion backend ([`backends`]), packages the results into a compact
//! text packet ([`langpack`]), broadcasts it over a range-limited channel
//! ([`comms`]), fuses what it receives into its own frame ([`fusion`]) and
//! turns the final model output into actuation ([`signals`]). The
//! [`world_sim`] module stands in for a full driving simulator and
//! [`metrics`] scores each episode. [`harness`] ties it all together.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod comms;
pub mod fusion;
pub mod harness;
pub mod langpack;
pub mod m3cot;
pub mod metrics;
pub mod signals;
pub mod world_sim;

mod ids;
#[cfg(test)]
pub(crate) mod testutil;

pub use ids::AgentId;
