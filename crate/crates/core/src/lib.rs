//! Vertical federated learning simulation and contribution valuation.
//!
//! Clients hold disjoint feature blocks of the same samples and train linear
//! models whose per-sample embeddings are summed by a server holding the
//! labels. Training runs either synchronously ([`fedsgd`]) or as an
//! asynchronous discrete-event simulation ([`vafl`]). The per-round Shapley
//! valuation of clients lives in [`shapley`]; in the synchronous regime the
//! unobserved embeddings are first recovered by low-rank [`completion`].

pub mod completion;
pub mod data;
pub mod error;
pub mod fedsgd;
pub mod history;
pub mod model;
pub mod shapley;
pub mod trace_io;
pub mod vafl;

pub use error::{Error, Result};
