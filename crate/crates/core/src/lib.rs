//! Localization of language-agnostic knowledge neurons in the feed-forward
//! layers of small transformer language models.

// `!(x > y)` also rejects NaN; index loops mirror the math
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod intervention;
pub mod model;
pub mod tensor;
pub mod uncertainty;

pub use error::{LaknError, Result};
