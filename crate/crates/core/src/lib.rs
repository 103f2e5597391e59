//! Membership-inference experiments on small distilled language models.

pub mod analysis;
pub mod attacks;
pub mod corpus;
pub mod model;
pub mod numeric;
pub mod par;
pub mod pipeline;
pub mod training;
