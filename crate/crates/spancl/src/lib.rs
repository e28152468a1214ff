//! Span-level contrastive training for extractive reading comprehension
//! with unanswerable questions.

pub mod augment;
pub mod autodiff;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod predict;
pub mod seeds;
pub mod spanhead;
pub mod synth;
pub mod textproc;
pub mod training;
