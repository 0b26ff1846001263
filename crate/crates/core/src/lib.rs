//! Few-shot hierarchical text classification with multi-level soft
//! verbalizers, a hierarchy-aware constraint chain and a flat hierarchical
//! contrastive loss.

pub mod config;
pub mod data;
pub mod encoding;
pub mod gradcheck;
pub mod hierarchy;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod synth;
pub mod verbalizer;
