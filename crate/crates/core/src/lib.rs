pub mod config;
pub mod diffkit;
pub mod geometry;
pub mod gradsuite;
pub mod grounding;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod recon;
pub mod se_attention;
pub mod synthscene;
