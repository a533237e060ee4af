//! SE-PyramidNet construction, the pyramidal width law and network splitting.

pub mod build;
pub mod config;
pub mod graph;

pub use build::{build_model, build_unit, split_model, split_plan, SplitPlan};
pub use config::{fmd, se_width, PyramidConfig};
pub use graph::{GraphRole, LayerSite, ModelGraph, NamedLayer, Node, PyramidUnit, Tape};
