//! Published cost figures for the presets, read from `data/reference.toml`.

use std::collections::BTreeMap;

use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
pub struct ReferenceCost {
    pub flops: f64,
    pub params: f64,
}

const SOURCE: &str = include_str!("../data/reference.toml");

pub fn reference_costs() -> BTreeMap<String, ReferenceCost> {
    toml::from_str(SOURCE).expect("shipped reference table parses")
}

pub fn reference_cost(preset: &str) -> Option<ReferenceCost> {
    reference_costs().get(preset).copied()
}
