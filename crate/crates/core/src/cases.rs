//! IEEE test cases bundled with the crate, in MATPOWER text form.

pub const CASE14: &str = include_str!("../data/case14.m");
pub const CASE30: &str = include_str!("../data/case30.m");
pub const CASE118: &str = include_str!("../data/case118.m");

/// Looks up a bundled case by name (`case14`, `case30`, `case118`).
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "case14" | "ieee14" => Some(CASE14),
        "case30" | "ieee30" => Some(CASE30),
        "case118" | "ieee118" => Some(CASE118),
        _ => None,
    }
}
