#![allow(dead_code)]

pub mod cases;
pub mod fixtures;
pub mod gradcheck;
pub mod graph_oracle;
