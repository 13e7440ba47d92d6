pub mod forge;
pub mod harness;
pub mod probes;
pub mod trainer;
pub mod vit;
