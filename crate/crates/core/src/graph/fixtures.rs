//! Fixture networks shipped with the crate. Both take `1x3x256x256` input,
//! predict 6 classes, and share the neck wiring and backbone output widths.

/// HG stem, ghost HG stages with ghost-conv downsampling, SPPF, C2f-Faster
/// neck, grouped-conv detect head.
pub const IMPROVED_LITE: &str = include_str!("../../fixtures/improved-lite.json");

/// Strided conv downsampling, C2f stages and neck, SPPF, dense detect head.
pub const BASELINE_LITE: &str = include_str!("../../fixtures/baseline-lite.json");
