//! Fixtures shared by the benchmarks.

use poredit::lbm::percolates;
use poredit::network::{ModelConfig, PoreDiT};
use poredit::volume::{synth_grf, BinaryVolume, SynthSpec};

/// Desk-sized GRF volume.
pub fn grf(size: usize, porosity: f64, seed: u64) -> BinaryVolume {
    synth_grf(&SynthSpec {
        size,
        porosity,
        corr_len: 3.0,
        seed,
    })
    .expect("valid synth spec")
}

/// First volume of a seed sequence that percolates along z.
pub fn percolating_grf(size: usize, porosity: f64) -> BinaryVolume {
    (0..64)
        .map(|s| grf(size, porosity, 7919 + s))
        .find(|v| percolates(v, 0))
        .expect("a percolating volume")
}

pub fn desk_model() -> PoreDiT {
    PoreDiT::new(ModelConfig::default(), 0).expect("default config is valid")
}

pub fn tokens(n: usize, c: usize) -> Vec<f64> {
    (0..n * c).map(|i| ((i as f64 + 0.5) * 0.618).sin()).collect()
}
