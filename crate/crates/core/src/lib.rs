pub mod audio;
pub mod augment;
pub mod e2e;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod siamese;
pub mod vsm;

pub use error::{Error, Result};
pub use scalar::Real;

/// Seedable 64-bit generator used for every stochastic stage.
pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    rand::SeedableRng::seed_from_u64(seed)
}

pub type WaveformF64 = audio::Waveform<f64>;
pub type FeatureMatrixF64 = audio::FeatureMatrix<f64>;
pub type FeatureExtractorF64 = audio::FeatureExtractor<f64>;
pub type E2eModelF64 = e2e::E2eModel<f64>;
pub type ExampleF64 = e2e::Example<f64>;
pub type SiameseModelF64 = siamese::SiameseModel<f64>;
pub type RepresentativeVectorF64 = vsm::RepresentativeVector<f64>;
