//! Fixtures shared by the benchmarks.

use crossmodal_core::alignment::{ClassVocabulary, Split};
use crossmodal_core::scenegen::{generate_scene, NoiseModel, SceneSpec, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn vocabulary() -> ClassVocabulary {
    ClassVocabulary::new(&[
        ("ground", Split::Base),
        ("box-a", Split::Base),
        ("cylinder-a", Split::Base),
        ("box-b", Split::Novel),
        ("cylinder-b", Split::Novel),
    ])
    .expect("valid vocabulary")
}

/// One scene at the reference benchmark size.
pub fn reference_scene(seed: u64) -> SyntheticScene {
    generate_scene(&SceneSpec::default(), &NoiseModel::default(), &vocabulary(), seed).expect("scene generates")
}

/// Seeded uniform values in [-1, 1).
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
