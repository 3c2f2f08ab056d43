//! Deterministic 64-bit differentiable computation: dense arrays, taped
//! forward operators with reverse-mode gradients, finite-difference checks,
//! Adadelta and a flat checkpoint format.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod selfcheck;
pub mod tape;

pub use array::DenseArray;
pub use error::{NumError, Result};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use nn::{gru_step, Gru, Linear};
pub use optim::Adadelta;
pub use params::{Init, ParamId, ParamStore, TrainableParam};
pub use tape::{sigmoid, Activation, DropoutMode, Gradients, LossKind, Tape, Var};

/// Deterministic generator used throughout for reproducible runs.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeededRng`] from a seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Derives an independent child seed, e.g. one per patient or per epoch.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
