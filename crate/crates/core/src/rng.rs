//! Reproducible random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream addressed by
//! `(base_seed, domain, index)`. The key is derived from the base seed and the
//! domain by SplitMix64 mixing, and the index selects the ChaCha stream, so a
//! trial's draws depend only on its address and never on scheduling.
//!
//! Normal variates always come from `rand_distr::StandardNormal` (ziggurat).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type SbcRng = ChaCha8Rng;

/// Stream domains. Keeping them distinct lets the marginalisation check draw
/// hyperparameter initializations without perturbing the SBC pipeline draws.
pub mod domain {
    pub const TRIAL: u64 = 0;
    pub const HYPER_INIT: u64 = 1;
    pub const PROLOGUE: u64 = 2;
    pub const MC_NULL: u64 = 3;
    pub const ECDF_BAND: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(base_seed, domain, index)`.
pub fn stream(base_seed: u64, domain: u64, index: u64) -> SbcRng {
    let key =
        splitmix64(splitmix64(base_seed) ^ splitmix64(domain.wrapping_add(0xD1B5_4A32_D192_ED03)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Stream used by SBC trial `trial_index`.
pub fn trial_stream(base_seed: u64, trial_index: u64) -> SbcRng {
    stream(base_seed, domain::TRIAL, trial_index)
}
