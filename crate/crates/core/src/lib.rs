//! Multi-agent driving simulation, domain randomization and PPO training for
//! small-scale autonomous vehicles.

pub mod checkpoint;
pub mod coop;
pub mod curiosity;
pub mod demo;
pub mod error;
pub mod eval;
pub mod fgm;
pub mod gail;
pub mod geometry;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod race;
pub mod randomization;
pub mod replica;
pub mod train;
pub mod vehicle;
pub mod world;

/// Deterministic stream used throughout the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Derive an independent seed for a (master, stream, index) triple.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded stream for `(master, stream, index)`.
pub fn rng_for(master: u64, stream: u64, index: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(derive_seed(master, stream, index))
}
