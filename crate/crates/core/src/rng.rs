//! Deterministic RNG streams. Every random choice in the simulator draws
//! from a stream derived as (master seed, purpose tag, indices...), so
//! clients, rounds, and tools never share or race a generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independently-seeded streams apart.
pub mod stream {
    pub const DATA_SYNTH: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const INIT_PARAMS: u64 = 0x03;
    pub const SELECT: u64 = 0x04;
    pub const CLIENT_TRAIN: u64 = 0x05;
    pub const INSPECTION: u64 = 0x06;
    pub const PROBE_SPLIT: u64 = 0x07;
    pub const POISON: u64 = 0x08;
    pub const DEFENSE_NOISE: u64 = 0x09;
    pub const SERVER_TRAIN: u64 = 0x0a;
    pub const GAP_SAMPLE: u64 = 0x0b;
    pub const OOD: u64 = 0x0c;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a list of tags into one 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545_f491_4f6c_dd1d);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Build a ChaCha8 stream for (master, tags).
pub fn stream_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Standard normal sample via Box-Muller.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    // Avoid ln(0).
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    crate::math::sqrt(-2.0 * crate::math::ln(u1))
        * crate::math::cos(2.0 * core::f64::consts::PI * u2)
}
