//! Deterministic, splittable pseudo-random streams.
//!
//! Every stream is derived from a key tuple rather than by jumping ahead in
//! one global sequence. The engine keys each transition by
//! `(root_seed, chain, phase, iteration)`, so the variates a step consumes do
//! not depend on scheduling or on how many variates earlier steps drew:
//! a cross-chain barrier can never reorder variate consumption.
//!
//! The generator itself is the SplitMix64 counter sequence; the key tuple is
//! hashed into the starting counter.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer (Stafford mix 13).
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags used when deriving per-step keys.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const WARMUP: u64 = 0x02;
    pub const SAMPLING: u64 = 0x03;
    pub const ORACLE: u64 = 0x04;
}

/// A counter-based random stream identified by its key.
#[derive(Clone, Debug)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    /// Derives a stream from a key tuple. Identical tuples yield identical
    /// streams; distinct tuples yield statistically independent ones.
    pub fn from_key(parts: &[u64]) -> Self {
        // pi fractional bits as the initial sponge state
        let mut h: u64 = 0x243f_6a88_85a3_08d3;
        for &p in parts {
            h = mix(h.wrapping_add(GOLDEN).wrapping_add(p));
        }
        StreamRng { state: h }
    }

    /// Stream for one transition of one chain.
    pub fn for_step(root_seed: u64, chain: u64, phase: u64, iteration: u64) -> Self {
        Self::from_key(&[root_seed, chain, phase, iteration])
    }

    /// The derived key, recorded in per-chain metadata.
    pub fn key(&self) -> u64 {
        self.state
    }
}

impl RngCore for StreamRng {
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        rand::rand_core::impls::fill_bytes_via_next(self, dest)
    }
}

/// Per-chain master stream: deterministic in `(root_seed, chain_index)`.
pub fn derive_chain_rng(root_seed: u64, chain_index: u64) -> StreamRng {
    StreamRng::from_key(&[root_seed, chain_index])
}
