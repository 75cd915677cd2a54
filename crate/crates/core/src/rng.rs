//! Seeded random streams.
//!
//! Every draw comes from xoshiro256++ (256-bit state, 64-bit output). A
//! stream is identified by `(seed, epoch, purpose, round)`; the four values
//! are folded into one 64-bit key which seeds the generator through
//! SplitMix64 (`SeedableRng::seed_from_u64`). Normal deviates use the cosine
//! branch of Box–Muller on two 53-bit uniforms, one deviate per pair, so the
//! sequence can be reproduced in any language with the same three
//! primitives.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Drift = 1,
    Profile = 2,
    Checkpoint = 3,
}

pub fn stream_key(seed: u64, epoch: u32, purpose: Purpose, round: u32) -> u64 {
    let mut k = seed;
    k ^= (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    k = k.rotate_left(23);
    k ^= (purpose as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    k = k.rotate_left(17);
    k ^ (round as u64).wrapping_mul(0x94d0_49bb_1331_11eb)
}

#[derive(Debug, Clone)]
pub struct Stream(Xoshiro256PlusPlus);

impl Stream {
    pub fn new(seed: u64, epoch: u32, purpose: Purpose, round: u32) -> Self {
        Stream(Xoshiro256PlusPlus::seed_from_u64(stream_key(seed, epoch, purpose, round)))
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `exp(N(0, sigma^2))`; exactly 1 when sigma is 0, without consuming
    /// any draws.
    pub fn lognormal(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            1.0
        } else {
            (sigma * self.normal()).exp()
        }
    }
}
