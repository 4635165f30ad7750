//! Seeded random streams.
//!
//! All randomness goes through ChaCha20 seeded from a 64-bit seed. Gaussian
//! draws use the Box-Muller transform on the generator's uniform stream, so a
//! given seed yields the same parameters on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Offsets separating independent streams derived from one user seed.
pub const INIT_STREAM: u64 = 0x0000_0000_0000_0000;
pub const BATCH_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
pub const DATA_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { rng: ChaCha20Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
