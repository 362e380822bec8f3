//! Counter-based Gaussian increments.
//!
//! A stream is keyed by `(seed, stream_id)`:
//!
//! ```text
//! key      = mix64(seed ⊕ mix64(stream_id + γ))
//! bits(n)  = mix64(key + (n + 1)·γ)          γ = 0x9E37_79B9_7F4A_7C15
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer (Steele, Lea & Flood 2014). Pair
//! `n` of standard normals is the Box–Muller transform of `bits(2n)` and
//! `bits(2n+1)`. Every draw is a pure function of `(seed, stream_id, n)`, so
//! any position can be regenerated and distinct replicas never share state.
//! Transcendentals come from the `libm` crate, which makes the sequence
//! identical on every platform.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream_id: u64,
    /// Index of the next standard-normal pair.
    pub position: u64,
    /// Multiplier on every increment. 0 gives the zero-noise mode.
    pub scale: f64,
    key: u64,
}

/// Stream `stream_id` of the family keyed by `seed`.
pub fn derive_stream(seed: u64, stream_id: u64) -> NoiseStream {
    NoiseStream {
        seed,
        stream_id,
        position: 0,
        scale: 1.0,
        key: mix64(seed ^ mix64(stream_id.wrapping_add(GAMMA))),
    }
}

impl NoiseStream {
    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale *= factor;
        self
    }

    /// Zero-noise mode: every increment is exactly 0.
    pub fn silent(self) -> Self {
        self.scaled(0.0)
    }

    /// Same stream, rewound to position 0.
    pub fn rewound(&self) -> Self {
        let mut s = self.clone();
        s.position = 0;
        s
    }

    #[inline]
    fn bits(&self, n: u64) -> u64 {
        mix64(self.key.wrapping_add(n.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// Standard-normal pair at counter `index`; does not move the stream.
    pub fn standard_pair_at(&self, index: u64) -> (f64, f64) {
        let b1 = self.bits(2 * index);
        let b2 = self.bits(2 * index + 1);
        // u1 ∈ (0, 1], u2 ∈ [0, 1)
        let u1 = ((b1 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b2 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let (s, c) = libm::sincos(2.0 * std::f64::consts::PI * u2);
        (r * c, r * s)
    }

    pub fn next_standard_pair(&mut self) -> (f64, f64) {
        let p = self.standard_pair_at(self.position);
        self.position += 1;
        p
    }

    /// Brownian increment `(ΔB₁, ΔB₂)` over a step of length `h`, built from
    /// `substeps` consecutive pairs each scaled by √(h/substeps) and summed
    /// in order. A run that subdivides the step into `substeps` pieces and
    /// draws one pair per piece sees the same Brownian path.
    pub fn increment(&mut self, h: f64, substeps: u32) -> (f64, f64) {
        let sub = (h / substeps as f64).sqrt() * self.scale;
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for _ in 0..substeps {
            let (z1, z2) = self.next_standard_pair();
            b1 += sub * z1;
            b2 += sub * z2;
        }
        (b1, b2)
    }
}
