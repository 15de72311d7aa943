//! Counter-based random streams keyed by `(seed, label)`.
//!
//! Draw `i` of a stream is a pure function of `(seed, label, i)`, so rollouts
//! can be computed in any order (or in parallel) and still reproduce exactly.
//! The mixing function is SplitMix64 applied to `key + (i + 1) * GOLDEN`,
//! where `key` hashes the seed together with the label bytes (FNV-1a).

use rand::RngCore;
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn stream_key(seed: u64, label: &str) -> u64 {
    splitmix(splitmix(seed ^ GOLDEN) ^ fnv1a(label.as_bytes()))
}

/// A deterministic stream of 64-bit draws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StreamCursor", into = "StreamCursor")]
pub struct RngStream {
    seed: u64,
    label: String,
    key: u64,
    counter: u64,
}

#[derive(Serialize, Deserialize)]
struct StreamCursor {
    seed: u64,
    stream_label: String,
    index: u64,
}

impl From<StreamCursor> for RngStream {
    fn from(c: StreamCursor) -> Self {
        let mut s = RngStream::derive_stream(c.seed, &c.stream_label);
        s.counter = c.index;
        s
    }
}

impl From<RngStream> for StreamCursor {
    fn from(s: RngStream) -> Self {
        StreamCursor {
            seed: s.seed,
            stream_label: s.label,
            index: s.counter,
        }
    }
}

impl RngStream {
    pub fn derive_stream(seed: u64, label: &str) -> Self {
        RngStream {
            seed,
            label: label.to_string(),
            key: stream_key(seed, label),
            counter: 0,
        }
    }

    /// The same stream with its cursor moved to `index`.
    pub fn at_position(&self, index: u64) -> Self {
        RngStream {
            counter: index,
            ..self.clone()
        }
    }

    /// Child stream labelled `"{self.label}/{sub}"`. Independent of the
    /// parent's cursor position.
    pub fn derive(&self, sub: &str) -> Self {
        RngStream::derive_stream(self.seed, &format!("{}/{}", self.label, sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Value of draw `index`, without moving the cursor.
    pub fn draw_at(&self, index: u64) -> u64 {
        splitmix(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_draw(&mut self) -> u64 {
        let v = self.draw_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_draw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((u128::from(self.next_draw()) * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_draw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_draw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_draw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
