//! Counter-based, hierarchically addressed random streams.
//!
//! A [`SeedPath`] names a stream by a master seed plus a list of
//! `(tag, index)` pairs. The path is hashed into a ChaCha key, so the draws
//! for unit `(l, j)` depend only on `(master, l, j, slot)` and never on the
//! order in which units are visited. Coupled experiments rely on this.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    Layer,
    Unit,
    Slot,
    Repetition,
    Input,
    Reference,
    Projection,
}

impl Tag {
    fn code(self) -> u64 {
        match self {
            Tag::Layer => 1,
            Tag::Unit => 2,
            Tag::Slot => 3,
            Tag::Repetition => 4,
            Tag::Input => 5,
            Tag::Reference => 6,
            Tag::Projection => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPath {
    master: u64,
    path: Vec<(Tag, u64)>,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedPath {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            path: Vec::new(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn path(&self) -> &[(Tag, u64)] {
        &self.path
    }

    pub fn child(&self, tag: Tag, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push((tag, index));
        Self {
            master: self.master,
            path,
        }
    }

    pub fn layer(&self, l: usize) -> Self {
        self.child(Tag::Layer, l as u64)
    }

    pub fn unit(&self, j: usize) -> Self {
        self.child(Tag::Unit, j as u64)
    }

    pub fn slot(&self, s: usize) -> Self {
        self.child(Tag::Slot, s as u64)
    }

    pub fn repetition(&self, r: usize) -> Self {
        self.child(Tag::Repetition, r as u64)
    }

    pub fn input(&self, i: usize) -> Self {
        self.child(Tag::Input, i as u64)
    }

    pub fn projection(&self, i: usize) -> Self {
        self.child(Tag::Projection, i as u64)
    }

    pub fn reference(&self, i: usize) -> Self {
        self.child(Tag::Reference, i as u64)
    }

    fn digest(&self) -> u64 {
        let mut h = mix64(self.master.wrapping_add(GOLDEN));
        for &(tag, idx) in &self.path {
            let word = mix64(tag.code().wrapping_mul(GOLDEN) ^ mix64(idx.wrapping_add(GOLDEN)));
            h = mix64(h.rotate_left(17) ^ word);
        }
        h
    }

    /// A 64-bit value derived from the path, usable as a fresh master seed.
    pub fn derive_u64(&self) -> u64 {
        mix64(self.digest() ^ 0xD1B5_4A32_D192_ED03)
    }

    pub fn key(&self) -> [u8; 32] {
        let h = self.digest();
        let mut key = [0u8; 32];
        for (w, chunk) in key.chunks_exact_mut(8).enumerate() {
            let word = mix64(h.wrapping_add((w as u64 + 1).wrapping_mul(GOLDEN)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }
}

/// `n` iid `N(0, std^2)` draws from the stream named by `seed`.
pub fn gaussian_sample(seed: &SeedPath, n: usize, std: f64) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::NegativeScale(std));
    }
    let mut rng = seed.rng();
    Ok((0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect())
}
