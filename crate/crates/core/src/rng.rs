//! Counter-based random generation.
//!
//! Each call that fills a tensor claims a fresh ChaCha stream; the tensor is
//! filled in fixed-size chunks and every chunk seeks to its own block in
//! that stream. The output therefore depends only on `(seed, call index,
//! element index)` and never on how chunks are spread over workers.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor4D};

const CHUNK: usize = 4096;
// Generous word budget per element so that rejection sampling in the normal
// sampler never runs into the next chunk.
const WORDS_PER_CHUNK: u128 = (CHUNK as u128) * 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    stream: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, stream: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn next_stream(&mut self) -> u64 {
        let s = self.stream;
        self.stream += 1;
        s
    }

    fn chunk_rng(&self, stream: u64, chunk: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r.set_word_pos(WORDS_PER_CHUNK * chunk as u128);
        r
    }

    fn fill<T: Real>(&mut self, len: usize, sample: impl Fn(&mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
        let stream = self.next_stream();
        let mut out = vec![T::zero(); len];
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(j, chunk)| {
            let mut r = self.chunk_rng(stream, j);
            for v in chunk {
                *v = sample(&mut r);
            }
        });
        out
    }

    /// Uniform values in `[lo, hi)`.
    pub fn uniform_vec<T: Real>(&mut self, len: usize, lo: f64, hi: f64) -> Result<Vec<T>> {
        if !(lo < hi) {
            return Err(Error::InvalidRange { lo, hi });
        }
        let below_hi = T::cast_from(hi).as_f64();
        Ok(self.fill(len, |r| {
            let u = (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let v = T::cast_from(lo + (hi - lo) * u);
            // Rounding to a narrower type can land exactly on `hi`.
            if v.as_f64() >= below_hi {
                T::cast_from(lo.max(next_down(below_hi)))
            } else {
                v
            }
        }))
    }

    pub fn normal_vec<T: Real>(&mut self, len: usize, mean: f64, sd: f64) -> Vec<T> {
        self.fill(len, |r| {
            let z: f64 = r.sample(StandardNormal);
            T::cast_from(mean + sd * z)
        })
    }

    pub fn uniform<T: Real>(&mut self, dims: impl Into<Dims>, lo: f64, hi: f64) -> Result<Tensor4D<T>> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        Tensor4D::from_vec(dims, self.uniform_vec(len, lo, hi)?)
    }

    pub fn normal<T: Real>(&mut self, dims: impl Into<Dims>) -> Result<Tensor4D<T>> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        Tensor4D::from_vec(dims, self.normal_vec(len, 0.0, 1.0))
    }
}

fn next_down(x: f64) -> f64 {
    // Works for the f32 values produced above: step one f32 ulp toward -inf.
    let f = x as f32;
    let bits = f.to_bits();
    let prev = if f > 0.0 {
        f32::from_bits(bits - 1)
    } else if f == 0.0 {
        -f32::from_bits(1)
    } else {
        f32::from_bits(bits + 1)
    };
    prev as f64
}

/// Uniformly random tensor in `[lo, hi)`.
pub fn tensor_random<T: Real>(dims: impl Into<Dims>, rng: &mut Rng, lo: f64, hi: f64) -> Result<Tensor4D<T>> {
    rng.uniform(dims, lo, hi)
}
