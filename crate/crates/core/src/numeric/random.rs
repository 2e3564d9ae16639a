use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::Matrix;
use crate::error::{Error, Result};

/// Stream identifiers. Each consumer of randomness owns a distinct stream so
/// results do not depend on scheduling order.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const ENCODERS: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SERVER: u64 = 4;
    pub const SERVER_INIT: u64 = 5;
    pub const MIA: u64 = 6;

    const CLIENT_BASE: u64 = 1 << 20;

    pub fn client_train(id: usize) -> u64 {
        CLIENT_BASE + 4 * id as u64
    }

    pub fn client_init(id: usize) -> u64 {
        CLIENT_BASE + 4 * id as u64 + 1
    }

    pub fn client_eval(id: usize) -> u64 {
        CLIENT_BASE + 4 * id as u64 + 2
    }
}

/// A seeded ChaCha20 stream. Identical `(seed, stream_id)` pairs yield
/// identical sequences on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Draw from Gamma(shape, 1).
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = Gamma::new(shape, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.rng))
    }

    /// Samples `k` distinct indices from `0..n` in random order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }
}

/// i.i.d. N(0, sigma²) entries. `sigma = 0` returns the zero matrix without
/// consuming randomness.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| sigma * rng.standard_normal()))
}
