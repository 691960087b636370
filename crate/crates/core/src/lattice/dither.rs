use crate::rng::counter_uniform;

use super::generator::{GeneratorMatrix, MAX_DIM};

/// Seeded stream of dither vectors uniform over the basic Voronoi cell.
///
/// Vector `c` of the stream uses uniforms at counter positions
/// `c·L .. c·L + L`, so two streams with the same seed and generator emit the
/// same sequence no matter what other streams do in between.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherStream {
    seed: u64,
    counter: u64,
    gen: GeneratorMatrix,
}

impl DitherStream {
    pub fn new(seed: u64, gen: GeneratorMatrix) -> Self {
        Self { seed, counter: 0, gen }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.gen
    }

    pub fn sample(&mut self) -> Vec<f64> {
        let mut d = vec![0.0; self.gen.dim()];
        self.sample_into(&mut d);
        d
    }

    /// Folds `G·u`, `u ~ U[0,1)^L`, onto the Voronoi cell of the origin by
    /// subtracting its nearest lattice point.
    pub fn sample_into(&mut self, out: &mut [f64]) {
        let dim = self.gen.dim();
        let mut u = [0.0; MAX_DIM];
        let base = self.counter.wrapping_mul(dim as u64);
        for (j, v) in u.iter_mut().enumerate().take(dim) {
            *v = counter_uniform(self.seed, base + j as u64);
        }
        self.counter += 1;
        let mut d0 = [0.0; MAX_DIM];
        self.gen.apply(&u[..dim], &mut d0[..dim]);
        let mut l = [0i64; MAX_DIM];
        self.gen.nearest_point_into(&d0[..dim], &mut l[..dim]);
        let mut z = [0.0; MAX_DIM];
        self.gen.apply_int(&l[..dim], &mut z[..dim]);
        for j in 0..dim {
            out[j] = d0[j] - z[j];
        }
    }

    /// `n` consecutive dithers as one flat buffer.
    pub fn sample_many(&mut self, n: usize) -> Vec<f64> {
        let dim = self.gen.dim();
        let mut out = vec![0.0; n * dim];
        for chunk in out.chunks_exact_mut(dim) {
            self.sample_into(chunk);
        }
        out
    }
}
