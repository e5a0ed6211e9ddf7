//! Seeded parameter initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `(−bound, bound)`.
pub fn uniform(rng: &mut InitRng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Weight stored as `d_in × d_out`, drawn from `U(−1/√d_in, 1/√d_in)`.
pub fn weight(rng: &mut InitRng, d_in: usize, d_out: usize) -> Tensor {
    uniform(rng, &[d_in, d_out], 1.0 / (d_in.max(1) as f64).sqrt())
}

/// Embedding table `n × d`, drawn from `U(−1/√d, 1/√d)`.
pub fn embedding(rng: &mut InitRng, n: usize, d: usize) -> Tensor {
    uniform(rng, &[n, d], 1.0 / (d.max(1) as f64).sqrt())
}
