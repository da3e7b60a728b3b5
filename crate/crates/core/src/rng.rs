//! Deterministic, hierarchically derived random streams.
//!
//! Every source of randomness in the crate is an [`RngStream`]: a ChaCha8
//! generator whose 256-bit seed is a pure function of a root seed and a
//! *path* of integer labels. Components derive child streams for each
//! (repetition, module, purpose) they need, so
//!
//! * results are bit-reproducible from the root seed alone,
//! * parallel execution cannot reorder draws (each worker owns its stream),
//! * adding draws in one component never shifts the sequence seen by another.
//!
//! Path derivation is order sensitive: `root.derive(1).derive(2)` and
//! `root.derive(2).derive(1)` are unrelated streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// One step of the SplitMix64 sequence: advances `state` and returns a
/// well-mixed 64-bit output. Used only for seed derivation, never for draws.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds one path label into the running hash, order sensitively.
fn absorb(h: u64, label: u64) -> u64 {
    let mut s = label ^ 0xA076_1D64_78BD_642F;
    let diffused = splitmix64(&mut s);
    let mut t = h ^ diffused;
    splitmix64(&mut t)
}

/// Expands (root seed, path) into a 256-bit ChaCha seed.
fn seed_material(root_seed: u64, path: &[u64]) -> [u8; 32] {
    let mut h = root_seed;
    h = splitmix64(&mut h);
    for &label in path {
        h = absorb(h, label);
    }
    let mut state = h;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// A named, derivable random stream.
///
/// The stream remembers its root seed and derivation path; [`RngStream::derive`]
/// uses only those (never the generator's current position), so deriving the
/// same child twice yields identical streams regardless of how many draws have
/// been consumed in between.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<u64>,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Creates the root stream for `root_seed` (empty path).
    pub fn root(root_seed: u64) -> Self {
        Self::from_parts(root_seed, Vec::new())
    }

    fn from_parts(root_seed: u64, path: Vec<u64>) -> Self {
        let rng = ChaCha8Rng::from_seed(seed_material(root_seed, &path));
        RngStream {
            root_seed,
            path,
            rng,
        }
    }

    /// Derives the child stream labelled `id`.
    ///
    /// Pure in the stream identity: the child depends only on
    /// `(root_seed, path, id)`, not on draws already made from `self`.
    pub fn derive(&self, id: u64) -> Self {
        let mut path = self.path.clone();
        path.push(id);
        Self::from_parts(self.root_seed, path)
    }

    /// The root seed this stream was derived from.
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    /// The derivation path from the root to this stream.
    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Draws a uniform variate in `[0, 1)`.
    pub fn draw_uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Draws a standard normal variate.
    pub fn draw_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Draws a Bernoulli variate with success probability `p`.
    ///
    /// # Errors
    /// Returns [`Error::InvalidArgument`] if `p` is not a probability.
    pub fn draw_bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid_argument(format!(
                "bernoulli probability must lie in [0, 1], got {p}"
            )));
        }
        Ok(self.draw_uniform() < p)
    }

    /// Draws a full-range `u64`, typically used to seed fold assignment.
    pub fn draw_seed(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Draws a chi-squared variate with `df` degrees of freedom.
    ///
    /// # Errors
    /// Returns [`Error::InvalidArgument`] if `df` is not positive and finite.
    pub fn draw_chi_squared(&mut self, df: f64) -> Result<f64> {
        let dist = rand_distr::ChiSquared::new(df).map_err(|e| {
            Error::invalid_argument(format!("chi-squared degrees of freedom {df}: {e}"))
        })?;
        Ok(dist.sample(&mut self.rng))
    }

    /// Draws a uniform index in `0..n`. Panics if `n == 0`.
    pub fn draw_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "draw_index requires a nonempty range");
        self.rng.random_range(0..n)
    }

    /// Shuffles a slice in place with the Fisher–Yates algorithm.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.draw_index(i + 1);
            xs.swap(i, j);
        }
    }

    /// Samples `k` distinct indices from `0..n` without replacement via a
    /// partial Fisher–Yates pass. Panics if `k > n`.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} items from a pool of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.draw_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_yields_identical_sequences() {
        let mut a = RngStream::root(42).derive(7).derive(3);
        let mut b = RngStream::root(42).derive(7).derive(3);
        for _ in 0..100 {
            assert_eq!(a.draw_uniform().to_bits(), b.draw_uniform().to_bits());
        }
    }

    #[test]
    fn sibling_streams_differ() {
        let root = RngStream::root(42);
        let mut a = root.derive(1);
        let mut b = root.derive(2);
        let draws_a: Vec<u64> = (0..8).map(|_| a.draw_uniform().to_bits()).collect();
        let draws_b: Vec<u64> = (0..8).map(|_| b.draw_uniform().to_bits()).collect();
        assert_ne!(draws_a, draws_b);
    }

    #[test]
    fn derivation_order_matters() {
        let root = RngStream::root(9);
        let mut ab = root.derive(1).derive(2);
        let mut ba = root.derive(2).derive(1);
        assert_ne!(ab.draw_uniform().to_bits(), ba.draw_uniform().to_bits());
    }

    #[test]
    fn derive_ignores_consumed_draws() {
        let mut parent = RngStream::root(5);
        let before = parent.derive(11);
        for _ in 0..37 {
            parent.draw_normal();
        }
        let after = parent.derive(11);
        let mut x = before;
        let mut y = after;
        for _ in 0..16 {
            assert_eq!(x.draw_uniform().to_bits(), y.draw_uniform().to_bits());
        }
    }

    #[test]
    fn path_and_root_seed_are_recorded() {
        let s = RngStream::root(1234).derive(4).derive(9);
        assert_eq!(s.root_seed(), 1234);
        assert_eq!(s.path(), &[4, 9]);
    }

    #[test]
    fn uniform_draws_stay_in_unit_interval_with_correct_mean() {
        let mut s = RngStream::root(2024);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = s.draw_uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "uniform mean drifted: {mean}");
    }

    #[test]
    fn normal_draws_have_standard_moments() {
        let mut s = RngStream::root(77);
        let n = 40_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = s.draw_normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "normal mean drifted: {mean}");
        assert!((var - 1.0).abs() < 0.05, "normal variance drifted: {var}");
    }

    #[test]
    fn bernoulli_rejects_improper_probabilities() {
        let mut s = RngStream::root(1);
        assert!(matches!(
            s.draw_bernoulli(-0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            s.draw_bernoulli(1.5),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            s.draw_bernoulli(f64::NAN),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn bernoulli_frequency_matches_probability() {
        let mut s = RngStream::root(3);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| s.draw_bernoulli(0.2).unwrap())
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.2).abs() < 0.01, "bernoulli rate drifted: {rate}");
    }

    #[test]
    fn degenerate_bernoulli_is_constant() {
        let mut s = RngStream::root(8);
        assert!((0..100).all(|_| s.draw_bernoulli(1.0).unwrap()));
        assert!((0..100).all(|_| !s.draw_bernoulli(0.0).unwrap()));
    }

    #[test]
    fn chi_squared_moments_match_the_degrees_of_freedom() {
        let mut s = RngStream::root(15);
        let n = 20_000;
        let df = 5.0;
        let mean: f64 = (0..n)
            .map(|_| s.draw_chi_squared(df).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - df).abs() < 0.1, "chi-squared mean drifted: {mean}");
        assert!(s.draw_chi_squared(0.0).is_err());
        assert!(s.draw_chi_squared(-1.0).is_err());
    }

    #[test]
    fn shuffle_produces_a_permutation() {
        let mut s = RngStream::root(10);
        let mut xs: Vec<usize> = (0..50).collect();
        s.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn subsampling_yields_distinct_indices_in_range() {
        let mut s = RngStream::root(11);
        for _ in 0..20 {
            let picks = s.sample_without_replacement(40, 17);
            assert_eq!(picks.len(), 17);
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 17, "duplicate index sampled");
            assert!(sorted.iter().all(|&i| i < 40));
        }
    }
}
