//! Deterministic, splittable random streams.
//!
//! A [`RngStream`] is a ChaCha20 keystream. Child streams are derived by
//! hashing the parent key together with a text label, so the child depends
//! only on `(root seed, label path)` and never on how many values the parent
//! has already produced.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u8; 32],
    label: String,
    inner: ChaCha20Rng,
}

impl RngStream {
    /// Root stream for a 64-bit experiment seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"bm2/root");
        hasher.update(seed.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self { key, label: String::new(), inner: ChaCha20Rng::from_seed(key) }
    }

    /// Derives an independent substream. The parent is not advanced.
    pub fn split(&self, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let label = if self.label.is_empty() {
            label.to_owned()
        } else {
            format!("{}/{}", self.label, label)
        };
        Self { key, label, inner: ChaCha20Rng::from_seed(key) }
    }

    /// Substream indexed by an integer, e.g. a training step.
    pub fn split_indexed(&self, label: &str, index: u64) -> Self {
        self.split(&format!("{label}#{index}"))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::from_seed(42);
        let mut b = RngStream::from_seed(42);
        assert_eq!(draws(&mut a, 16), draws(&mut b, 16));
    }

    #[test]
    fn distinct_labels_differ() {
        let root = RngStream::from_seed(1);
        let mut a = root.split("a");
        let mut b = root.split("b");
        assert_ne!(a.normal(), b.normal());
    }

    #[test]
    fn split_twice_is_identical() {
        let root = RngStream::from_seed(1);
        let mut a1 = root.split("a");
        let mut a2 = root.split("a");
        assert_eq!(draws(&mut a1, 8), draws(&mut a2, 8));
    }

    #[test]
    fn split_does_not_depend_on_parent_position() {
        let mut root = RngStream::from_seed(9);
        let mut before = root.split("child");
        let _ = draws(&mut root, 100);
        let mut after = root.split("child");
        assert_eq!(draws(&mut before, 8), draws(&mut after, 8));
    }

    #[test]
    fn child_draws_leave_parent_unaffected() {
        let mut p1 = RngStream::from_seed(5);
        let mut p2 = RngStream::from_seed(5);
        let mut child = p1.split("x");
        let _ = draws(&mut child, 50);
        assert_eq!(draws(&mut p1, 8), draws(&mut p2, 8));
    }

    #[test]
    fn labels_compose() {
        let root = RngStream::from_seed(0);
        assert_eq!(root.split("a").split("b").label(), "a/b");
    }
}
