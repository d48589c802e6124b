//! Seeded random stream used for initialization, dropout, and data synthesis.
//!
//! The generator is SplitMix64. Every consumer in this crate draws from it
//! through the helpers below, so a (seed, call sequence) pair fixes every
//! random artifact bit-for-bit, independent of platform.

/// Deterministic random stream with 64 bits of state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// SplitMix64 step.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw on the half-open-at-zero interval (0, 1].
    pub fn next_uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (2f64).powi(-53)
    }

    /// Standard normal via Box-Muller. Each call consumes exactly two
    /// uniforms (in order) and returns the cosine branch; the sine branch is
    /// discarded so the stream state stays a single u64.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n). n must be positive.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle: for i from n-1 down to 1, swap i with
    /// next_index(i + 1).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_evaluated_recurrence() {
        // First outputs for seed 0, evaluated once by hand from the stated
        // recurrence and frozen here.
        let mut rng = RngStream::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        let mut rng = RngStream::new(0);
        assert_eq!(rng.next_uniform(), 0.883_310_808_213_642_7);
        let mut rng = RngStream::new(42);
        assert_eq!(rng.next_uniform(), 0.741_564_878_771_823_4);
    }

    #[test]
    fn box_muller_consumes_two_uniforms_per_normal() {
        let mut rng = RngStream::new(0);
        // sqrt(-2 ln u1) * cos(tau * u2) with (u1, u2) the first two uniforms.
        assert_eq!(rng.next_normal(), -0.452_757_740_217_458_07);
        // The next normal starts from the third uniform.
        assert_eq!(rng.next_normal(), 2.650_605_812_079_669);
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = RngStream::new(9);
        let mut b = RngStream::new(9);
        for _ in 0..100 {
            assert_eq!(a.next_normal(), b.next_normal());
        }
    }

    #[test]
    fn uniforms_lie_in_half_open_unit_interval() {
        let mut rng = RngStream::new(1234);
        for _ in 0..10_000 {
            let u = rng.next_uniform();
            assert!(u > 0.0 && u <= 1.0, "uniform out of (0,1]: {u}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(5);
        let mut items: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(items, (0..50).collect::<Vec<_>>());
    }
}
