//! Deterministic random number generation.
//!
//! The generator is xoshiro256** seeded through SplitMix64. The raw
//! `u64` stream is bit-identical for a given seed on every platform;
//! derived f64 draws use the usual 53-bit mantissa construction.
//!
//! Independent streams come from [`Rng::fork`], which derives a child
//! seed from the *construction* seed and a label. Forking therefore does
//! not depend on how many values the parent already produced, which keeps
//! per-component initialization stable across model variants.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a: stable across platforms and releases, unlike the std hasher.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn fnv1a(bytes: &[u8]) -> u64 {
    stable_hash(bytes)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256** generator with a remembered construction seed.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for s in state.iter_mut() {
            *s = splitmix64(&mut sm);
        }
        // xoshiro must not start at the all-zero state
        if state.iter().all(|&s| s == 0) {
            state[0] = 1;
        }
        Rng { state, seed }
    }

    /// Seed this generator was constructed with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by a label.
    pub fn fork(&self, label: &str) -> Rng {
        let mut mix = self.seed ^ fnv1a(label.as_bytes());
        Rng::new(splitmix64(&mut mix))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller; draws two uniforms per pair and
    /// caches the spare.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // No spare cache: always generate a fresh pair and drop the second
        // half. Slightly wasteful, but keeps the stream a pure function of
        // the draw count.
        let mut u1 = self.next_f64();
        if u1 <= f64::MIN_POSITIVE {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)` via rejection sampling (unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 4);
    }

    #[test]
    fn fork_is_independent_of_draw_count() {
        let mut a = Rng::new(7);
        let b = Rng::new(7);
        for _ in 0..100 {
            a.next_u64();
        }
        let mut fa = a.fork("child");
        let mut fb = b.fork("child");
        for _ in 0..100 {
            assert_eq!(fa.next_u64(), fb.next_u64());
        }
    }

    #[test]
    fn fork_labels_give_distinct_streams() {
        let root = Rng::new(3);
        let mut x = root.fork("a");
        let mut y = root.fork("b");
        assert_ne!(x.next_u64(), y.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let v = rng.uniform(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = Rng::new(5);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(9);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
