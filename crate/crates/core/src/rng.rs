//! Counter-based deterministic random numbers.
//!
//! Every random draw in the crate is a pure function of a key, so runs
//! replay bit-for-bit: dropout masks are keyed by (seed, layer, step),
//! parameter init by (seed, parameter name), data shuffles by (seed, epoch).
//! The generator is splitmix64 over a keyed counter; no state survives
//! outside the struct.

/// FNV-1a over bytes; stable across platforms, used to turn names into keys.
pub fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a list of key parts into one 64-bit key.
pub fn mix_key(parts: &[u64]) -> u64 {
    let mut k = 0x243f6a8885a308d3u64;
    for &p in parts {
        k = splitmix64(k ^ p);
    }
    k
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key, counter: 0 }
    }

    /// Keyed constructor; identical parts always produce identical streams.
    pub fn keyed(parts: &[u64]) -> Self {
        CounterRng::new(mix_key(parts))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.key ^ splitmix64(self.counter));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in [0, n); n must be nonzero. Modulo bias is irrelevant at the
    /// extents used here (lexicon sizes, grid cells).
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller; draws two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle, deterministic for a given key.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = CounterRng::keyed(&[42, hash_name("drop.enc.0"), 7]);
        let mut b = CounterRng::keyed(&[42, hash_name("drop.enc.0"), 7]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_step_different_stream() {
        let a = CounterRng::keyed(&[42, hash_name("drop.enc.0"), 7]).next_u64();
        let b = CounterRng::keyed(&[42, hash_name("drop.enc.0"), 8]).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut r = CounterRng::new(1);
        for _ in 0..1000 {
            let x = r.uniform(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&x));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = CounterRng::keyed(&[9, 9]);
        let mut xs: Vec<usize> = (0..50).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(xs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn normal_has_sane_moments() {
        let mut r = CounterRng::new(3);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
