//! Counter-based pseudo-random streams.
//!
//! Every consumer (weight init, batch order, dropout masks, shuffles,
//! ensemble members) gets its own stream split off a root seed, so adding a
//! draw in one place never perturbs the values another place sees. Streams
//! are cheap value types: copying one forks the sequence.

/// Weyl increment; any odd 64-bit constant with good bit mixing works, this
/// is the canonical splitmix64 one.
const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Stateless-core random stream: output i is a pure function of (key, i).
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            key: splitmix64(seed),
            counter: 0,
        }
    }

    /// Derives an independent child stream; the parent is not advanced.
    pub fn split(&self, label: u64) -> Self {
        RngStream {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Named split for top-level consumers; hashing the label keeps call
    /// sites readable and collision-resistant.
    pub fn split_label(&self, label: &str) -> Self {
        self.split(fnv1a(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller; always consumes two draws so stream
    /// position stays a pure function of call count.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n) without modulo bias.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range over an empty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_range(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        self.shuffle(&mut perm);
        perm
    }
}
