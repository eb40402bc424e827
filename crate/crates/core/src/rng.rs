//! Deterministic pseudo-random streams with seed splitting.
//!
//! Every random decision in the crate flows from one 64-bit base seed.
//! Purpose-tagged streams are derived with [`derive_seed`] so that, for
//! example, dataset generation and weight initialization never share a
//! stream even when they share the base seed. The generator state is
//! xoshiro256++ seeded through SplitMix64; outputs are identical across
//! runs and platforms for the integer path.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(tag: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for `(tag, index)` from a base seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut s = base ^ fnv1a(tag);
    let a = splitmix64(&mut s);
    s ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let b = splitmix64(&mut s);
    a ^ b.rotate_left(17)
}

/// Seeded xoshiro256++ stream with normal sampling.
#[derive(Clone, Debug)]
pub struct Prng {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Prng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        // xoshiro must not start in the all-zero state
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Self {
            s,
            spare_normal: None,
        }
    }

    /// Stream for a tagged purpose, e.g. `Prng::stream(seed, "image", 42)`.
    pub fn stream(base: u64, tag: &str, index: u64) -> Self {
        Self::from_seed(derive_seed(base, tag, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = (self.s[0].wrapping_add(self.s[3]))
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Panics if n is zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // fixed-point multiply; bias is negligible for the ranges used here
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Uniform integer in the inclusive range [lo, hi].
    pub fn range_u32(&mut self, lo: u32, hi: u32) -> u32 {
        assert!(lo <= hi);
        lo + self.below(u64::from(hi - lo) + 1) as u32
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
