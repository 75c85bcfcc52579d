//! Splitmix64 stream: tiny, seedable, and identical on every platform,
//! which is what keeps benchmark runs byte-reproducible.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Unbiased uniform integer in `[lo, hi]` via rejection sampling.
    pub fn uniform_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let range = hi - lo + 1;
        if range == 0 {
            // Full 64-bit range.
            return self.next_u64();
        }
        // 2^64 mod range, computed without overflow.
        let rem = (u64::MAX % range + 1) % range;
        loop {
            let x = self.next_u64();
            if rem == 0 || x <= u64::MAX - rem {
                return lo + x % range;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_stream() {
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
        let mut r = SplitMix64::new(42);
        assert_eq!(r.next_u64(), 0xBDD7_3226_2FEB_6E95);
    }

    #[test]
    fn uniform_stays_in_bounds_and_is_deterministic() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..10_000 {
            let x = a.uniform_inclusive(4096, 8_388_608);
            assert!((4096..=8_388_608).contains(&x));
            assert_eq!(x, b.uniform_inclusive(4096, 8_388_608));
        }
        let mut c = SplitMix64::new(9);
        for _ in 0..100 {
            assert_eq!(c.uniform_inclusive(5, 5), 5);
        }
    }
}
