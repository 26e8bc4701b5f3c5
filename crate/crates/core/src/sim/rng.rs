//! Counter-based randomness: every draw is a pure function of its key, so any
//! step of any run can be regenerated without replaying the ones before it.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used to fold identifiers into keys.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Uniform in (0, 1].
fn unit(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey(u64);

impl NoiseKey {
    pub fn new(seed: u64, parts: &[&str]) -> Self {
        let folded = parts
            .iter()
            .fold(mix64(seed), |acc, p| mix64(acc ^ fnv1a(p.as_bytes())));
        Self(folded)
    }

    /// Standard normal draw for counter `step` (Box-Muller).
    pub fn standard_normal(self, step: u64) -> f64 {
        let base = mix64(self.0 ^ mix64(step));
        let u1 = unit(mix64(base));
        let u2 = unit(mix64(base ^ 0xa5a5_a5a5_a5a5_a5a5));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform(self, step: u64) -> f64 {
        unit(mix64(self.0 ^ mix64(step)))
    }
}
