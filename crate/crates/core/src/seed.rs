//! Seed derivation for independent, reproducible RNG streams.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed for `path` under `master`, e.g. `(config index, repeat)`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(master), |h, &p| mix64(h ^ mix64(p)))
}
