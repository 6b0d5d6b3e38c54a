//! Hierarchical seed derivation so every scene and stage can be reproduced
//! on its own.

/// One round of the splitmix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` under `master`: the mixed master seed XOR the index.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    splitmix64(master) ^ index
}

/// Independent stream for a named stage (`salt`) of one master seed.
pub fn stage_seed(master: u64, salt: &str) -> u64 {
    salt.bytes()
        .fold(splitmix64(master ^ 0x5057_5354), |acc, b| splitmix64(acc ^ u64::from(b)))
}
