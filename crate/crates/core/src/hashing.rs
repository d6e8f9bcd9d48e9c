//! Stable hashes used for feature hashing, transcript keys and template selection.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over `seed.to_le_bytes() ++ domain ++ 0x00 ++ bytes`.
pub fn fnv1a64(seed: u64, domain: &str, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    };
    seed.to_le_bytes().into_iter().for_each(&mut eat);
    domain.bytes().for_each(&mut eat);
    eat(0);
    bytes.iter().copied().for_each(&mut eat);
    h
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an RGB raster: width and height as little-endian u32 followed by
/// the raw interleaved RGB bytes.
pub fn image_hash(image: &image::RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

/// Picks an index in `0..n` from a case identifier: the first eight bytes of
/// `sha256(case_id)` read big-endian, modulo `n`.
pub fn stable_index(case_id: &str, n: usize) -> usize {
    assert!(n > 0);
    let d = Sha256::digest(case_id.as_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&d[..8]);
    (u64::from_be_bytes(first) % n as u64) as usize
}
