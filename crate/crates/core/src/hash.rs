//! Key hashing.
//!
//! Bucket placement uses 64-bit FNV-1a reduced modulo the bucket count. Shard
//! placement uses a seeded variant so that the two levels are not correlated:
//! FNV-1a reduced mod 256 and mod 64 share their low bits.

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Index of the bucket `key` belongs to.
pub fn hash_key(key: &[u8], num_buckets: u32) -> u32 {
    assert!(num_buckets >= 1, "num_buckets must be positive");
    (fnv1a64(key) % u64::from(num_buckets)) as u32
}

/// FNV-1a, xored with `seed` and passed through the murmur3 64-bit finalizer.
pub fn hash_key_seeded(key: &[u8], modulus: u32, seed: u64) -> u32 {
    assert!(modulus >= 1, "modulus must be positive");
    (fmix64(fnv1a64(key) ^ seed) % u64::from(modulus)) as u32
}

fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}
