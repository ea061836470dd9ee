//! Bit-level fingerprints of parameter sets.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use dbvae::models::EncoderParams;

pub fn encoder(enc: &EncoderParams) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in enc.tensors() {
        h.write(name.as_bytes());
        for v in t.data() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}
