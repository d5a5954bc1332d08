//! Keyed random streams.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from a global seed plus a key (bag id, epoch, pair index, ...). Work can
//! then be reordered or spread over threads without changing any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// One component of a stream key.
#[derive(Debug, Clone, Copy)]
pub enum KeyPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for KeyPart<'a> {
    fn from(s: &'a str) -> Self {
        KeyPart::Str(s)
    }
}

impl From<u64> for KeyPart<'_> {
    fn from(v: u64) -> Self {
        KeyPart::Int(v)
    }
}

impl From<usize> for KeyPart<'_> {
    fn from(v: usize) -> Self {
        KeyPart::Int(v as u64)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
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

/// Derive an independent stream from `seed` and a key path.
pub fn stream(seed: u64, key: &[KeyPart<'_>]) -> StreamRng {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for part in key {
        // Tag each part so ("ab", "c") and ("a", "bc") differ.
        match part {
            KeyPart::Str(s) => {
                h = fnv1a(h, &[0x01]);
                h = fnv1a(h, &(s.len() as u64).to_le_bytes());
                h = fnv1a(h, s.as_bytes());
            }
            KeyPart::Int(v) => {
                h = fnv1a(h, &[0x02]);
                h = fnv1a(h, &v.to_le_bytes());
            }
        }
    }
    let mut state = h ^ seed.rotate_left(17);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
