//! Keyed, counter-style random streams.
//!
//! Every random quantity in the lab is drawn from a stream identified by
//! `(master_seed, purpose, a, b, c)`. Streams are independent of evaluation
//! order, so results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The tag is part of the key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Noise,
    Bridge,
    Init,
    Subsample,
    Regularity,
    Statistics,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Noise => 0x6e6f_6973_6500_0001,
            Purpose::Bridge => 0x6272_6964_6765_0002,
            Purpose::Init => 0x696e_6974_0000_0003,
            Purpose::Subsample => 0x7375_6273_6d70_0004,
            Purpose::Regularity => 0x7265_6775_6c72_0005,
            Purpose::Statistics => 0x7374_6174_7300_0006,
            Purpose::Test => 0x7465_7374_0000_0007,
        }
    }
}

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose, a, b)` with sub-stream `c`.
///
/// The four key words are mixed independently, so distinct tuples give
/// distinct ChaCha keys; `c` selects the ChaCha stream id.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let words = [mix64(seed), mix64(purpose.tag()), mix64(a ^ 0x5555_5555_5555_5555), mix64(b ^ 0xaaaa_aaaa_aaaa_aaaa)];
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(c);
    rng
}
