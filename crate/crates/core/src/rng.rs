//! Named, independently reproducible random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream `index` of the sub-generator `name` under `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the name, folded into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(index);
    rng
}
