//! Counter-based random streams: every consumer derives its own ChaCha12
//! generator from `(seed, sample_index, epoch)`, so draws never depend on
//! batch order, thread count, or how much randomness other code consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One step of splitmix64; the standard seed-expansion finalizer.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a named sub-seed from a root seed. Used to split the root seed
/// into independent streams (dataset, init, degrade, protocol, shuffle).
pub fn derive_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded into the root, then finalized.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut state = root ^ h;
    splitmix64(&mut state)
}

/// Key of a counter-based stream: the generator it produces is a pure
/// function of these three values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub sample_index: u64,
    pub epoch: u64,
}

impl StreamKey {
    pub fn new(seed: u64, sample_index: u64, epoch: u64) -> Self {
        StreamKey { seed, sample_index, epoch }
    }

    /// A fresh generator for this key. Identical keys yield identical draw
    /// sequences; any differing component yields an unrelated sequence.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut state = self.seed;
        let mut mixed = splitmix64(&mut state);
        state ^= self.sample_index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        mixed ^= splitmix64(&mut state);
        state ^= self.epoch.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        mixed ^= splitmix64(&mut state);

        let mut key = [0u8; 32];
        let mut s = mixed;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        let mut rng = ChaCha12Rng::from_seed(key);
        // Distinct ChaCha stream per sample as a second layer of separation.
        rng.set_stream(self.sample_index);
        rng
    }
}
