//! Labelled random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose-specific streams. Keeping them apart lets two policies see the
/// same arrivals and service requirements under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Arrivals,
    Services,
    Dispatch,
    Updates,
    Tokens,
}

impl Stream {
    fn label(self) -> u64 {
        match self {
            Stream::Arrivals => 0x6172_7269_7661_6c73,
            Stream::Services => 0x7365_7276_6963_6573,
            Stream::Dispatch => 0x6469_7370_6174_6368,
            Stream::Updates => 0x7570_6461_7465_7300,
            Stream::Tokens => 0x746f_6b65_6e73_0000,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, which: Stream) -> SimRng {
    SimRng::seed_from_u64(splitmix64(seed ^ splitmix64(which.label())))
}

/// Seed of replication `run` under master `seed`.
pub fn replication_seed(seed: u64, run: usize) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(run as u64 + 1)))
}
