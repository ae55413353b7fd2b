//! Named, position-addressed random streams.
//!
//! Every consumer of randomness derives its own generator from the master
//! seed plus a fixed tag and coordinates, so no stream depends on how many
//! draws another one made or on the order in which workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Partition = 2,
    TrainTestSplit = 3,
    Init = 4,
    Participation = 5,
    ClientShuffle = 6,
    ClientSynthetic = 7,
    Finetune = 8,
    UniformTest = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `stream` at coordinates `(a, b)`, e.g. `(client, round)`.
pub fn stream(master: u64, stream: Stream, a: u64, b: u64) -> SimRng {
    let mut key = splitmix64(master);
    for part in [stream as u64, a, b] {
        key = splitmix64(key ^ part);
    }
    SimRng::seed_from_u64(key)
}
