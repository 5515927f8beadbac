use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ids::{NodeId, SliceNetId};

/// Identifies an independent random stream: owning module plus an optional
/// slice and node scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamKey {
    pub module: &'static str,
    pub slice: Option<SliceNetId>,
    pub node: Option<NodeId>,
}

impl StreamKey {
    pub fn slice(module: &'static str, slice: SliceNetId) -> Self {
        StreamKey {
            module,
            slice: Some(slice),
            node: None,
        }
    }

    pub fn node(module: &'static str, node: NodeId) -> Self {
        StreamKey {
            module,
            slice: None,
            node: Some(node),
        }
    }

    pub fn slice_at(module: &'static str, slice: Option<SliceNetId>, node: NodeId) -> Self {
        StreamKey {
            module,
            slice,
            node: Some(node),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.module.len() + 16);
        out.extend_from_slice(self.module.as_bytes());
        out.push(0xff);
        match self.slice {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.0.to_le_bytes());
            }
            None => out.push(0),
        }
        match self.node {
            Some(n) => {
                out.push(1);
                out.extend_from_slice(&n.0.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable across platforms and toolchains; do not swap for `DefaultHasher`.
pub fn derive_seed(master_seed: u64, key: &StreamKey) -> u64 {
    splitmix64(master_seed ^ splitmix64(fnv1a(&key.encode())))
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: StreamKey,
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, key: StreamKey) -> Self {
        let seed = derive_seed(master_seed, &key);
        RngStream {
            key,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Lazily created registry of streams keyed by `StreamKey`.
#[derive(Debug, Clone)]
pub struct RngStreams {
    master_seed: u64,
    streams: BTreeMap<StreamKey, RngStream>,
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        RngStreams {
            master_seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn rng_for(&mut self, key: StreamKey) -> &mut RngStream {
        let seed = self.master_seed;
        self.streams
            .entry(key)
            .or_insert_with(|| RngStream::new(seed, key))
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(rng: &mut impl Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.gen()).collect()
    }

    #[test]
    fn same_key_returns_same_container() {
        let mut reg = RngStreams::new(1);
        let key = StreamKey::slice("rach", SliceNetId(1));
        let first = reg.rng_for(key).next_u64();
        // Second lookup continues the stream rather than restarting it.
        let second = reg.rng_for(key).next_u64();
        assert_ne!(first, second);
        assert_eq!(reg.len(), 1);
        let mut fresh = RngStream::new(1, key);
        assert_eq!(fresh.next_u64(), first);
        assert_eq!(fresh.next_u64(), second);
    }

    #[test]
    fn distinct_slices_differ() {
        let mut reg = RngStreams::new(99);
        let a = draws(reg.rng_for(StreamKey::slice("rach", SliceNetId(1))), 100);
        let b = draws(reg.rng_for(StreamKey::slice("rach", SliceNetId(2))), 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn master_seed_changes_first_draw() {
        let key = StreamKey::slice("rach", SliceNetId(1));
        let a = RngStream::new(1, key).next_u64();
        let b = RngStream::new(2, key).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn draws_on_one_stream_leave_others_untouched() {
        let ka = StreamKey::slice("rach", SliceNetId(1));
        let kb = StreamKey::slice("rach", SliceNetId(2));
        let mut quiet = RngStreams::new(5);
        let baseline = draws(quiet.rng_for(kb), 50);

        let mut busy = RngStreams::new(5);
        draws(busy.rng_for(ka), 10_000);
        assert_eq!(draws(busy.rng_for(kb), 50), baseline);
    }

    #[test]
    fn node_and_slice_scopes_are_distinct() {
        let s = derive_seed(3, &StreamKey::slice("x", SliceNetId(4)));
        let n = derive_seed(3, &StreamKey::node("x", NodeId(4)));
        assert_ne!(s, n);
    }
}
