//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by a key
//! `(purpose, species, id, step)` plus the run seed. The generator is
//! Philox4x32-10, so a stream can be materialised anywhere without
//! replaying earlier draws: parallel workers reproduce the sequential
//! output exactly, whatever the worker count or visiting order.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32 block with 10 rounds.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// SplitMix64 finaliser, used to fold key components together.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum Purpose {
    Initial = 1,
    Diffuse = 2,
    Birth = 3,
    Death = 4,
    Clock = 5,
    Flow = 6,
    Replica = 7,
    Probe = 8,
    Bootstrap = 9,
    Sparsify = 10,
    Subgradient = 11,
}

/// Address of a stream within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub species: u32,
    pub id: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose, species: u32, id: u64, step: u64) -> Self {
        Self {
            purpose,
            species,
            id,
            step,
        }
    }
}

/// A Philox stream positioned at the start of the block sequence for one key.
#[derive(Clone, Debug)]
pub struct Stream {
    key: [u32; 2],
    ctr: [u32; 4],
    buf: [u32; 4],
    pos: usize,
}

impl Stream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let tag = ((key.purpose as u64) << 32) | key.species as u64;
        let k = splitmix64(seed ^ splitmix64(tag ^ splitmix64(key.step >> 32)));
        Self {
            key: [k as u32, (k >> 32) as u32],
            ctr: [0, key.step as u32, key.id as u32, (key.id >> 32) as u32],
            buf: [0; 4],
            pos: 4,
        }
    }

    /// Shorthand for `Stream::new(seed, StreamKey::new(..))`.
    pub fn keyed(seed: u64, purpose: Purpose, species: u32, id: u64, step: u64) -> Self {
        Self::new(seed, StreamKey::new(purpose, species, id, step))
    }

    #[inline]
    fn refill(&mut self) {
        self.buf = philox4x32_10(self.ctr, self.key);
        self.ctr[0] = self.ctr[0].wrapping_add(1);
        self.pos = 0;
    }

    /// Uniform on the open interval (0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Exponential waiting time with the given rate.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform().ln() / rate
    }

    /// Uniform index in `0..n` (n > 0).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for Stream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        if self.pos >= 4 {
            self.refill();
        }
        let v = self.buf[self.pos];
        self.pos += 1;
        v
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        let hi = self.next_u32() as u64;
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(4) {
            let v = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Derive an independent child seed, e.g. for replica `r` of sweep point `k`.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag ^ splitmix64(a ^ splitmix64(b))))
}

/// Serializable description of the generator used for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub generator: String,
    pub seed: u64,
    pub keying: String,
}

impl RngDescriptor {
    pub fn philox(seed: u64) -> Self {
        Self {
            generator: "philox4x32-10".into(),
            seed,
            keying: "(purpose, species, id, step)".into(),
        }
    }
}
