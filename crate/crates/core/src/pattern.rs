//! Binary activation patterns identifying linear regions.

use std::fmt;
use std::hash::{Hash, Hasher};

/// Concatenated on/off state of every ReLU unit, in layer order.
///
/// Two inputs lie in the same linear region exactly when their patterns are
/// equal. A 64-bit digest is cached alongside the bits so that most
/// inequality tests never touch the bit vector; equal digests still fall
/// back to a full comparison.
#[derive(Clone)]
pub struct ActivationPattern {
    words: Vec<u64>,
    len: usize,
    digest: u64,
}

impl ActivationPattern {
    pub(crate) fn from_words(words: Vec<u64>, len: usize) -> Self {
        debug_assert_eq!(words.len(), len.div_ceil(64));
        let digest = digest(&words, len);
        ActivationPattern { words, len, digest }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut builder = PatternBuilder::new(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            builder.set(i, b);
        }
        builder.finish()
    }

    pub fn all_ones(len: usize) -> Self {
        Self::from_bits(&vec![true; len])
    }

    pub fn all_zeros(len: usize) -> Self {
        Self::from_bits(&vec![false; len])
    }

    /// Number of units covered (the network's neuron count).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for pattern of {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Number of units whose state differs.
    pub fn hamming(&self, other: &ActivationPattern) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

impl PartialEq for ActivationPattern {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest && self.len == other.len && self.words == other.words
    }
}

impl Eq for ActivationPattern {}

impl Hash for ActivationPattern {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.digest);
    }
}

impl fmt::Debug for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActivationPattern(")?;
        for i in 0..self.len.min(64) {
            write!(f, "{}", self.get(i) as u8)?;
        }
        if self.len > 64 {
            write!(f, "…[{} bits]", self.len)?;
        }
        write!(f, ")")
    }
}

// FNV-1a over the words; deterministic across runs and platforms.
fn digest(words: &[u64], len: usize) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ len as u64;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

pub(crate) struct PatternBuilder {
    words: Vec<u64>,
    len: usize,
}

impl PatternBuilder {
    pub(crate) fn new(len: usize) -> Self {
        PatternBuilder {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, on: bool) {
        if on {
            self.words[i / 64] |= 1 << (i % 64);
        }
    }

    pub(crate) fn finish(self) -> ActivationPattern {
        ActivationPattern::from_words(self.words, self.len)
    }
}
