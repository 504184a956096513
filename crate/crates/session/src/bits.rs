//! Packed bit strings for sifted keys, hash seeds, and wire payloads.
//!
//! Bits are stored LSB-first inside little-endian `u64` words: bit `i` lives
//! at `words[i / 64] >> (i % 64) & 1`. Unused high bits of the last word are
//! kept at zero so equality and word-level scans need no masking.

use rand::Rng;

/// Growable bit string with canonical zero padding in the last word.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero string of `len` bits.
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    /// Builds a string by evaluating `f` at every index.
    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut out = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                out.words[i / 64] |= 1 << (i % 64);
            }
        }
        out
    }

    /// Draws `len` independent fair bits from `rng`.
    pub fn random(rng: &mut impl Rng, len: usize) -> Self {
        let mut out = Self {
            words: (0..len.div_ceil(64)).map(|_| rng.gen::<u64>()).collect(),
            len,
        };
        out.mask_tail();
        out
    }

    /// Reconstructs a string from LSB-first packed bytes.
    ///
    /// Fails if the byte count does not match `len` or if any padding bit
    /// beyond `len` is set, so every bit string has exactly one encoding.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let out = Self { words, len };
        let mut canonical = out.clone();
        canonical.mask_tail();
        if canonical.words != out.words {
            return None;
        }
        Some(out)
    }

    /// LSB-first packed bytes, `ceil(len / 8)` of them.
    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.len.div_ceil(8))
            .map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn push(&mut self, value: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, value);
    }

    pub fn flip(&mut self, i: usize) {
        let v = self.get(i);
        self.set(i, !v);
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming_distance(&self, other: &Self) -> u64 {
        assert_eq!(self.len, other.len, "length mismatch in hamming_distance");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum()
    }

    pub fn xor_assign(&mut self, other: &Self) {
        assert_eq!(self.len, other.len, "length mismatch in xor_assign");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    /// Backing words; padding bits beyond `len` are guaranteed zero.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// 64 consecutive bits starting at `offset`, zero-filled past the end.
    pub fn window_word(&self, offset: usize) -> u64 {
        let k = offset / 64;
        let r = offset % 64;
        let lo = self.words.get(k).copied().unwrap_or(0) >> r;
        if r == 0 {
            lo
        } else {
            lo | self.words.get(k + 1).copied().unwrap_or(0) << (64 - r)
        }
    }

    /// First `min(len, 64)` bits as an integer, LSB-first.
    pub fn low_word(&self) -> u64 {
        self.words.first().copied().unwrap_or(0)
    }

    fn mask_tail(&mut self) {
        let r = self.len % 64;
        if r != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << r) - 1;
            }
        }
    }
}

impl std::fmt::Debug for BitString {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitString[{}; ", self.len)?;
        for i in 0..self.len.min(64) {
            write!(f, "{}", self.get(i) as u8)?;
        }
        if self.len > 64 {
            write!(f, "…")?;
        }
        write!(f, "]")
    }
}

impl FromIterator<bool> for BitString {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let mut out = Self::new();
        for b in iter {
            out.push(b);
        }
        out
    }
}
