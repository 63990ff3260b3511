//! Packed binary storage: 64 logical bits per machine word.
//!
//! Planes are write-once and kept canonical: every padding bit beyond
//! `logical_len` is zero. Zero padding is neutral for AND-based dot products;
//! the XNOR kernel corrects for it explicitly (see `binlinalg`).

use std::io::{Read, Write};

use crate::error::{invalid_arg, Result};

pub const WORD_BITS: usize = 64;

/// Packed binary array. Bit `j` of the logical sequence lives at bit
/// `j % 64` of word `j / 64` (little-endian within a word).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlane {
    words: Vec<u64>,
    logical_len: usize,
}

impl BitPlane {
    /// Pack a `{0,1}` sequence. Rejects any other value.
    pub fn pack(bits: &[u8]) -> Result<Self> {
        let mut words = vec![0u64; bits.len().div_ceil(WORD_BITS)];
        for (j, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => words[j / WORD_BITS] |= 1u64 << (j % WORD_BITS),
                other => return Err(invalid_arg!("pack: element {j} is {other}, not 0/1")),
            }
        }
        Ok(BitPlane {
            words,
            logical_len: bits.len(),
        })
    }

    /// Pack from a predicate over indices; infallible counterpart of `pack`.
    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; len.div_ceil(WORD_BITS)];
        for j in 0..len {
            if f(j) {
                words[j / WORD_BITS] |= 1u64 << (j % WORD_BITS);
            }
        }
        BitPlane {
            words,
            logical_len: len,
        }
    }

    /// Build directly from packed words. Rejects non-canonical input
    /// (wrong word count or dirty padding bits).
    pub fn from_words(words: Vec<u64>, logical_len: usize) -> Result<Self> {
        let plane = BitPlane { words, logical_len };
        if !plane.is_canonical() {
            return Err(invalid_arg!(
                "from_words: {} words / {} bits is not canonical",
                plane.words.len(),
                logical_len
            ));
        }
        Ok(plane)
    }

    /// All-zero plane of the given logical length.
    pub fn zeros(len: usize) -> Self {
        BitPlane {
            words: vec![0u64; len.div_ceil(WORD_BITS)],
            logical_len: len,
        }
    }

    /// Inverse of `pack`: the logical bit sequence as `0/1` bytes.
    pub fn unpack(&self) -> Vec<u8> {
        (0..self.logical_len).map(|j| self.get(j) as u8).collect()
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        debug_assert!(j < self.logical_len);
        (self.words[j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.logical_len
    }

    pub fn is_empty(&self) -> bool {
        self.logical_len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Number of 1-bits among the first `logical_len` bits. Padding is zero,
    /// so a straight sum over words is exact.
    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Count of padding bits in the last word (all guaranteed zero).
    pub fn padding_bits(&self) -> usize {
        self.words.len() * WORD_BITS - self.logical_len
    }

    /// True when every padding bit beyond `logical_len` is zero and the word
    /// count matches the logical length.
    pub fn is_canonical(&self) -> bool {
        if self.words.len() != self.logical_len.div_ceil(WORD_BITS) {
            return false;
        }
        let tail = self.logical_len % WORD_BITS;
        if tail == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        self.words.last().is_none_or(|w| w & mask == 0)
    }

    /// Serialized form used inside model files: `logical_len` as u64 LE,
    /// then the words LE.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.logical_len as u64).to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let logical_len = u64::from_le_bytes(len_buf) as usize;
        let n_words = logical_len.div_ceil(WORD_BITS);
        let mut words = vec![0u64; n_words];
        let mut buf = [0u8; 8];
        for word in words.iter_mut() {
            r.read_exact(&mut buf)?;
            *word = u64::from_le_bytes(buf);
        }
        let plane = BitPlane { words, logical_len };
        if !plane.is_canonical() {
            return Err(crate::Error::Format(
                "bit plane has non-zero padding bits".into(),
            ));
        }
        Ok(plane)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_places_bits_little_endian() {
        let p = BitPlane::pack(&[1, 0, 1]).unwrap();
        assert_eq!(p.words(), &[0b101]);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn pack_empty() {
        let p = BitPlane::pack(&[]).unwrap();
        assert!(p.words().is_empty());
        assert_eq!(p.len(), 0);
        assert_eq!(p.popcount(), 0);
    }

    #[test]
    fn pack_rejects_non_binary() {
        assert!(BitPlane::pack(&[0, 1, 2]).is_err());
    }

    #[test]
    fn unpack_single_bit() {
        let p = BitPlane::pack(&[1]).unwrap();
        assert_eq!(p.unpack(), vec![1]);
    }

    #[test]
    fn unpack_all_zero_multiword() {
        let bits = vec![0u8; 70];
        let p = BitPlane::pack(&bits).unwrap();
        assert_eq!(p.words().len(), 2);
        assert_eq!(p.unpack(), bits);
    }

    #[test]
    fn popcount_all_ones() {
        let p = BitPlane::pack(&[1; 8]).unwrap();
        assert_eq!(p.popcount(), 8);
    }

    #[test]
    fn serialization_round_trip() {
        let p = BitPlane::from_fn(130, |j| j % 3 == 0);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 3 * 8);
        let q = BitPlane::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn read_rejects_dirty_padding() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&3u64.to_le_bytes());
        buf.extend_from_slice(&0xFFu64.to_le_bytes()); // bits 3..7 dirty
        assert!(BitPlane::read_from(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_identity(bits in proptest::collection::vec(0u8..=1, 0..300)) {
            let p = BitPlane::pack(&bits).unwrap();
            prop_assert!(p.is_canonical());
            prop_assert_eq!(p.unpack(), bits.clone());
            // popcount oracle: integer sum of the unpacked bits
            let expect: usize = bits.iter().map(|&b| b as usize).sum();
            prop_assert_eq!(p.popcount(), expect);
        }

        #[test]
        fn complement_partitions_length(bits in proptest::collection::vec(0u8..=1, 1..300)) {
            let p = BitPlane::pack(&bits).unwrap();
            let flipped: Vec<u8> = bits.iter().map(|&b| 1 - b).collect();
            let q = BitPlane::pack(&flipped).unwrap();
            prop_assert_eq!(p.popcount() + q.popcount(), bits.len());
        }
    }
}
