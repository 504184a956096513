//! Toeplitz hashing over GF(2) for privacy amplification and correctness tags.
//!
//! A binary Toeplitz matrix `T` with `m` rows and `n` columns is fully
//! described by `n + m - 1` seed bits via `T[i][j] = seed[m - 1 + j - i]`:
//! the first column is `seed[m-1], …, seed[0]` read upward and every
//! diagonal is constant. The family `{x → T·x}` over uniform seeds is
//! 2⁻ᵐ-universal, which is what both the PA step and the correctness tag
//! rely on.
//!
//! Row `i` of the product is the inner product of `x` with the seed window
//! starting at bit `m - 1 - i`, so the implementation slides a 64-bit window
//! across the packed seed and reduces each row to a word-wise
//! AND + popcount parity. Output words are independent, so rows are computed
//! in parallel.

use crate::bits::BitString;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ToeplitzError {
    /// Seed must hold exactly `input_len + out_len - 1` bits.
    #[error("toeplitz seed holds {got} bits, expected {expected}")]
    SeedLength { expected: usize, got: usize },
    /// Hashing cannot expand: `1 <= out_len <= input_len`.
    #[error("output length {out_len} not in 1..={input_len}")]
    OutputLength { out_len: usize, input_len: usize },
}

/// Multiplies `input` by the Toeplitz matrix described by `seed`, producing
/// `out_len` bits.
pub fn toeplitz_hash(
    input: &BitString,
    seed: &BitString,
    out_len: usize,
) -> Result<BitString, ToeplitzError> {
    let n = input.len();
    if out_len == 0 || out_len > n {
        return Err(ToeplitzError::OutputLength {
            out_len,
            input_len: n,
        });
    }
    let expected = n + out_len - 1;
    if seed.len() != expected {
        return Err(ToeplitzError::SeedLength {
            expected,
            got: seed.len(),
        });
    }

    let words: Vec<u64> = (0..out_len.div_ceil(64))
        .into_par_iter()
        .map(|wi| {
            let mut word = 0u64;
            for b in 0..64 {
                let i = wi * 64 + b;
                if i >= out_len {
                    break;
                }
                let offset = out_len - 1 - i;
                let mut parity = 0u32;
                for (w, &xw) in input.words().iter().enumerate() {
                    parity ^= (xw & seed.window_word(offset + 64 * w)).count_ones();
                }
                word |= ((parity & 1) as u64) << b;
            }
            word
        })
        .collect();

    Ok(BitString::from_fn(out_len, |i| {
        words[i / 64] >> (i % 64) & 1 == 1
    }))
}
