//! Streaming rANS with a 64-bit head and 32-bit word renormalization.
//!
//! The word stack sits on top of an unbounded pseudo-random pool derived
//! from a public seed. Bits-back decoding on a fresh state draws from that
//! pool, and re-encoding the same values returns the words to it, so a
//! complete decode leaves the state exactly as it started. `bit_len` counts
//! pool words as negative, which makes every operation's cost exact.

use crate::error::{Error, Result};

/// Lower bound of the normalized head interval.
pub const RANS_L: u64 = 1 << 32;

/// Public seed for fresh states.
pub const DEFAULT_SEED: u64 = 0x6976_7066_2d62_6231;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One step of the encode recurrence without renormalization:
/// `c' = ⌊c / f⌋ · 2^n + (c mod f) + b`.
pub fn encode_step(c: u64, cum: u64, freq: u64, n: u32) -> u64 {
    ((c / freq) << n) + c % freq + cum
}

/// Inverse of [`encode_step`] given the decoded symbol's `(cum, freq)`.
pub fn decode_step(c: u64, cum: u64, freq: u64, n: u32) -> u64 {
    freq * (c >> n) + (c & ((1u64 << n) - 1)) - cum
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RansState {
    head: u64,
    words: Vec<u32>,
    borrowed: u64,
    seed: u64,
}

impl Default for RansState {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

impl RansState {
    pub fn new(seed: u64) -> Self {
        let head = RANS_L | (splitmix64(seed) & 0xffff_ffff);
        Self { head, words: Vec::new(), borrowed: 0, seed }
    }

    pub fn head(&self) -> u64 {
        self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Explicit words currently on the stack.
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Pool words consumed below the explicit stack.
    pub fn borrowed(&self) -> u64 {
        self.borrowed
    }

    /// Information content of the state relative to a fresh one, in bits,
    /// offset by the head width. Differences between two calls are exact
    /// operation costs.
    pub fn bit_len(&self) -> i64 {
        (64 - self.head.leading_zeros()) as i64 + 32 * (self.words.len() as i64 - self.borrowed as i64)
    }

    fn pool_word(&self, i: u64) -> u32 {
        splitmix64(self.seed ^ splitmix64(i)) as u32
    }

    fn push(&mut self, w: u32) {
        if self.words.is_empty() && self.borrowed > 0 && w == self.pool_word(self.borrowed - 1) {
            self.borrowed -= 1;
        } else {
            self.words.push(w);
        }
    }

    fn pop(&mut self) -> u32 {
        match self.words.pop() {
            Some(w) => w,
            None => {
                let w = self.pool_word(self.borrowed);
                self.borrowed += 1;
                w
            }
        }
    }

    fn refill(&mut self) {
        while self.head < RANS_L {
            self.head = (self.head << 32) | self.pop() as u64;
        }
    }

    /// Push a symbol occupying `[cum, cum + freq)` out of `2^n`.
    pub fn encode_symbol(&mut self, cum: u64, freq: u64, n: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1u64 << n && n <= 32);
        let x_max = (freq as u128) << (64 - n);
        while self.head as u128 >= x_max {
            self.push(self.head as u32);
            self.head >>= 32;
        }
        self.head = encode_step(self.head, cum, freq, n);
    }

    /// Pop a symbol. `lookup` maps a slot in `[0, 2^n)` to
    /// `(symbol, cum, freq)` with `cum ≤ slot < cum + freq`.
    pub fn decode_symbol<T>(&mut self, n: u32, lookup: impl FnOnce(u64) -> (T, u64, u64)) -> T {
        let slot = self.head & ((1u64 << n) - 1);
        let (sym, cum, freq) = lookup(slot);
        debug_assert!(cum <= slot && slot < cum + freq);
        self.head = decode_step(self.head, cum, freq, n);
        self.refill();
        sym
    }

    /// Pop `count` values of `bits` bits each, equiprobable. Costs exactly
    /// `bits · count` bits.
    pub fn decode_uniform(&mut self, count: usize, bits: u32) -> Vec<u64> {
        assert!(bits <= 32);
        if bits == 0 {
            return vec![0; count];
        }
        let mask = (1u64 << bits) - 1;
        (0..count)
            .map(|_| {
                let v = self.head & mask;
                self.head >>= bits;
                self.refill();
                v
            })
            .collect()
    }

    /// Exact inverse of [`decode_uniform`] for the same vector.
    pub fn encode_uniform(&mut self, values: &[u64], bits: u32) {
        assert!(bits <= 32);
        if bits == 0 {
            return;
        }
        let x_max = 1u128 << (64 - bits);
        for &v in values.iter().rev() {
            debug_assert!(v >> bits == 0);
            while self.head as u128 >= x_max {
                self.push(self.head as u32);
                self.head >>= 32;
            }
            self.head = (self.head << bits) | v;
        }
    }

    /// Serialize as `[head_hi, head_lo, borrowed, stack bottom → top]`.
    pub fn flush(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.words.len() + 3);
        out.push((self.head >> 32) as u32);
        out.push(self.head as u32);
        out.push(u32::try_from(self.borrowed).expect("borrowed word count fits in 32 bits"));
        out.extend_from_slice(&self.words);
        out
    }

    pub fn restore(words: &[u32], seed: u64) -> Result<Self> {
        if words.len() < 3 {
            return Err(Error::Stream(format!("coder state needs at least 3 words, got {}", words.len())));
        }
        let head = ((words[0] as u64) << 32) | words[1] as u64;
        if head < RANS_L {
            return Err(Error::Stream(format!("coder head {head:#x} is below the normalized range")));
        }
        Ok(Self { head, words: words[3..].to_vec(), borrowed: words[2] as u64, seed })
    }
}
