use std::io::{Read, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const TOKEN_MAGIC: &[u8; 4] = b"TOKS";
pub const TOKEN_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const SYNTH_STREAM: u64 = 0x746f6b73;

/// `len` ids drawn uniformly from `0..vocab`.
pub fn random_tokens(vocab: usize, len: usize, seed: u64, stream: u64) -> Vec<u32> {
    let mut rng = seeded(seed, stream);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Pre-tokenized evaluation corpus.
///
/// Windows are non-overlapping slices of `window` ids with no context carried
/// across boundaries; a trailing short window is kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    vocab: usize,
    ids: Vec<u32>,
    window: usize,
}

impl TokenStream {
    pub fn new(vocab: usize, ids: Vec<u32>, window: usize) -> Result<Self> {
        if vocab == 0 || vocab > u32::MAX as usize {
            return Err(Error::contract(format!("vocabulary size {vocab} out of range")));
        }
        if window == 0 {
            return Err(Error::contract("evaluation window must be positive"));
        }
        if let Some((i, &bad)) = ids.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(Error::Format(format!("token {i} has id {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { vocab, ids, window })
    }

    /// Uniform ids from the seeded generator.
    pub fn synthetic(vocab: usize, count: usize, window: usize, seed: u64) -> Result<Self> {
        Self::new(vocab, random_tokens(vocab, count, seed, SYNTH_STREAM), window)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::contract("evaluation window must be positive"));
        }
        self.window = window;
        Ok(self)
    }

    pub fn windows(&self) -> impl Iterator<Item = &[u32]> {
        self.ids.chunks(self.window)
    }

    /// Next-token predictions made across all windows.
    pub fn predicted_positions(&self) -> usize {
        self.windows().map(|w| w.len() - 1).sum()
    }

    /// `TOKS`, version, `V`, count as little-endian `u32`, then the ids.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let count = u32::try_from(self.ids.len())
            .map_err(|_| Error::contract(format!("{} tokens exceed the format limit", self.ids.len())))?;
        out.write_all(TOKEN_MAGIC)?;
        out.write_all(&TOKEN_FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.vocab as u32).to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.ids.len() * 4);
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(input: &mut R, window: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, window)
    }

    pub fn from_bytes(bytes: &[u8], window: usize) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("token file is {} bytes, shorter than its header", bytes.len())));
        }
        if &bytes[..4] != TOKEN_MAGIC {
            return Err(Error::Format("token file does not start with TOKS".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != TOKEN_FORMAT_VERSION {
            return Err(Error::Format(format!("token file version {version} is not supported")));
        }
        let vocab = word(8) as usize;
        let count = word(12) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 4 {
            return Err(Error::Format(format!("token file declares {count} ids but carries {} bytes", body.len())));
        }
        let ids = body.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Self::new(vocab, ids, window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let s = TokenStream::synthetic(50, 103, 16, 9).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"TOKS");
        assert_eq!(bytes.len(), 16 + 4 * 103);
        assert_eq!(TokenStream::from_bytes(&bytes, 16).unwrap(), s);
    }

    #[test]
    fn rejects_bad_files() {
        let s = TokenStream::new(4, vec![0, 1, 2, 3], 2).unwrap();
        let good = s.to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(TokenStream::from_bytes(&bad_magic, 2).is_err());
        assert!(TokenStream::from_bytes(&good[..good.len() - 1], 2).is_err());
        let mut out_of_vocab = good.clone();
        out_of_vocab[8] = 3;
        assert!(TokenStream::from_bytes(&out_of_vocab, 2).is_err());
        assert!(TokenStream::from_bytes(&good[..10], 2).is_err());
    }

    #[test]
    fn windows_do_not_overlap() {
        let s = TokenStream::new(10, (0..10).collect(), 4).unwrap();
        let w: Vec<_> = s.windows().collect();
        assert_eq!(w, vec![&[0, 1, 2, 3][..], &[4, 5, 6, 7], &[8, 9]]);
        assert_eq!(s.predicted_positions(), 3 + 3 + 1);
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = TokenStream::synthetic(100, 64, 8, 1).unwrap();
        assert_eq!(a, TokenStream::synthetic(100, 64, 8, 1).unwrap());
        assert_ne!(a, TokenStream::synthetic(100, 64, 8, 2).unwrap());
    }
}
