//! Content hashes binding plans to the weights they were computed from.

use std::io::{self, Write};

use sha2::{Digest, Sha256};

use crate::checkpoint::{ByteSource, Dtype};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::sim::Model;

const CHUNK: usize = 1 << 20;

fn render(digest: impl AsRef<[u8]>) -> String {
    format!("sha256:{}", hex::encode(digest))
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    render(Sha256::digest(bytes))
}

/// Hash of every byte of `source`, read in 1 MiB chunks.
pub fn fingerprint_source(source: &dyn ByteSource) -> Result<String> {
    let len = source.len()?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; CHUNK];
    let mut offset = 0u64;
    while offset < len {
        let n = CHUNK.min((len - offset) as usize);
        source.read_at(offset, &mut buf[..n])?;
        hasher.update(&buf[..n]);
        offset += n as u64;
    }
    Ok(render(hasher.finalize()))
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl<T: Scalar> Model<T> {
    /// Hash of the model's F32 checkpoint serialization, so a model and the
    /// file it was written to share a fingerprint.
    pub fn fingerprint(&self) -> Result<String> {
        let mut w = HashWriter(Sha256::new());
        self.write_checkpoint(&mut w, Dtype::F32)?;
        Ok(render(w.0.finalize()))
    }
}
