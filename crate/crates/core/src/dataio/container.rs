//! Little-endian corpus container.
//!
//! ```text
//! magic   "EEGC"            4 bytes
//! version u16 = 1
//! count   u32
//! per sample:
//!   timesteps u32, channels u32, class_id u32, subject_id u32, image_id u32
//!   timesteps * channels f32, row-major
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write, so a
//! corpus whose values are already `f32`-representable round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Corpus, EegSample};
use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CONTAINER_MAGIC: &[u8; 4] = b"EEGC";
pub const CONTAINER_VERSION: u16 = 1;
const HEADER_BYTES: u64 = 4 + 2 + 4;
const SAMPLE_HEADER_BYTES: u64 = 5 * 4;

/// Exact file size for `n` samples of `timesteps x channels`.
pub fn container_size(n: u64, timesteps: u64, channels: u64) -> u64 {
    HEADER_BYTES + n * (SAMPLE_HEADER_BYTES + timesteps * channels * 4)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} does not fit in u32")))
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(corpus.len(), "sample count")?.to_le_bytes())?;
    for s in corpus.samples() {
        for v in [
            to_u32(s.signal.rows(), "timesteps")?,
            to_u32(s.signal.cols(), "channels")?,
            to_u32(s.class_id, "class id")?,
            s.subject_id,
            s.image_id,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in s.signal.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus_to(corpus, BufWriter::new(File::create(path)?))
}

pub fn read_corpus_from<R: Read>(r: R) -> Result<Corpus> {
    let mut cur = ByteReader::new(r);
    let mut magic = [0u8; 4];
    cur.fill(&mut magic, "magic")?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"EEGC\"")));
    }
    let version = cur.u16("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut buf = Vec::new();
    for i in 0..count {
        let start = cur.offset;
        let timesteps = cur.u32("timesteps")? as usize;
        let channels = cur.u32("channels")? as usize;
        let class_id = cur.u32("class id")? as usize;
        let subject_id = cur.u32("subject id")?;
        let image_id = cur.u32("image id")?;
        if timesteps == 0 || channels == 0 {
            return Err(Error::format(start, format!("sample {i} has an empty signal")));
        }
        let n = timesteps
            .checked_mul(channels)
            .ok_or_else(|| Error::format(start, "signal size overflows"))?;
        buf.resize(n * 4, 0);
        cur.fill(&mut buf, "signal payload")?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        samples.push(EegSample {
            signal: Matrix::from_vec(timesteps, channels, data)?,
            class_id,
            subject_id,
            image_id,
        });
    }
    cur.expect_end("last sample")?;
    Corpus::from_samples(samples)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus_from(BufReader::new(File::open(path)?))
}
