//! Named-tensor checkpoint container.
//!
//! ```text
//! magic   "CGNT"            4 bytes
//! version u16 = 1
//! count   u32
//! per tensor:
//!   name_len u16, name (UTF-8), rows u32, cols u32, rows * cols f64
//! ```
//!
//! All integers and floats are little-endian. Alongside the parameter tensors
//! (named as in [`Parameters::names`]) a checkpoint carries `meta.*` records
//! for the configuration and, when saved from a trainer, `adam.m.<name>` and
//! `adam.v.<name>` moments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamState, Mode, TrainConfig};
use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::losses::WeightInterpretation;
use crate::numerics::Matrix;
use crate::recurrent::{LstmStack, Parameters, StackConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGNT";
pub const CHECKPOINT_VERSION: u16 = 1;

const META_STACK: &str = "meta.stack";
const META_TRAIN: &str = "meta.train";
const META_PROGRESS: &str = "meta.progress";
const META_DIGEST: &str = "meta.digest";

/// Optimizer state and progress saved next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub epochs_done: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: LstmStack,
    pub training: Option<TrainingState>,
}

pub fn write_tensors<W: Write>(tensors: &[(String, &Matrix)], mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::domain("too many tensors"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, m) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::domain(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for dim in [m.rows(), m.cols()] {
            let d = u32::try_from(dim).map_err(|_| Error::domain("tensor too large"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every tensor, keyed by name, with the offset its entry started at.
pub fn read_tensors<R: Read>(r: R) -> Result<BTreeMap<String, (u64, Matrix)>> {
    let mut cur = ByteReader::new(r);
    let mut magic = [0u8; 4];
    cur.fill(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"CGNT\"")));
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let count = cur.u32("tensor count")?;
    let mut out = BTreeMap::new();
    let mut bytes = Vec::new();
    for _ in 0..count {
        let start = cur.offset;
        let len = cur.u16("name length")? as usize;
        bytes.resize(len, 0);
        cur.fill(&mut bytes, "tensor name")?;
        let name = String::from_utf8(bytes.clone())
            .map_err(|_| Error::format(start, "tensor name is not UTF-8"))?;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format(start, format!("tensor {name} has invalid shape {rows}x{cols}")))?;
        bytes.resize(n * 8, 0);
        cur.fill(&mut bytes, "tensor values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data)?;
        if out.insert(name.clone(), (start, m)).is_some() {
            return Err(Error::format(start, format!("duplicate tensor {name}")));
        }
    }
    cur.expect_end("last tensor")?;
    Ok(out)
}

fn split_u64(x: u64) -> [f64; 2] {
    [f64::from((x >> 32) as u32), f64::from(x as u32)]
}

fn join_u64(hi: f64, lo: f64) -> Option<u64> {
    let hi = exact_u32(hi)?;
    let lo = exact_u32(lo)?;
    Some((u64::from(hi) << 32) | u64::from(lo))
}

fn exact_u32(v: f64) -> Option<u32> {
    (v >= 0.0 && v <= f64::from(u32::MAX) && v.fract() == 0.0).then_some(v as u32)
}

fn exact_usize(v: f64) -> Option<usize> {
    (v >= 0.0 && v < 2f64.powi(53) && v.fract() == 0.0).then_some(v as usize)
}

fn stack_record(c: &StackConfig) -> Vec<f64> {
    vec![
        c.depth as f64,
        c.hidden as f64,
        f64::from(u8::from(c.bidirectional)),
        c.recurrent_dropout,
        c.num_classes as f64,
        c.input_channels as f64,
    ]
}

fn train_record(c: &TrainConfig) -> Vec<f64> {
    let [seed_hi, seed_lo] = split_u64(c.seed);
    vec![
        f64::from(c.mode.code()),
        c.learning_rate,
        c.beta1,
        c.beta2,
        c.epsilon,
        c.batch_size as f64,
        c.epochs as f64,
        c.temperature,
        seed_hi,
        seed_lo,
        match c.weight_interpretation {
            WeightInterpretation::HalfTSquared => 0.0,
            WeightInterpretation::TSquaredOver2 => 1.0,
        },
    ]
}

/// FNV-1a over the bit patterns of the metadata records.
fn digest(records: &[&[f64]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for r in records {
        for v in *r {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

pub fn write_checkpoint_to<W: Write>(stack: &LstmStack, training: Option<&TrainingState>, w: W) -> Result<()> {
    let stack_meta = Matrix::row_vector(stack_record(stack.config()));
    let train_meta = training.map(|t| Matrix::row_vector(train_record(&t.config)));
    let progress = training.map(|t| Matrix::row_vector(vec![t.adam.step as f64, t.epochs_done as f64]));
    let mut records: Vec<&[f64]> = vec![stack_meta.data()];
    if let (Some(tm), Some(pm)) = (&train_meta, &progress) {
        records.push(tm.data());
        records.push(pm.data());
    }
    let digest_meta = Matrix::row_vector(split_u64(digest(&records)).to_vec());

    let mut entries: Vec<(String, &Matrix)> = vec![(META_STACK.into(), &stack_meta)];
    if let (Some(tm), Some(pm)) = (&train_meta, &progress) {
        entries.push((META_TRAIN.into(), tm));
        entries.push((META_PROGRESS.into(), pm));
    }
    entries.push((META_DIGEST.into(), &digest_meta));
    let names = stack.params.names();
    entries.extend(names.iter().cloned().zip(stack.params.tensors()));
    if let Some(t) = training {
        t.adam.check(&stack.params)?;
        entries.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&t.adam.m));
        entries.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&t.adam.v));
    }
    write_tensors(&entries, w)
}

pub fn save_checkpoint(stack: &LstmStack, training: Option<&TrainingState>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint_to(stack, training, BufWriter::new(File::create(path)?))
}

struct Tensors(BTreeMap<String, (u64, Matrix)>);

impl Tensors {
    fn take(&mut self, name: &str) -> Result<(u64, Matrix)> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::format(0, format!("checkpoint has no tensor {name}")))
    }

    fn take_shaped(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let (offset, m) = self.take(name)?;
        if m.shape() != shape {
            return Err(Error::format(
                offset,
                format!("tensor {name} is {:?}, expected {shape:?}", m.shape()),
            ));
        }
        Ok(m)
    }
}

fn bad(offset: u64, what: &str) -> Error {
    Error::format(offset, format!("invalid {what} record"))
}

pub fn read_checkpoint_from<R: Read>(r: R) -> Result<Checkpoint> {
    let mut t = Tensors(read_tensors(r)?);
    let (off, stack_meta) = t.take(META_STACK)?;
    let s = stack_meta.data();
    if s.len() != 6 {
        return Err(bad(off, META_STACK));
    }
    let config = StackConfig {
        depth: exact_usize(s[0]).ok_or_else(|| bad(off, META_STACK))?,
        hidden: exact_usize(s[1]).ok_or_else(|| bad(off, META_STACK))?,
        bidirectional: s[2] != 0.0,
        recurrent_dropout: s[3],
        num_classes: exact_usize(s[4]).ok_or_else(|| bad(off, META_STACK))?,
        input_channels: exact_usize(s[5]).ok_or_else(|| bad(off, META_STACK))?,
    };
    config.validate().map_err(|e| Error::format(off, e.to_string()))?;

    let train_meta = t.0.remove(META_TRAIN);
    let progress = t.0.remove(META_PROGRESS);
    let (doff, digest_meta) = t.take(META_DIGEST)?;
    let mut records: Vec<&[f64]> = vec![stack_meta.data()];
    if let (Some((_, tm)), Some((_, pm))) = (&train_meta, &progress) {
        records.push(tm.data());
        records.push(pm.data());
    }
    let d = digest_meta.data();
    if d.len() != 2 || join_u64(d[0], d[1]) != Some(digest(&records)) {
        return Err(Error::format(doff, "configuration digest does not match metadata"));
    }

    let mut params = Parameters::zeros(&config);
    let names = params.names();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        *slot = t.take_shaped(name, slot.shape())?;
    }

    let training = match (train_meta, progress) {
        (None, None) => None,
        (Some((toff, tm)), Some((poff, pm))) => {
            let r = tm.data();
            if r.len() != 11 {
                return Err(bad(toff, META_TRAIN));
            }
            let mode = exact_u32(r[0])
                .and_then(|c| u8::try_from(c).ok())
                .and_then(Mode::from_code)
                .ok_or_else(|| bad(toff, META_TRAIN))?;
            let cfg = TrainConfig {
                mode,
                learning_rate: r[1],
                beta1: r[2],
                beta2: r[3],
                epsilon: r[4],
                batch_size: exact_usize(r[5]).ok_or_else(|| bad(toff, META_TRAIN))?,
                epochs: exact_usize(r[6]).ok_or_else(|| bad(toff, META_TRAIN))?,
                temperature: r[7],
                seed: join_u64(r[8], r[9]).ok_or_else(|| bad(toff, META_TRAIN))?,
                weight_interpretation: match r[10] {
                    0.0 => WeightInterpretation::HalfTSquared,
                    1.0 => WeightInterpretation::TSquaredOver2,
                    _ => return Err(bad(toff, META_TRAIN)),
                },
            };
            cfg.validate().map_err(|e| Error::format(toff, e.to_string()))?;
            let p = pm.data();
            if p.len() != 2 {
                return Err(bad(poff, META_PROGRESS));
            }
            let step = exact_usize(p[0]).ok_or_else(|| bad(poff, META_PROGRESS))? as u64;
            let epochs_done = exact_usize(p[1]).ok_or_else(|| bad(poff, META_PROGRESS))?;
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (name, p) in names.iter().zip(params.tensors()) {
                m.push(t.take_shaped(&format!("adam.m.{name}"), p.shape())?);
                v.push(t.take_shaped(&format!("adam.v.{name}"), p.shape())?);
            }
            Some(TrainingState {
                config: cfg,
                adam: AdamState { m, v, step },
                epochs_done,
            })
        }
        _ => return Err(Error::format(0, "checkpoint has partial training metadata")),
    };

    if let Some((name, (offset, _))) = t.0.into_iter().next() {
        return Err(Error::format(offset, format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        stack: LstmStack::from_parts(config, params)?,
        training,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}
