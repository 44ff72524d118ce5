//! Binary training checkpoints. Parameters and optimizer moments are stored
//! as float64 so a resumed run continues bit for bit.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{scale_constraint, GaussianLevelSet};
use crate::trainer::optim::Moments;
use crate::trainer::{AdamState, Checkpoint, GradStats, LevelReport, TrainEvent};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLODCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tau: f64,
    rho: f64,
    l_max: u32,
    config_digest: String,
    level: u32,
    iteration: u32,
    done: bool,
    rng_seed: [u8; 32],
    rng_stream: u64,
    // u128 does not survive every JSON reader; keep it as text
    rng_word_pos: String,
    events: Vec<TrainEvent>,
    reports: Vec<LevelReport>,
}

fn write_f64s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_set<W: Write>(w: &mut W, set: &GaussianLevelSet) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(set.level)?;
    w.write_f64::<LittleEndian>(set.s_min)?;
    w.write_u64::<LittleEndian>(set.len() as u64)?;
    write_f64s(w, set.positions.iter().flatten().copied())?;
    write_f64s(w, set.scale_params.iter().flatten().copied())?;
    write_f64s(w, set.rotations.iter().flatten().copied())?;
    write_f64s(w, set.opacity_params.iter().copied())?;
    write_f64s(w, set.colors.iter().flatten().copied())
}

fn write_moments<W: Write, const D: usize>(w: &mut W, m: &Moments<D>) -> std::io::Result<()> {
    write_f64s(w, m.m.iter().flatten().copied())?;
    write_f64s(w, m.v.iter().flatten().copied())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.set.is_empty() && ckpt.completed.is_empty() {
        return Err(Error::Argument("refusing to checkpoint an empty model".into()));
    }
    ckpt.set.check_consistent()?;
    let header = Header {
        tau: ckpt.tau,
        rho: ckpt.rho,
        l_max: ckpt.l_max,
        config_digest: ckpt.config_digest.clone(),
        level: ckpt.level,
        iteration: ckpt.iteration,
        done: ckpt.done,
        rng_seed: ckpt.rng_seed,
        rng_stream: ckpt.rng_stream,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        events: ckpt.events.clone(),
        reports: ckpt.reports.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(json.len() as u64)?;
    out.write_all(&json)?;
    out.write_u32::<LittleEndian>(ckpt.completed.len() as u32)?;
    for s in &ckpt.completed {
        write_set(&mut out, s)?;
    }
    write_set(&mut out, &ckpt.set)?;
    let a = &ckpt.adam;
    out.write_u64::<LittleEndian>(a.step)?;
    write_moments(&mut out, &a.positions)?;
    write_moments(&mut out, &a.scales)?;
    write_moments(&mut out, &a.rotations)?;
    write_moments(&mut out, &a.opacities)?;
    write_moments(&mut out, &a.colors)?;
    write_f64s(&mut out, ckpt.stats.accum.iter().copied())?;
    for &c in &ckpt.stats.count {
        out.write_u32::<LittleEndian>(c)?;
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn truncated(&self) -> Error {
        Error::parse(self.offset(), "checkpoint is truncated")
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.truncated())
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| self.truncated())
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LittleEndian>().map_err(|_| self.truncated())
    }

    fn len(&mut self) -> Result<usize> {
        let at = self.offset();
        let n = self.u64()?;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        // every element takes at least one byte
        if n > remaining {
            return Err(Error::parse(at, format!("length {n} exceeds the remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }

    fn arrays<const D: usize>(&mut self, n: usize) -> Result<Vec<[f64; D]>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut a = [0.0; D];
            for v in &mut a {
                *v = self.f64()?;
            }
            out.push(a);
        }
        Ok(out)
    }

    fn set(&mut self) -> Result<GaussianLevelSet> {
        let level = self.u32()?;
        let s_min = self.f64()?;
        let n = self.len()?;
        let mut set = GaussianLevelSet::empty(level, s_min);
        set.positions = self.arrays(n)?;
        set.scale_params = self.arrays(n)?;
        set.rotations = self.arrays(n)?;
        set.opacity_params = self.arrays::<1>(n)?.into_iter().map(|[v]| v).collect();
        set.colors = self.arrays(n)?;
        Ok(set)
    }

    fn moments<const D: usize>(&mut self, n: usize) -> Result<Moments<D>> {
        Ok(Moments { m: self.arrays(n)?, v: self.arrays(n)? })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    let mut magic = [0u8; 8];
    r.cur.read_exact(&mut magic).map_err(|_| Error::parse(0, "not a checkpoint"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let json_len = r.len()?;
    let start = r.offset() as usize;
    let header: Header = serde_json::from_slice(&bytes[start..start + json_len])
        .map_err(|e| Error::parse(start as u64, format!("bad checkpoint header: {e}")))?;
    r.cur.set_position((start + json_len) as u64);
    let rng_word_pos = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::parse(start as u64, "bad random stream position"))?;
    let completed_n = r.u32()?;
    let mut completed = Vec::new();
    for _ in 0..completed_n {
        completed.push(r.set()?);
    }
    let set = r.set()?;
    let n = set.len();
    let step = r.u64()?;
    let adam = AdamState {
        step,
        positions: r.moments(n)?,
        scales: r.moments(n)?,
        rotations: r.moments(n)?,
        opacities: r.moments(n)?,
        colors: r.moments(n)?,
    };
    let accum = r.arrays::<1>(n)?.into_iter().map(|[v]| v).collect();
    let mut count = Vec::with_capacity(n);
    for _ in 0..n {
        count.push(r.u32()?);
    }
    if (r.offset() as usize) != bytes.len() {
        return Err(Error::parse(r.offset(), "trailing bytes after checkpoint"));
    }
    let ckpt = Checkpoint {
        tau: header.tau,
        rho: header.rho,
        l_max: header.l_max,
        config_digest: header.config_digest,
        level: header.level,
        iteration: header.iteration,
        done: header.done,
        completed,
        set,
        adam,
        stats: GradStats { accum, count },
        rng_seed: header.rng_seed,
        rng_stream: header.rng_stream,
        rng_word_pos,
        events: header.events,
        reports: header.reports,
    };
    validate_checkpoint(&ckpt)?;
    Ok(ckpt)
}

/// Checks that every stored level carries the ladder value for its index.
pub fn validate_checkpoint(ckpt: &Checkpoint) -> Result<()> {
    if ckpt.level < 1 || ckpt.level > ckpt.l_max {
        return Err(Error::Validation(format!("checkpoint level {} outside [1, {}]", ckpt.level, ckpt.l_max)));
    }
    let finished = ckpt.level as usize - usize::from(!ckpt.done);
    if ckpt.completed.len() != finished {
        return Err(Error::Validation(format!(
            "checkpoint at level {} holds {} finished levels",
            ckpt.level,
            ckpt.completed.len()
        )));
    }
    for (i, s) in ckpt.completed.iter().chain(std::iter::once(&ckpt.set)).enumerate() {
        let level = if i < ckpt.completed.len() { i as u32 + 1 } else { ckpt.level };
        let expected = scale_constraint(level, ckpt.tau, ckpt.rho, ckpt.l_max)?;
        if s.level != level || s.s_min != expected {
            return Err(Error::Validation(format!(
                "stored set is level {} with s_min {}, expected level {level} with s_min {expected}",
                s.level, s.s_min
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint that must be positioned in `level`.
pub fn load_checkpoint_for_level(path: impl AsRef<Path>, level: u32) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.level != level {
        return Err(Error::Validation(format!(
            "checkpoint is at level {}, expected level {level}",
            ckpt.level
        )));
    }
    Ok(ckpt)
}
