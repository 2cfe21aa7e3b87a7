//! Prepared-dataset file format.
//!
//! ```text
//! "EDSD"  u32 version  u64 record_count
//! per record:
//!   u32 record_length          bytes that follow, up to the next record
//!   u8  mode                   0 PrefixLM, 1 R, 2 S, 3 X
//!   u32 n_in   n_in  × u32     input ids
//!   u32 n_out  n_out × u32     target ids
//!   u8  has_sidecar
//!   [u32 k  n_out × k × (u32 id, f32 prob)]
//! ```
//!
//! All integers and floats are little-endian. Sidecar rows shorter than `k`
//! are not representable; every target position carries exactly `k` pairs.

use std::io::{Read, Write};
use std::path::Path;

use super::examples::{Mode, PrefixLmExample, TopK, TrainingExample, Ul2Example};
use crate::error::{Error, Result};
use crate::io::atomic_write;

const MAGIC: &[u8; 4] = b"EDSD";
const VERSION: u32 = 1;

fn put_ids(out: &mut Vec<u8>, ids: &[u32]) {
    out.extend((ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend(id.to_le_bytes());
    }
}

fn encode(e: &TrainingExample) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    body.push(match e {
        TrainingExample::PrefixLm(_) => 0,
        TrainingExample::Ul2(u) => match u.mode {
            Mode::R => 1,
            Mode::S => 2,
            Mode::X => 3,
        },
    });
    put_ids(&mut body, e.input());
    put_ids(&mut body, e.target());
    match e.teacher() {
        None => body.push(0),
        Some(rows) => {
            let k = rows.first().map_or(0, Vec::len);
            if rows.len() != e.target().len() || rows.iter().any(|r| r.len() != k) {
                return Err(Error::Format("sidecar rows must all hold k entries".into()));
            }
            body.push(1);
            body.extend((k as u32).to_le_bytes());
            for (id, p) in rows.iter().flatten() {
                body.extend(id.to_le_bytes());
                body.extend(p.to_le_bytes());
            }
        }
    }
    let mut rec = (body.len() as u32).to_le_bytes().to_vec();
    rec.extend(body);
    Ok(rec)
}

pub fn write_dataset(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut buf = Vec::new();
    encode_dataset(examples, &mut buf)?;
    atomic_write(path, &buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("dataset record is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn ids(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        if n > self.buf.len() / 4 {
            return Err(Error::Format("dataset id count exceeds file size".into()));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

fn decode(rec: &[u8]) -> Result<TrainingExample> {
    let mut c = Cursor { buf: rec, pos: 0 };
    let mode = c.u8()?;
    let input = c.ids()?;
    let target = c.ids()?;
    let teacher = match c.u8()? {
        0 => None,
        1 => {
            let k = c.u32()? as usize;
            let rows = (0..target.len())
                .map(|_| (0..k).map(|_| Ok((c.u32()?, c.f32()?))).collect::<Result<TopK>>())
                .collect::<Result<Vec<_>>>()?;
            Some(rows)
        }
        other => return Err(Error::Format(format!("bad sidecar flag {other}"))),
    };
    if c.pos != rec.len() {
        return Err(Error::Format("trailing bytes in dataset record".into()));
    }
    let ul2 = |mode| {
        Ok(TrainingExample::Ul2(Ul2Example {
            mode,
            input: input.clone(),
            target: target.clone(),
            truncated: false,
        }))
    };
    match mode {
        0 => Ok(TrainingExample::PrefixLm(PrefixLmExample {
            input,
            target,
            teacher_topk: teacher,
        })),
        _ if teacher.is_some() => Err(Error::Format("UL2 record with a sidecar".into())),
        1 => ul2(Mode::R),
        2 => ul2(Mode::S),
        3 => ul2(Mode::X),
        other => Err(Error::Format(format!("unknown record mode {other}"))),
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingExample>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<TrainingExample>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        out.push(decode(c.take(len)?)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn encode_dataset(examples: &[TrainingExample], mut sink: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    buf.extend((examples.len() as u64).to_le_bytes());
    for e in examples {
        buf.extend(encode(e)?);
    }
    sink.write_all(&buf)
        .map_err(|e| Error::Format(format!("write failed: {e}")))
}
