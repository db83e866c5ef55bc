//! Sparse little-endian binary snapshots of policy parameters.
//!
//! Layout: magic `SOPD`, format version (u32), taken_at_step (u64), dim (u64),
//! hash_seed (u64), copy_bias (f64), vocabulary size (u32) then each word as
//! u32 length + UTF-8 bytes, nonzero row count (u64) then each row as u32
//! index + `V` f64 weights in ascending index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use stepopsd_core::{PolicyParams, TeacherSnapshot};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SOPD";
pub const VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(mut w: W, snap: &TeacherSnapshot) -> std::io::Result<()> {
    let p = &snap.params;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&snap.taken_at_step.to_le_bytes())?;
    w.write_all(&(p.dim() as u64).to_le_bytes())?;
    w.write_all(&p.hash_seed().to_le_bytes())?;
    w.write_all(&p.copy_bias().to_le_bytes())?;
    w.write_all(&(p.vocab_size() as u32).to_le_bytes())?;
    for word in p.vocab() {
        w.write_all(&(word.len() as u32).to_le_bytes())?;
        w.write_all(word.as_bytes())?;
    }
    let rows: Vec<(usize, &[f64])> = p.nonzero_rows().collect();
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    for (i, row) in rows {
        w.write_all(&(i as u32).to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Snapshot(format!("reading {what}: {e}")))?;
        Ok(b)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }
}

/// Upper bound on the dense weight count accepted from a file.
const MAX_WEIGHTS: u64 = 1 << 28;

pub fn read_snapshot<R: Read>(r: R) -> Result<TeacherSnapshot> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>("magic")? != MAGIC {
        return Err(Error::Snapshot("not a snapshot file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let step = r.u64("step")?;
    let dim = r.u64("dim")?;
    let hash_seed = r.u64("hash seed")?;
    let copy_bias = r.f64("copy bias")?;
    let v = r.u32("vocabulary size")? as u64;
    if dim.checked_mul(v).is_none_or(|n| n > MAX_WEIGHTS) {
        return Err(Error::Snapshot(format!("implausible shape {dim} x {v}")));
    }
    let mut vocab = Vec::with_capacity(v as usize);
    for _ in 0..v {
        let len = r.u32("word length")? as usize;
        if len > 1024 {
            return Err(Error::Snapshot(format!("word length {len} too large")));
        }
        let mut b = vec![0u8; len];
        r.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Snapshot(format!("reading word: {e}")))?;
        vocab.push(String::from_utf8(b).map_err(|_| Error::Snapshot("word is not UTF-8".into()))?);
    }
    let (dim, v) = (dim as usize, v as usize);
    let mut weights = vec![0.0; dim * v];
    let rows = r.u64("row count")?;
    let mut last: Option<u32> = None;
    for _ in 0..rows {
        let i = r.u32("row index")?;
        if i as usize >= dim || last.is_some_and(|l| l >= i) {
            return Err(Error::Snapshot(format!("row index {i} out of order or range")));
        }
        last = Some(i);
        for x in &mut weights[i as usize * v..(i as usize + 1) * v] {
            *x = r.f64("weight")?;
        }
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::Snapshot(e.to_string()))? != 0 {
        return Err(Error::Snapshot("trailing bytes".into()));
    }
    let params = PolicyParams::from_parts(dim, hash_seed, copy_bias, vocab, weights)?;
    if !params.all_finite() {
        return Err(Error::Snapshot("non-finite weights".into()));
    }
    Ok(TeacherSnapshot {
        params: params.into(),
        taken_at_step: step,
    })
}

pub fn save(path: &Path, snap: &TeacherSnapshot) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(BufWriter::new(f), snap).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TeacherSnapshot> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(BufReader::new(f))
}
