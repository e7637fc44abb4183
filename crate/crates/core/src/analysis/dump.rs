//! Attention dumps.
//!
//! Each record is one file: the magic `HPAT`, then little-endian `u32`
//! version (1), rank, and one `u32` per dimension, then the payload as
//! little-endian `f32` in row-major order. A UTF-8 index (`dump_index.txt`)
//! holds one line per record:
//!
//! ```text
//! layer=3 step=0 timestep=980 kind=self height=16 width=16 file=L03_S000_self.hpat
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "dump_index.txt";
const MAGIC: &[u8; 4] = b"HPAT";
const VERSION: u32 = 1;
const INDEX_HEADER: &str = "# attention dump index v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DumpKind {
    SelfAttention,
    Cross,
    SelfModified,
}

impl fmt::Display for DumpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DumpKind::SelfAttention => "self",
            DumpKind::Cross => "cross",
            DumpKind::SelfModified => "self_modified",
        })
    }
}

impl FromStr for DumpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(DumpKind::SelfAttention),
            "cross" => Ok(DumpKind::Cross),
            "self_modified" => Ok(DumpKind::SelfModified),
            other => Err(Error::invalid(format!("unknown dump kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpEntry {
    pub layer: usize,
    pub step: usize,
    pub timestep: usize,
    pub kind: DumpKind,
    pub resolution: (usize, usize),
    pub file: String,
}

impl fmt::Display for DumpEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer={} step={} timestep={} kind={} height={} width={} file={}",
            self.layer, self.step, self.timestep, self.kind, self.resolution.0, self.resolution.1, self.file
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub layer: usize,
    pub step: usize,
    pub timestep: usize,
    pub kind: DumpKind,
    pub resolution: (usize, usize),
    pub payload: Array2<f32>,
}

impl DumpRecord {
    fn check(&self) -> Result<()> {
        let hw = self.resolution.0 * self.resolution.1;
        let (rows, cols) = self.payload.dim();
        let ok = match self.kind {
            DumpKind::SelfAttention => rows == hw && cols == hw,
            // Concatenated-key maps carry one extra block of columns.
            DumpKind::SelfModified => rows == hw && (cols == hw || cols == 2 * hw),
            DumpKind::Cross => rows == hw && cols >= 1,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{} payload {rows}x{cols} does not fit resolution {:?}",
                self.kind, self.resolution
            )));
        }
        if self.payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} map of layer {} at step {}",
                self.kind, self.layer, self.step
            )));
        }
        Ok(())
    }
}

/// Single writer for one dump directory. Records go to disk immediately; the
/// index is written by [`DumpWriter::finish`].
#[derive(Debug)]
pub struct DumpWriter {
    dir: PathBuf,
    entries: Vec<DumpEntry>,
}

impl DumpWriter {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            entries: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, record: &DumpRecord) -> Result<&DumpEntry> {
        record.check()?;
        let file = format!("L{:02}_S{:03}_{}.hpat", record.layer, record.step, record.kind);
        if self.entries.iter().any(|e| e.file == file) {
            return Err(Error::invalid(format!("duplicate dump record {file}")));
        }
        let (rows, cols) = record.payload.dim();
        let mut bytes = Vec::with_capacity(20 + 4 * rows * cols);
        bytes.extend_from_slice(MAGIC);
        for v in [VERSION, 2, rows as u32, cols as u32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in record.payload.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = self.dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.push(DumpEntry {
            layer: record.layer,
            step: record.step,
            timestep: record.timestep,
            kind: record.kind,
            resolution: record.resolution,
            file,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[DumpEntry] {
        &self.entries
    }

    pub fn finish(self) -> Result<Vec<DumpEntry>> {
        let mut text = format!("{INDEX_HEADER}\n");
        for e in &self.entries {
            text.push_str(&format!("{e}\n"));
        }
        let path = self.dir.join(INDEX_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.entries)
    }
}

fn parse_entry(line: &str, path: &Path, n: usize) -> Result<DumpEntry> {
    let bad = |what: &str| Error::format(path, format!("line {n}: {what}"));
    let get = |key: &str| -> Result<String> {
        line.split_whitespace()
            .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing `{key}`")))
    };
    let num = |s: String, key: &str| -> Result<usize> {
        s.parse().map_err(|_| bad(&format!("`{key}` is not an integer")))
    };
    Ok(DumpEntry {
        layer: num(get("layer")?, "layer")?,
        step: num(get("step")?, "step")?,
        timestep: num(get("timestep")?, "timestep")?,
        kind: get("kind")?.parse().map_err(|_| bad("unknown kind"))?,
        resolution: (num(get("height")?, "height")?, num(get("width")?, "width")?),
        file: get("file")?,
    })
}

pub fn read_index(dir: &Path) -> Result<Vec<DumpEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::format(&path, "missing index header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_entry(l, &path, i + 2))
        .collect()
}

fn u32_at(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn read_payload(dir: &Path, entry: &DumpEntry) -> Result<Array2<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(&path, "bad header magic"));
    }
    let version = u32_at(&bytes, 4).ok_or_else(|| Error::format(&path, "truncated header"))?;
    if version != VERSION {
        return Err(Error::format(&path, format!("unsupported version {version}")));
    }
    let rank = u32_at(&bytes, 8).ok_or_else(|| Error::format(&path, "truncated header"))?;
    if rank != 2 {
        return Err(Error::format(&path, format!("expected rank 2, found {rank}")));
    }
    let (Some(rows), Some(cols)) = (u32_at(&bytes, 12), u32_at(&bytes, 16)) else {
        return Err(Error::format(&path, "truncated header"));
    };
    let (rows, cols) = (rows as usize, cols as usize);
    let body = &bytes[20..];
    if body.len() != 4 * rows * cols {
        return Err(Error::format(
            &path,
            format!("payload has {} bytes, expected {}", body.len(), 4 * rows * cols),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads every record listed in the directory's index.
pub fn read_dump(dir: &Path) -> Result<Vec<DumpRecord>> {
    read_index(dir)?
        .into_iter()
        .map(|e| {
            let payload = read_payload(dir, &e)?;
            Ok(DumpRecord {
                layer: e.layer,
                step: e.step,
                timestep: e.timestep,
                kind: e.kind,
                resolution: e.resolution,
                payload,
            })
        })
        .collect()
}
