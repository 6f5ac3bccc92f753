//! Checkpoint and tensor-blob files.
//!
//! Layout: a text header (magic line, then `key = value` lines, then one
//! blank line) followed by binary tensor blobs in declaration order. Each
//! blob is a little-endian u32 rank, that many little-endian u64 extents,
//! a little-endian u64 element count, then the elements as little-endian
//! f64. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchKind, ArchitectureSpec, Activation, HeadConfig, HeadMode, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "sphereat-ckpt v1";
pub const BLOB_MAGIC: &str = "sphereat-blob v1";

/// Write a header + tensor blob file.
pub fn write_blob_file(
    path: &Path,
    magic: &str,
    header: &[(String, String)],
    tensors: &[&Tensor],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{magic}")?;
    for (k, v) in header {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(t.len() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a header + tensor blob file, checking the magic line.
pub fn read_blob_file(
    path: &Path,
    magic: &str,
) -> Result<(BTreeMap<String, String>, Vec<Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    // Header is everything up to the first blank line.
    let mut pos = 0;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse(format!("unterminated header at byte {pos}")))?;
        let line = String::from_utf8(bytes[pos..pos + nl].to_vec())
            .map_err(|_| Error::Parse(format!("non-utf8 header at byte {pos}")))?;
        pos += nl + 1;
        if line.is_empty() {
            break;
        }
        lines.push(line);
    }
    if lines.is_empty() || lines[0] != magic {
        return Err(Error::Parse(format!(
            "bad magic: expected `{magic}`, found `{}`",
            lines.first().map(String::as_str).unwrap_or("")
        )));
    }
    let mut header = BTreeMap::new();
    for line in &lines[1..] {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header line `{line}`")))?;
        header.insert(k.trim().to_string(), v.trim().to_string());
    }

    let mut cur = Cursor { bytes: &bytes, pos };
    let count = cur.read_u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = cur.read_u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u64()? as usize);
        }
        let n = cur.read_u64()? as usize;
        if shape.iter().product::<usize>() != n {
            return Err(Error::Parse(format!(
                "blob shape {shape:?} disagrees with element count {n} at byte {}",
                cur.pos
            )));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.read_f64()?);
        }
        tensors.push(
            Tensor::new(shape, data).map_err(|e| Error::Parse(format!("bad tensor blob: {e}")))?,
        );
    }
    Ok((header, tensors))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}

/// Save a model checkpoint: architecture + head config in the text header,
/// parameter tensors in declaration order as blobs.
pub fn save_model(
    path: &Path,
    arch: &ArchitectureSpec,
    head: &HeadConfig,
    params: &ModelParams,
) -> Result<()> {
    let mut kv: Vec<(String, String)> = Vec::new();
    match &arch.kind {
        ArchKind::Mlp { input_dim, hidden } => {
            kv.push(("arch".into(), "mlp".into()));
            kv.push(("input_dim".into(), input_dim.to_string()));
            kv.push((
                "hidden".into(),
                hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            ));
        }
        ArchKind::Conv { image_hw, channels } => {
            kv.push(("arch".into(), "conv".into()));
            kv.push(("image_hw".into(), image_hw.to_string()));
            kv.push(("channels".into(), format!("{},{}", channels.0, channels.1)));
        }
    }
    kv.push(("activation".into(), "relu".into()));
    kv.push(("feature_dim".into(), arch.feature_dim.to_string()));
    kv.push(("classes".into(), arch.classes.to_string()));
    kv.push(("head".into(), head.mode.name().into()));
    kv.push(("head_s".into(), fmt_f64(head.s)));
    kv.push(("head_m".into(), fmt_f64(head.m)));
    let tensors: Vec<&Tensor> = params.tensors.iter().collect();
    write_blob_file(path, CHECKPOINT_MAGIC, &kv, &tensors)
}

fn header_get<'a>(h: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    h.get(k)
        .map(String::as_str)
        .ok_or_else(|| Error::Parse(format!("checkpoint header missing `{k}`")))
}

fn parse_usize(s: &str, k: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad integer `{s}` for `{k}`")))
}

fn parse_f64(s: &str, k: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad float `{s}` for `{k}`")))
}

fn parse_usize_list(s: &str, k: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_usize(p.trim(), k)).collect()
}

/// Load a model checkpoint saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ArchitectureSpec, HeadConfig, ModelParams)> {
    let (header, tensors) = read_blob_file(path, CHECKPOINT_MAGIC)?;
    let feature_dim = parse_usize(header_get(&header, "feature_dim")?, "feature_dim")?;
    let classes = parse_usize(header_get(&header, "classes")?, "classes")?;
    let kind = match header_get(&header, "arch")? {
        "mlp" => ArchKind::Mlp {
            input_dim: parse_usize(header_get(&header, "input_dim")?, "input_dim")?,
            hidden: parse_usize_list(header_get(&header, "hidden")?, "hidden")?,
        },
        "conv" => {
            let ch = parse_usize_list(header_get(&header, "channels")?, "channels")?;
            if ch.len() != 2 {
                return Err(Error::Parse("channels must be two integers".into()));
            }
            ArchKind::Conv {
                image_hw: parse_usize(header_get(&header, "image_hw")?, "image_hw")?,
                channels: (ch[0], ch[1]),
            }
        }
        other => return Err(Error::Parse(format!("unknown arch `{other}`"))),
    };
    let arch = ArchitectureSpec { kind, activation: Activation::Relu, feature_dim, classes };
    let head = HeadConfig::new(
        HeadMode::parse(header_get(&header, "head")?)?,
        parse_f64(header_get(&header, "head_s")?, "head_s")?,
        parse_f64(header_get(&header, "head_m")?, "head_m")?,
    )?;
    let params = ModelParams::from_tensors(&arch, tensors)?;
    Ok((arch, head, params))
}
