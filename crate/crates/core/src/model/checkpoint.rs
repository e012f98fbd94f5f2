//! `ORTH1` checkpoint container.
//!
//! ```text
//! ORTH1\n
//! header_bytes=<n>\n
//! <n bytes of key=value / tensor lines>
//! <raw little-endian f32 tensor data>
//! ```
//!
//! Tensor lines read `tensor <name> <rows> <cols> <byte offset> <elements>`;
//! offsets are relative to the start of the data region.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{OrthrusError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "ORTH1";
const FORMAT_VERSION: u32 = 1;

/// Free-form `key=value` pairs stored alongside the weights.
pub type Metadata = BTreeMap<String, String>;

pub fn encode(params: &Parameters, meta: &Metadata) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    header.push_str(&format!("sealed={}\n", params.is_sealed()));
    header.push_str(&format!("frozen_checksum={}\n", params.frozen_checksum()));
    for line in params.config.to_kv_lines() {
        header.push_str(&line);
        header.push('\n');
    }
    for (k, v) in meta {
        let v = v.replace('\n', " ");
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    let mut offset = 0usize;
    for id in params.ids() {
        let t = params.get(id);
        header.push_str(&format!(
            "tensor {} {} {} {} {}\n",
            params.name(id),
            t.rows,
            t.cols,
            offset,
            t.numel()
        ));
        offset += t.numel() * 4;
    }
    let mut out = Vec::with_capacity(header.len() + offset + 32);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("header_bytes={}\n", header.len()).as_bytes());
    out.extend_from_slice(header.as_bytes());
    for id in params.ids() {
        for x in &params.get(id).data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn fmt_err(msg: impl Into<String>) -> OrthrusError {
    OrthrusError::Format(msg.into())
}

fn read_line<'b>(bytes: &'b [u8], pos: &mut usize) -> Result<&'b str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt_err("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| fmt_err("header is not UTF-8"))
}

pub fn decode(bytes: &[u8]) -> Result<(Parameters, Metadata)> {
    let mut pos = 0;
    if read_line(bytes, &mut pos)? != MAGIC {
        return Err(fmt_err("bad magic, expected ORTH1"));
    }
    let len_line = read_line(bytes, &mut pos)?;
    let header_len: usize = len_line
        .strip_prefix("header_bytes=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fmt_err("missing header_bytes"))?;
    let header_end = pos + header_len;
    if header_end > bytes.len() {
        return Err(fmt_err("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[pos..header_end])
        .map_err(|_| fmt_err("header is not UTF-8"))?;
    let data = &bytes[header_end..];

    let mut config = ModelConfig::default();
    let mut meta = Metadata::new();
    let mut sealed = false;
    let mut checksum = None;
    let mut tensors = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 5 {
                return Err(fmt_err(format!("bad tensor line: {line}")));
            }
            let nums: Vec<usize> = f[1..]
                .iter()
                .map(|s| s.parse().map_err(|_| fmt_err(format!("bad tensor line: {line}"))))
                .collect::<Result<_>>()?;
            tensors.push((f[0].to_string(), nums[0], nums[1], nums[2], nums[3]));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("bad header line: {line}")))?;
        match k {
            "format_version" => {
                if v != FORMAT_VERSION.to_string() {
                    return Err(fmt_err(format!("unsupported format version {v}")));
                }
            }
            "sealed" => sealed = v == "true",
            "frozen_checksum" => checksum = Some(v.to_string()),
            _ if k.starts_with("meta.") => {
                meta.insert(k["meta.".len()..].to_string(), v.to_string());
            }
            _ => {
                if !config.set_kv(k, v)? {
                    return Err(fmt_err(format!("unknown header key {k}")));
                }
            }
        }
    }
    let mut params = Parameters::zeros(&config)?;
    if tensors.len() != params.len() {
        return Err(fmt_err(format!(
            "expected {} tensors, found {}",
            params.len(),
            tensors.len()
        )));
    }
    for (name, rows, cols, offset, n) in tensors {
        let id = params
            .find(&name)
            .ok_or_else(|| fmt_err(format!("unknown tensor {name}")))?;
        if rows * cols != n {
            return Err(fmt_err(format!("tensor {name}: shape does not match length")));
        }
        let end = offset + n * 4;
        if end > data.len() {
            return Err(fmt_err(format!("tensor {name}: data out of range")));
        }
        let values = data[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.replace(id, Tensor::from_vec(rows, cols, values))?;
    }
    if let Some(expected) = checksum {
        let found = params.frozen_checksum();
        if found != expected {
            return Err(OrthrusError::ChecksumMismatch { expected, found });
        }
    }
    params.set_sealed(sealed);
    Ok((params, meta))
}

pub fn save(path: &Path, params: &Parameters, meta: &Metadata) -> Result<()> {
    fs::write(path, encode(params, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Parameters, Metadata)> {
    decode(&fs::read(path)?)
}

/// SHA-256 of a checkpoint file's bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
