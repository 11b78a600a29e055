//! Reader and writer for the IDX container used by MNIST, gzipped or raw.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const UBYTE: u8 = 0x08;

/// An unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn fail(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.into(),
        hint: "re-download the MNIST archive files (train-images-idx3-ubyte.gz and friends) into this directory".into(),
    }
}

impl IdxArray {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
            return Err(fail(path, "not an IDX file (bad magic)"));
        }
        if bytes[2] != UBYTE {
            return Err(fail(path, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
        }
        let rank = bytes[3] as usize;
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(fail(path, "truncated IDX header"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let data = &bytes[header..];
        if data.len() != count {
            return Err(fail(path, format!("IDX header promises {count} bytes, file holds {}", data.len())));
        }
        Ok(Self {
            dims,
            data: data.to_vec(),
        })
    }

    /// Reads `path`, decompressing when the content starts with the gzip magic.
    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| fail(path, e.to_string()))?;
        let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
            let mut out = Vec::new();
            GzDecoder::new(raw.as_slice())
                .read_to_end(&mut out)
                .map_err(|e| fail(path, format!("corrupt gzip stream: {e}")))?;
            out
        } else {
            raw
        };
        Self::parse(&bytes, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, UBYTE, self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_gz(&self, path: &Path) -> Result<()> {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&self.to_bytes())?;
        fs::write(path, enc.finish()?)?;
        Ok(())
    }
}

/// Finds `stem.gz` or `stem` inside `dir`.
pub fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(format!("{stem}.gz")), dir.join(stem)] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(fail(&dir.join(format!("{stem}.gz")), "file not found"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks `files` against a `SHA256SUMS` file in `dir`, if one exists.
/// Returns whether a checksum file was found.
pub fn verify_checksums(dir: &Path, files: &[&Path]) -> Result<bool> {
    let sums = dir.join("SHA256SUMS");
    if !sums.is_file() {
        return Ok(false);
    }
    let listing = fs::read_to_string(&sums)?;
    for file in files {
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let expected = listing
            .lines()
            .filter_map(|l| l.split_once(char::is_whitespace))
            .find(|(_, n)| n.trim().trim_start_matches('*') == name)
            .map(|(h, _)| h.to_ascii_lowercase());
        let Some(expected) = expected else {
            return Err(fail(file, "not listed in SHA256SUMS"));
        };
        let actual = sha256_hex(&fs::read(file)?);
        if actual != expected {
            return Err(fail(file, format!("checksum mismatch: expected {expected}, got {actual}")));
        }
    }
    Ok(true)
}
