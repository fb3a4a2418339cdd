//! Spectrogram container.
//!
//! Layout: one UTF-8 JSON header line terminated by `\n`, then every record's
//! matrix as little-endian `f32`, row-major `[n_mels × T]`, concatenated in
//! header order.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MelSpectrogram;
use crate::io_util::write_atomic;
use crate::{Error, Result};

const FORMAT_TAG: &str = "songdisc-spectrograms";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub id: String,
    pub individual_id: String,
    pub song_type: String,
    #[serde(rename = "T")]
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub n_mels: usize,
    pub records: Vec<RecordMeta>,
}

pub fn encode(specs: &[MelSpectrogram]) -> Result<Vec<u8>> {
    let n_mels = specs.first().map_or(super::N_MELS, |s| s.n_mels);
    if let Some(bad) = specs.iter().find(|s| s.n_mels != n_mels) {
        return Err(Error::validation(format!(
            "record '{}' has {} bands, container uses {n_mels}",
            bad.id, bad.n_mels
        )));
    }
    let header = ContainerHeader {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        count: specs.len(),
        n_mels,
        records: specs
            .iter()
            .map(|s| RecordMeta {
                id: s.id.clone(),
                individual_id: s.individual_id.clone(),
                song_type: s.song_type.clone(),
                n_frames: s.n_frames,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(specs.iter().map(|s| s.values.len() * 4).sum());
    for s in specs {
        for v in &s.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes the corpus atomically.
pub fn save_spectrograms(path: &Path, specs: &[MelSpectrogram]) -> Result<()> {
    write_atomic(path, &encode(specs)?)
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<ContainerHeader> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("missing header line"));
    }
    let header: ContainerHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::format(format!("corrupt header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    if header.count != header.records.len() {
        return Err(Error::format(format!(
            "header count {} disagrees with {} record entries",
            header.count,
            header.records.len()
        )));
    }
    Ok(header)
}

/// Reads only the header of a container.
pub fn load_header(path: &Path) -> Result<ContainerHeader> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    read_header(&mut reader)
}

/// Reads a whole container. Any size mismatch fails the whole load.
pub fn load_spectrograms(path: &Path) -> Result<Vec<MelSpectrogram>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut reader)?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let expected: usize = header.records.iter().map(|r| r.n_frames * header.n_mels * 4).sum();
    if body.len() != expected {
        return Err(Error::format(format!(
            "body has {} bytes, header describes {expected}",
            body.len()
        )));
    }
    let mut offset = 0;
    header
        .records
        .into_iter()
        .map(|r| {
            let n = r.n_frames * header.n_mels;
            let values = body[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += n * 4;
            MelSpectrogram::new(r.id, r.individual_id, r.song_type, header.n_mels, r.n_frames, values)
                .map_err(|e| Error::format(e.to_string()))
        })
        .collect()
}
