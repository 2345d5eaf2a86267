//! Binary token dataset: a 25-byte header (`MKTK1`, then `d, w, T, h, count`
//! as `u32` LE) followed by `count · (T + w)` token ids as `u16` LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{SequenceBatch, TaskSpec};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"MKTK1";

/// Header fields of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub d: u32,
    pub w: u32,
    pub t: u32,
    pub h: u32,
    pub count: u32,
}

pub fn write_dataset(path: &Path, spec: &TaskSpec, batch: &SequenceBatch) -> Result<()> {
    if batch.seq_len() != spec.seq_len() {
        return Err(Error::dim("batch sequence length does not match the task"));
    }
    let u32_of = |x: usize| u32::try_from(x).map_err(|_| Error::config(format!("{x} does not fit the dataset header")));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(25);
    header.extend_from_slice(DATASET_MAGIC);
    for x in [spec.d(), spec.w(), spec.t(), spec.h(), batch.count()] {
        header.extend_from_slice(&u32_of(x)?.to_le_bytes());
    }
    let mut body = Vec::with_capacity(batch.tokens().len() * 2);
    for t in batch.tokens() {
        body.extend_from_slice(&t.to_le_bytes());
    }
    out.write_all(&header)
        .and_then(|_| out.write_all(&body))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, SequenceBatch)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 25 || &bytes[..5] != DATASET_MAGIC {
        return Err(bad("missing MKTK1 header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let header = DatasetHeader {
        d: field(0),
        w: field(1),
        t: field(2),
        h: field(3),
        count: field(4),
    };
    let seq_len = header.w as usize + header.t as usize;
    let expected = header.count as usize * seq_len * 2;
    let body = &bytes[25..];
    if body.len() != expected || seq_len == 0 {
        return Err(bad(format!("body has {} bytes, header implies {expected}", body.len())));
    }
    let tokens: Vec<u16> = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    if let Some(t) = tokens.iter().find(|t| **t as u32 >= header.d) {
        return Err(bad(format!("token id {t} outside alphabet of size {}", header.d)));
    }
    Ok((header, SequenceBatch::from_tokens(seq_len, tokens)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{build_task, sample_batch, TaskConfig};
    use crate::rng::stream;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let spec = build_task(&TaskConfig::minimal(9, 5, 2)).unwrap();
        let batch = sample_batch(&spec, 4, &mut stream(2, 9)).unwrap();
        write_dataset(&path, &spec, &batch).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 25 + 4 * 11 * 2);
        let (header, back) = read_dataset(&path).unwrap();
        assert_eq!(back, batch);
        assert_eq!(
            header,
            DatasetHeader {
                d: 9,
                w: 6,
                t: 5,
                h: 3,
                count: 4
            }
        );

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
        let mut big = bytes.clone();
        big[25] = 200;
        std::fs::write(&path, &big).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }
}
