//! Binary checkpoints: `MODL1`, then `d, w, T, h` as `u32` LE and the step as
//! `u64` LE, then for each head the attention and value matrices row-major as
//! `f64` LE.

use std::path::Path;

use super::{Head, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MODL1";
const HEADER: usize = 5 + 4 * 4 + 8;

pub fn write_checkpoint(path: &Path, params: &ModelParams, step: u64) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER + 8 * params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for x in [params.d(), params.w(), params.t(), params.h()] {
        let x = u32::try_from(x).map_err(|_| Error::config("model dimension exceeds u32"))?;
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&step.to_le_bytes());
    for head in &params.heads {
        for m in [&head.attn, &head.value] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("missing MODL1 header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (d, w, t, h) = (field(0), field(1), field(2), field(3));
    let step = u64::from_le_bytes(bytes[21..29].try_into().unwrap());
    let dim = d + t + w;
    let expected = h * (dim * dim + d * dim) * 8;
    if bytes.len() - HEADER != expected || h == 0 {
        return Err(bad(format!(
            "body has {} bytes, header implies {expected}",
            bytes.len() - HEADER
        )));
    }
    let mut floats = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |r: usize, c: usize| Matrix::from_row_iterator(r, c, floats.by_ref().take(r * c));
    let heads = (0..h)
        .map(|_| Head {
            attn: take(dim, dim),
            value: take(d, dim),
        })
        .collect();
    Ok((ModelParams::from_heads(d, w, t, heads)?, step))
}
