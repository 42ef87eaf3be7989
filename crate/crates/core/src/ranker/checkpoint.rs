//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic     "NIAB-CKPT1"
//! config    u32 input_dim, d_model, n_layers, n_heads, mlp_hidden, max_steps, max_candidates
//!           u8  scoring (0 joint, 1 action_only)
//! u32       tensor count
//! tensor    u16 name length, name bytes, u8 rank, u32 dims[rank], f32 data[prod(dims)]
//! ```
//!
//! Loading rebuilds the expected tensor list from the config and requires an
//! exact match of names, order and shapes.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{RankerConfig, RankerError, RankerParams, Scoring};

pub const CKPT_MAGIC: &[u8; 10] = b"NIAB-CKPT1";

fn bad(msg: impl Into<String>) -> RankerError {
    RankerError::BadCheckpoint(msg.into())
}

pub fn write_checkpoint(params: &RankerParams, config: &RankerConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.num_params());
    out.extend_from_slice(CKPT_MAGIC);
    for v in [
        config.input_dim,
        config.d_model,
        config.n_layers,
        config.n_heads,
        config.mlp_hidden,
        config.max_steps,
        config.max_candidates,
    ] {
        out.write_u32::<LittleEndian>(v as u32).unwrap();
    }
    out.push(config.scoring.code());
    let tensors = params.tensors();
    out.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, shape, data) in tensors {
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in shape {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &x in data {
            out.write_f32::<LittleEndian>(x as f32).unwrap();
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(RankerConfig, RankerParams), RankerError> {
    let mut r = Cursor::new(bytes);
    let eof = |_| bad("truncated");
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    }
    let scoring = Scoring::from_code(r.read_u8().map_err(eof)?).ok_or_else(|| bad("unknown scoring mode"))?;
    let config = RankerConfig {
        input_dim: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        mlp_hidden: dims[4],
        max_steps: dims[5],
        max_candidates: dims[6],
        scoring,
    };
    config.validate().map_err(|e| bad(format!("config: {e}")))?;
    // Bound the allocation by what the remaining bytes could possibly hold.
    let [d, dm, l, _, hid, _, _] = dims.map(|v| v as u128);
    let expected_floats = 2 * (d * dm + dm) + l * (12 * dm * dm + 13 * dm) + 4 * (dm * dm + dm) + 2 * dm * hid + 2 * hid + 1;
    if expected_floats * 4 > bytes.len() as u128 {
        return Err(bad("config implies more data than the file holds"));
    }
    let mut params = RankerParams::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, config implies {}", expected.len())));
    }
    let mut slots = params.tensors_mut();
    for ((name, shape), (_, slot)) in expected.iter().zip(slots.iter_mut()) {
        let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
        let mut raw = vec![0u8; len];
        r.read_exact(&mut raw).map_err(eof)?;
        if raw != name.as_bytes() {
            return Err(bad(format!("expected tensor {name}, found {}", String::from_utf8_lossy(&raw))));
        }
        let rank = r.read_u8().map_err(eof)? as usize;
        let mut got = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            got.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
        }
        if &got != shape {
            return Err(RankerError::ShapeMismatch(format!("{name}: file {got:?}, config {shape:?}")));
        }
        for x in slot.iter_mut() {
            let v = r.read_f32::<LittleEndian>().map_err(eof)?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in {name}")));
            }
            *x = v as f64;
        }
    }
    drop(slots);
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, params: &RankerParams, config: &RankerConfig) -> Result<(), RankerError> {
    std::fs::write(path, write_checkpoint(params, config)).map_err(|e| RankerError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(RankerConfig, RankerParams), RankerError> {
    let bytes = std::fs::read(path).map_err(|e| RankerError::Io(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
