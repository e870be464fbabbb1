//! Binary checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "SMLNET01"
//! activation   u8        0 = relu, 1 = identity
//! n_sizes      u32       number of entries in layer_sizes
//! layer_sizes  u32 × n_sizes   [input, hidden.., output]
//! n_time_bins  u32
//! embed_dim    u32
//! then, for each layer: weights (out × in, row-major f64), biases (out f64)
//! then the time embedding (n_time_bins × embed_dim, row-major f64)
//! ```
//!
//! Floats are written bit-for-bit, so a round trip is exact.

use std::io::{Read, Write};

use super::{init_params_with_embedding, Activation, ApproximatorParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMLNET01";

pub fn write_params<W: Write>(out: &mut W, params: &ApproximatorParams) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[params.activation.code()])?;
    let sizes = params.layer_sizes();
    write_u32(out, sizes.len())?;
    for s in sizes {
        write_u32(out, s)?;
    }
    write_u32(out, params.n_time_bins())?;
    write_u32(out, params.embed_dim())?;
    for block in params.slices() {
        for v in block {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(input: &mut R) -> Result<ApproximatorParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a network checkpoint (bad magic)".into()));
    }
    let mut code = [0u8; 1];
    input.read_exact(&mut code)?;
    let activation = Activation::from_code(code[0])
        .ok_or_else(|| Error::Format(format!("unknown activation code {}", code[0])))?;
    let n_sizes = read_u32(input)?;
    if !(2..=64).contains(&n_sizes) {
        return Err(Error::Format(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes).map(|_| read_u32(input)).collect::<Result<Vec<_>>>()?;
    let n_time_bins = read_u32(input)?;
    let embed_dim = read_u32(input)?;
    let mut params = init_params_with_embedding(&sizes, n_time_bins, embed_dim, activation, 0)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = [0u8; 8];
    for block in params.slices_mut() {
        for v in block.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(params)
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}
