//! Binary parameter block.
//!
//! ```text
//! header (16 bytes): b"SGALNET\0" | version: u32 LE | layer count: u32 LE
//! per layer: in_dim u64 LE | out_dim u64 LE | activation u8 | dropout f64 LE
//!            | weights row-major f64 LE | biases f64 LE
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::{Activation, DenseLayer, ParameterSet};
use crate::{Error, Result, Scalar};

pub const PARAMS_MAGIC: [u8; 8] = *b"SGALNET\0";
pub const PARAMS_VERSION: u32 = 1;

// Guards against allocating absurd buffers from a corrupt header.
const MAX_DIM: u64 = 1 << 24;

pub fn write_parameter_set<S: Scalar, W: Write>(
    out: &mut W,
    params: &ParameterSet<S>,
) -> Result<()> {
    out.write_all(&PARAMS_MAGIC)?;
    out.write_all(&PARAMS_VERSION.to_le_bytes())?;
    let count =
        u32::try_from(params.layers.len()).map_err(|_| Error::Format("too many layers".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for layer in &params.layers {
        out.write_all(&(layer.in_dim() as u64).to_le_bytes())?;
        out.write_all(&(layer.out_dim() as u64).to_le_bytes())?;
        out.write_all(&[layer.activation.code()])?;
        out.write_all(&layer.dropout_rate.to_le_bytes())?;
        // iter() on a standard-layout array is row-major
        for v in layer.weights.iter().chain(layer.biases.iter()) {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated parameter block".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array::<8, _>(input)?))
}

fn read_dim<R: Read>(input: &mut R) -> Result<usize> {
    let v = u64::from_le_bytes(read_array::<8, _>(input)?);
    if v == 0 || v > MAX_DIM {
        return Err(Error::Format(format!("implausible layer dimension {v}")));
    }
    Ok(v as usize)
}

pub fn read_parameter_set<S: Scalar, R: Read>(input: &mut R) -> Result<ParameterSet<S>> {
    let magic = read_array::<8, _>(input)?;
    if magic != PARAMS_MAGIC {
        return Err(Error::Format("bad parameter block magic".into()));
    }
    let version = u32::from_le_bytes(read_array::<4, _>(input)?);
    if version != PARAMS_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter block version {version}"
        )));
    }
    let count = u32::from_le_bytes(read_array::<4, _>(input)?) as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let in_dim = read_dim(input)?;
        let out_dim = read_dim(input)?;
        let [code] = read_array::<1, _>(input)?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown activation code {code}")))?;
        let dropout_rate = read_f64(input)?;
        let mut weights = Array2::zeros((out_dim, in_dim));
        for v in weights.iter_mut() {
            *v = S::c(read_f64(input)?);
        }
        let mut biases = Array1::zeros(out_dim);
        for v in biases.iter_mut() {
            *v = S::c(read_f64(input)?);
        }
        layers.push(DenseLayer::new(weights, biases, activation, dropout_rate)?);
    }
    ParameterSet::new(layers)
}
