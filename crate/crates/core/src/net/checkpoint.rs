//! Binary parameter checkpoints.
//!
//! Layout (all little-endian): magic `b"BM2C"`, `u32` version, `u32` dim,
//! `u32` width, `u32` hidden layers, `u32` flags (bit 0: sigma-conditioned,
//! bits 1-2: head layout 0 joint / 1 forward-only / 2 backward-only),
//! `u64` parameter count, then the parameters as `f32`.

use std::io::{Read, Write};

use ndarray::Array1;

use super::{DriftNet, Head, HeadLayout, NetSpec, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BM2C";

pub fn write_checkpoint<F: Real, W: Write>(net: &DriftNet<F>, mut w: W) -> Result<()> {
    let spec = net.spec();
    let heads = match spec.heads {
        HeadLayout::Joint => 0u32,
        HeadLayout::Single(Head::Forward) => 1,
        HeadLayout::Single(Head::Backward) => 2,
    };
    let flags = u32::from(spec.sigma_cond) | (heads << 1);
    w.write_all(MAGIC)?;
    for v in [CHECKPOINT_VERSION, spec.dim as u32, spec.width as u32, spec.hidden_layers as u32, flags] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(net.params().len() as u64).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&(p.f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<F: Real, R: Read>(mut r: R) -> Result<DriftNet<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let hidden_layers = read_u32(&mut r)? as usize;
    let flags = read_u32(&mut r)?;
    let heads = match (flags >> 1) & 0b11 {
        0 => HeadLayout::Joint,
        1 => HeadLayout::Single(Head::Forward),
        2 => HeadLayout::Single(Head::Backward),
        other => return Err(Error::Checkpoint(format!("unknown head layout {other}"))),
    };
    let spec = NetSpec { dim, width, hidden_layers, sigma_cond: flags & 1 == 1, heads };
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb)?;
    let n = u64::from_le_bytes(nb) as usize;
    if n != spec.param_count() {
        return Err(Error::Checkpoint(format!("{n} parameters stored, spec needs {}", spec.param_count())));
    }
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    let theta = buf
        .chunks_exact(4)
        .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect::<Array1<F>>();
    DriftNet::from_params(spec, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn round_trip_f32() {
        let mut spec = NetSpec::joint(3, 16, 2);
        spec.sigma_cond = true;
        let mut rng = RngStream::from_seed(1);
        let mut net = DriftNet::<f32>::init(spec, &mut rng).unwrap();
        for v in net.params_mut().iter_mut() {
            *v += 0.25;
        }
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 5 * 4 + 8 + 4 * spec.param_count());
        let back: DriftNet<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = vec![0u8; 64];
        assert!(read_checkpoint::<f32, _>(buf.as_slice()).is_err());
    }
}
