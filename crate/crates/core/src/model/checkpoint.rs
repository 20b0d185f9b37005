//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "VATN" | version u32
//! input_channels u32 | input_h u32 | input_w u32
//! stage count u32 | widths u32...
//! kernel u32 | pool_window u32 | pool_stride u32
//! use_cbam u8 | reduction u32 | spatial_kernel u32 | num_classes u32
//! seed u64 | bn_eps f64 | bn_momentum f64 | train_fraction f64
//! record count u32
//! per record: name_len u32 | name utf-8 | rank u32 | extents u32... | f32 data
//! ```
//!
//! Records cover every trainable parameter and the batch-norm running
//! statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAGIC: &[u8; 4] = b"VATN";
const VERSION: u32 = 1;
const MAX_NAME: usize = 256;

/// Run metadata stored next to the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub train_fraction: f64,
}

pub fn write_checkpoint<W: Write>(model: &Model<f32>, info: CheckpointInfo, mut w: W) -> Result<()> {
    let spec = model.spec();
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_usize(&mut w, spec.input_channels)?;
    put_usize(&mut w, spec.input_h)?;
    put_usize(&mut w, spec.input_w)?;
    put_usize(&mut w, spec.widths.len())?;
    for &c in &spec.widths {
        put_usize(&mut w, c)?;
    }
    put_usize(&mut w, spec.kernel)?;
    put_usize(&mut w, spec.pool_window)?;
    put_usize(&mut w, spec.pool_stride)?;
    w.write_all(&[spec.use_cbam as u8])?;
    put_usize(&mut w, spec.reduction)?;
    put_usize(&mut w, spec.spatial_kernel)?;
    put_usize(&mut w, spec.num_classes)?;
    w.write_all(&model.seed().to_le_bytes())?;
    w.write_all(&spec.bn_eps.to_le_bytes())?;
    w.write_all(&spec.bn_momentum.to_le_bytes())?;
    w.write_all(&info.train_fraction.to_le_bytes())?;

    let params = model.parameters();
    let buffers = model.buffers();
    put_usize(&mut w, params.len() + buffers.len())?;
    for (name, p) in &params {
        put_record(&mut w, name, p.dims(), &p.value)?;
    }
    for (name, b) in &buffers {
        put_record(&mut w, name, &[b.len()], b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model<f32>, CheckpointInfo)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_channels = get_usize(&mut r)?;
    let input_h = get_usize(&mut r)?;
    let input_w = get_usize(&mut r)?;
    let stages = get_usize(&mut r)?;
    if stages > 64 {
        return Err(Error::Checkpoint(format!("implausible stage count {stages}")));
    }
    let widths = (0..stages).map(|_| get_usize(&mut r)).collect::<Result<Vec<_>>>()?;
    let kernel = get_usize(&mut r)?;
    let pool_window = get_usize(&mut r)?;
    let pool_stride = get_usize(&mut r)?;
    let use_cbam = match get_u8(&mut r)? {
        0 => false,
        1 => true,
        v => return Err(Error::Checkpoint(format!("bad attention flag {v}"))),
    };
    let reduction = get_usize(&mut r)?;
    let spatial_kernel = get_usize(&mut r)?;
    let num_classes = get_usize(&mut r)?;
    let seed = u64::from_le_bytes(get_bytes(&mut r)?);
    let bn_eps = f64::from_le_bytes(get_bytes(&mut r)?);
    let bn_momentum = f64::from_le_bytes(get_bytes(&mut r)?);
    let train_fraction = f64::from_le_bytes(get_bytes(&mut r)?);
    let spec = ModelSpec {
        input_channels,
        input_h,
        input_w,
        widths,
        kernel,
        pool_window,
        pool_stride,
        use_cbam,
        reduction,
        spatial_kernel,
        num_classes,
        bn_eps,
        bn_momentum,
    };
    let mut model = Model::<f32>::build(&spec, seed)
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;

    let count = get_usize(&mut r)?;
    let expected = model.parameters().len() + model.buffers().len();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} records, found {count}"
        )));
    }
    let mut seen = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, dims, data) = get_record(&mut r)?;
        if seen.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
        if let Some((_, p)) = model.parameters_mut().into_iter().find(|(n, _)| *n == name) {
            if p.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected dims {:?}, found {dims:?}",
                    p.dims()
                )));
            }
            p.value = data;
        } else if let Some((_, b)) = model.buffers_mut().into_iter().find(|(n, _)| *n == name) {
            if dims != [b.len()] {
                return Err(Error::Checkpoint(format!("{name}: bad length {dims:?}")));
            }
            *b = data;
        } else {
            return Err(Error::Checkpoint(format!("unknown record {name}")));
        }
        seen.push(name);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    model.set_training(false);
    Ok((model, CheckpointInfo { train_fraction }))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, info: CheckpointInfo) -> Result<()> {
    write_checkpoint(model, info, BufWriter::new(File::create(path)?))
}

/// Loads a checkpoint; the returned model is in inference mode.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointInfo)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_usize<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    put_u32(w, v)
}

fn put_record<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    put_usize(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_usize(w, dims.len())?;
    for &d in dims {
        put_usize(w, d)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

fn get_bytes<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(get_bytes::<R, 1>(r)?[0])
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

fn get_usize<R: Read>(r: &mut R) -> Result<usize> {
    Ok(get_u32(r)? as usize)
}

fn get_record<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let len = get_usize(r)?;
    if len == 0 || len > MAX_NAME {
        return Err(Error::Checkpoint(format!("bad record name length {len}")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?;
    let rank = get_usize(r)?;
    if rank == 0 || rank > 4 {
        return Err(Error::Checkpoint(format!("{name}: bad rank {rank}")));
    }
    let dims = (0..rank).map(|_| get_usize(r)).collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= 1 << 28)
        .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible dims {dims:?}")))?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("{name}: non-finite value")));
    }
    Ok((name, dims, data))
}

impl<T: Real> Model<T> {
    /// Copy of the model with every parameter and buffer converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.spec, self.seed).expect("spec already validated");
        for ((_, dst), (_, src)) in out.parameters_mut().into_iter().zip(self.parameters()) {
            *dst = src.cast();
        }
        for ((_, dst), (_, src)) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.iter().map(|&v| U::of(v.as_f64())).collect();
        }
        out.set_training(self.is_training());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            input_h: 8,
            input_w: 24,
            widths: vec![2, 3],
            pool_window: 2,
            pool_stride: 2,
            ..ModelSpec::new(4)
        }
    }

    #[test]
    fn roundtrip() {
        let mut m = Model::<f32>::build(&tiny(), 9).unwrap();
        m.stages[0].bn.running_mean = vec![0.25, -1.5];
        m.head.weight.value[3] = 7.0;
        let info = CheckpointInfo { train_fraction: 0.7 };
        let mut buf = Vec::new();
        write_checkpoint(&m, info, &mut buf).unwrap();
        let (back, back_info) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back_info, info);
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.seed(), 9);
        assert!(!back.is_training());
        for ((na, a), (nb, b)) in m.parameters().iter().zip(back.parameters()) {
            assert_eq!(na, &nb);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.stages[0].bn.running_mean, vec![0.25, -1.5]);
    }

    #[test]
    fn rejects_damage() {
        let m = Model::<f32>::build(&tiny(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, CheckpointInfo { train_fraction: 0.5 }, &mut buf).unwrap();
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(extra.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&[][..]).is_err());
    }

    #[test]
    fn cast_preserves_values() {
        let m = Model::<f32>::build(&tiny(), 2).unwrap();
        let d = m.cast::<f64>();
        for ((_, a), (_, b)) in m.parameters().iter().zip(d.parameters()) {
            assert!(a.value.iter().zip(&b.value).all(|(&x, &y)| x as f64 == y));
        }
    }
}
