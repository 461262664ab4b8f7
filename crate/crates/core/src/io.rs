//! Little-endian binary formats: fields, masks, streamlines, trajectories
//! and parameter checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::diffcore::{ModelParams, Tensor};
use crate::field::{GridSpec, ShField, Streamline, TrackingMask};
use crate::scalar::Real;
use crate::traj::Trajectory;
use crate::{Error, Result};

pub const MAGIC_FIELD: &[u8; 8] = b"TRLF-SHF";
pub const MAGIC_MASK: &[u8; 8] = b"TRLF-MSK";
pub const MAGIC_TRACKS: &[u8; 8] = b"TRLF-TRK";
pub const MAGIC_TRAJ: &[u8; 8] = b"TRLF-TRJ";
pub const MAGIC_CKPT: &[u8; 8] = b"TRLF-CKP";
pub const VERSION: u32 = 1;

fn expect_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("expected magic {}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(&m))));
    }
    Ok(())
}

fn expect_version(r: &mut impl Read) -> Result<()> {
    let v = r.read_u32::<LE>()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

/// Caps preallocation driven by untrusted header counts.
const PREALLOC_CAP: usize = 1 << 16;

fn checked_numel(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("implausible extent {dims:?}")))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

fn write_grid<T: Real>(w: &mut impl Write, s: &GridSpec<T>) -> Result<()> {
    for &d in &s.dims {
        w.write_u32::<LE>(len_u32(d, "dimension")?)?;
    }
    for v in s.spacing.iter().chain(&s.origin) {
        w.write_f32::<LE>(v.to_f64_lossy() as f32)?;
    }
    Ok(())
}

fn read_grid<T: Real>(r: &mut impl Read) -> Result<GridSpec<T>> {
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LE>()? as usize;
    }
    let mut f = [T::zero(); 6];
    for v in &mut f {
        *v = T::lit(f64::from(r.read_f32::<LE>()?));
    }
    GridSpec::new(dims, [f[0], f[1], f[2]], [f[3], f[4], f[5]]).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_field<T: Real>(w: &mut impl Write, f: &ShField<T>) -> Result<()> {
    w.write_all(MAGIC_FIELD)?;
    w.write_u32::<LE>(VERSION)?;
    write_grid(w, &f.spec)?;
    w.write_u32::<LE>(len_u32(f.n_coeff, "n_coeff")?)?;
    for c in &f.coeffs {
        w.write_f32::<LE>(c.to_f64_lossy() as f32)?;
    }
    Ok(())
}

pub fn read_field<T: Real>(r: &mut impl Read) -> Result<ShField<T>> {
    expect_magic(r, MAGIC_FIELD)?;
    expect_version(r)?;
    let spec = read_grid(r)?;
    let n_coeff = r.read_u32::<LE>()? as usize;
    let mut raw = vec![0f32; checked_numel(&[spec.dims[0], spec.dims[1], spec.dims[2], n_coeff])?];
    r.read_f32_into::<LE>(&mut raw)?;
    ShField::from_vec(spec, n_coeff, raw.into_iter().map(|v| T::lit(f64::from(v))).collect())
}

pub fn write_mask<T: Real>(w: &mut impl Write, m: &TrackingMask<T>) -> Result<()> {
    w.write_all(MAGIC_MASK)?;
    w.write_u32::<LE>(VERSION)?;
    write_grid(w, &m.spec)?;
    let bytes: Vec<u8> = m.voxels.iter().map(|&b| u8::from(b)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_mask<T: Real>(r: &mut impl Read) -> Result<TrackingMask<T>> {
    expect_magic(r, MAGIC_MASK)?;
    expect_version(r)?;
    let spec = read_grid(r)?;
    let mut bytes = vec![0u8; checked_numel(&spec.dims)?];
    r.read_exact(&mut bytes)?;
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::Format(format!("mask byte {b} is not 0/1")));
    }
    TrackingMask::from_vec(spec, bytes.into_iter().map(|b| b == 1).collect())
}

pub fn write_streamlines<T: Real>(w: &mut impl Write, sls: &[Streamline<T>]) -> Result<()> {
    w.write_all(MAGIC_TRACKS)?;
    w.write_u32::<LE>(len_u32(sls.len(), "streamline count")?)?;
    for s in sls {
        w.write_u32::<LE>(len_u32(s.points.len(), "point count")?)?;
        for p in &s.points {
            for c in p {
                w.write_f32::<LE>(c.to_f64_lossy() as f32)?;
            }
        }
    }
    Ok(())
}

pub fn read_streamlines<T: Real>(r: &mut impl Read) -> Result<Vec<Streamline<T>>> {
    expect_magic(r, MAGIC_TRACKS)?;
    let n = r.read_u32::<LE>()? as usize;
    let mut out = Vec::with_capacity(n.min(PREALLOC_CAP));
    for _ in 0..n {
        let np = r.read_u32::<LE>()? as usize;
        let mut raw = vec![0f32; checked_numel(&[np, 3])?];
        r.read_f32_into::<LE>(&mut raw)?;
        out.push(Streamline::new(raw.chunks_exact(3).map(|c| [T::lit(f64::from(c[0])), T::lit(f64::from(c[1])), T::lit(f64::from(c[2]))]).collect()));
    }
    Ok(out)
}

/// Every trajectory must have `state_dim`-wide states; the file does not
/// record the width, so readers pass it back in.
pub fn write_trajectories<T: Real>(w: &mut impl Write, trs: &[Arc<Trajectory<T>>]) -> Result<()> {
    w.write_all(MAGIC_TRAJ)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(len_u32(trs.len(), "trajectory count")?)?;
    for t in trs {
        w.write_u32::<LE>(len_u32(t.len(), "trajectory length")?)?;
        w.write_u32::<LE>(t.tract_id)?;
        for i in 0..t.len() {
            w.write_f64::<LE>(t.rtg[i].to_f64_lossy())?;
            for v in t.state(i).iter().chain(&t.actions[i]) {
                w.write_f64::<LE>(v.to_f64_lossy())?;
            }
        }
    }
    Ok(())
}

pub fn read_trajectories<T: Real>(r: &mut impl Read, state_dim: usize) -> Result<Vec<Arc<Trajectory<T>>>> {
    expect_magic(r, MAGIC_TRAJ)?;
    expect_version(r)?;
    let n = r.read_u32::<LE>()? as usize;
    let mut out = Vec::with_capacity(n.min(PREALLOC_CAP));
    let mut row = vec![0f64; 1 + state_dim + 3];
    for _ in 0..n {
        let len = r.read_u32::<LE>()? as usize;
        let tract_id = r.read_u32::<LE>()?;
        let cap = len.min(PREALLOC_CAP);
        let mut rtg = Vec::with_capacity(cap);
        let mut states = Vec::with_capacity(cap * state_dim);
        let mut actions = Vec::with_capacity(cap);
        for _ in 0..len {
            r.read_f64_into::<LE>(&mut row)?;
            rtg.push(T::lit(row[0]));
            states.extend(row[1..=state_dim].iter().map(|&v| T::lit(v)));
            let a = &row[1 + state_dim..];
            actions.push([T::lit(a[0]), T::lit(a[1]), T::lit(a[2])]);
        }
        out.push(Arc::new(Trajectory::new(rtg, states, actions, tract_id, state_dim).map_err(|e| Error::Format(e.to_string()))?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after trajectories (wrong state width?)".into()));
    }
    Ok(out)
}

/// Segments in name order: name, trainable flag, shape, f64 data.
pub fn write_params<T: Real>(w: &mut impl Write, p: &ModelParams<T>) -> Result<()> {
    w.write_all(MAGIC_CKPT)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(len_u32(p.len(), "segment count")?)?;
    for (name, seg) in p.iter() {
        w.write_u32::<LE>(len_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(u8::from(seg.trainable))?;
        let shape = seg.tensor.shape();
        w.write_u32::<LE>(len_u32(shape.len(), "rank")?)?;
        for &d in shape {
            w.write_u64::<LE>(d as u64)?;
        }
        for v in seg.tensor.data() {
            w.write_f64::<LE>(v.to_f64_lossy())?;
        }
    }
    Ok(())
}

pub fn read_params<T: Real>(r: &mut impl Read) -> Result<ModelParams<T>> {
    expect_magic(r, MAGIC_CKPT)?;
    expect_version(r)?;
    let n = r.read_u32::<LE>()?;
    let mut p = ModelParams::new();
    for _ in 0..n {
        let nl = r.read_u32::<LE>()? as usize;
        let mut name = vec![0u8; nl];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("segment name is not utf-8".into()))?;
        let trainable = r.read_u8()? != 0;
        let rank = r.read_u32::<LE>()? as usize;
        let shape = (0..rank).map(|_| r.read_u64::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let mut raw = vec![0f64; checked_numel(&shape)?];
        r.read_f64_into::<LE>(&mut raw)?;
        let t = Tensor::new(shape, raw.into_iter().map(T::lit).collect()).map_err(|e| Error::Format(e.to_string()))?;
        p.insert(name, t, trainable)?;
    }
    Ok(p)
}

pub fn save<P: AsRef<Path>>(path: P, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>, R>(path: P, f: impl FnOnce(&mut BufReader<File>) -> Result<R>) -> Result<R> {
    f(&mut BufReader::new(File::open(path)?))
}
