//! Precomputed flow in the Middlebury `.flo` layout: f32 magic 202021.25,
//! i32 width, i32 height, then interleaved f32 (u, v), all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::flow::{FlowEstimator, FlowField};
use crate::datagen::Frame;
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn flo_name(from: usize, to: usize) -> String {
    format!("flow_{from:04}_{to:04}.flo")
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = flow.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_f32::<LittleEndian>(FLO_MAGIC).map_err(io)?;
    out.write_i32::<LittleEndian>(w as i32).map_err(io)?;
    out.write_i32::<LittleEndian>(h as i32).map_err(io)?;
    for y in 0..h {
        for x in 0..w {
            out.write_f32::<LittleEndian>(flow.u[[y, x]]).map_err(io)?;
            out.write_f32::<LittleEndian>(flow.v[[y, x]]).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let magic = input.read_f32::<LittleEndian>().map_err(io)?;
    if magic != FLO_MAGIC {
        return Err(Error::format(path, format!("bad .flo magic {magic}")));
    }
    let w = input.read_i32::<LittleEndian>().map_err(io)?;
    let h = input.read_i32::<LittleEndian>().map_err(io)?;
    if w <= 0 || h <= 0 || (w as i64) * (h as i64) > 1 << 28 {
        return Err(Error::format(path, format!("implausible .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut bytes = vec![0u8; w * h * 8];
    input.read_exact(&mut bytes).map_err(|_| Error::format(path, "truncated .flo payload"))?;
    let value = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    Ok(FlowField {
        u: Array2::from_shape_fn((h, w), |(y, x)| value(2 * (y * w + x))),
        v: Array2::from_shape_fn((h, w), |(y, x)| value(2 * (y * w + x) + 1)),
    })
}

/// Reads `flow_%04d_%04d.flo` files for a single clip from `dir`.
#[derive(Debug, Clone)]
pub struct PrecomputedFlow {
    pub dir: PathBuf,
}

impl PrecomputedFlow {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl FlowEstimator for PrecomputedFlow {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn flow(&self, frames: &[Frame], from: usize, to: usize) -> Result<FlowField> {
        let path = self.dir.join(flo_name(from, to));
        let field = read_flo(&path).map_err(|e| Error::Flow { from, to, reason: e.to_string() })?;
        if let Some(frame) = frames.get(from) {
            let (_, h, w) = frame.dim();
            if field.dim() != (h, w) {
                return Err(Error::Flow {
                    from,
                    to,
                    reason: format!("{} is {:?}, frames are {h}x{w}", path.display(), field.dim()),
                });
            }
        }
        Ok(field)
    }
}

/// Reads a pair's flow from `dir` when present, otherwise computes it with
/// `inner` and stores it there.
pub struct CachedFlow<'a> {
    pub dir: PathBuf,
    pub inner: &'a dyn FlowEstimator,
}

impl FlowEstimator for CachedFlow<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn flow(&self, frames: &[Frame], from: usize, to: usize) -> Result<FlowField> {
        let path = self.dir.join(flo_name(from, to));
        if path.exists() {
            return PrecomputedFlow::new(&self.dir).flow(frames, from, to);
        }
        let field = self.inner.flow(frames, from, to)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let tmp = path.with_extension("flo.tmp");
        write_flo(&tmp, &field)?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FlowField::zeros(4, 6);
        f.u[[1, 2]] = 1.5;
        f.v[[3, 5]] = -2.25;
        let path = dir.path().join(flo_name(0, 1));
        write_flo(&path, &f).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 12 + 4 * 6 * 8);
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), 202021.25);
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 6);
        assert_eq!(read_flo(&path).unwrap(), f);
    }

    #[test]
    fn bad_magic_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.flo");
        std::fs::write(&path, [0u8; 20]).unwrap();
        assert!(matches!(read_flo(&path), Err(Error::Format { .. })));
        let err = PrecomputedFlow::new(dir.path()).flow(&[], 2, 3).unwrap_err();
        assert!(matches!(err, Error::Flow { from: 2, to: 3, .. }));
    }

    #[test]
    fn cache_stores_and_reuses() {
        use crate::temporal::HornSchunck;
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..2)
            .map(|t| Frame::from_shape_fn((3, 16, 16), |(_, y, x)| ((x + 2 * t) as f32 * 0.7).sin() * 0.3 + y as f32 * 0.01))
            .collect();
        let hs = HornSchunck::default();
        let cache = CachedFlow { dir: dir.path().join("c"), inner: &hs };
        let a = cache.flow(&frames, 0, 1).unwrap();
        assert!(dir.path().join("c").join(flo_name(0, 1)).exists());
        let b = cache.flow(&frames, 0, 1).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
    }
}
