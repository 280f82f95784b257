//! Binary scene and checkpoint formats. All numbers are little-endian.
//!
//! Scene: `"P4CSCN01"`, `u64 N`, `u64 C`, `f64 extent`, `N×3 f64` points,
//! `N×3 f64` colours, `N u32` labels.
//!
//! Checkpoint: `"P4CCKP01"`, `u32 version`, `u8 fusion`, `u32 hidden`,
//! `u32 dim`, `u32 knn_k`, then `W1 b1 W2 b2 V1 bv1 V2 bv2` as `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderParams, FusionMode};
use crate::scene::Scene;

pub const SCENE_MAGIC: &[u8; 8] = b"P4CSCN01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"P4CCKP01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_scene(w: &mut impl Write, s: &Scene) -> Result<()> {
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(&(s.num_classes as u64).to_le_bytes())?;
    w.write_all(&s.extent.to_le_bytes())?;
    for v in s.points.iter().chain(&s.colors).flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    for l in &s.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn scene_to_bytes(s: &Scene) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + s.len() * 52);
    write_scene(&mut buf, s).expect("writing to a Vec cannot fail");
    buf
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
        Ok(b)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn vec3s(&mut self, n: usize) -> Result<Vec<[f64; 3]>> {
        (0..n).map(|_| Ok([self.f64()?, self.f64()?, self.f64()?])).collect()
    }
}

pub fn read_scene(r: &mut impl Read) -> Result<Scene> {
    let mut rd = Reader { inner: r };
    if &rd.bytes::<8>()? != SCENE_MAGIC {
        return Err(Error::Format("not a scene file (bad magic)".into()));
    }
    let n = rd.u64()? as usize;
    let c = rd.u64()? as usize;
    let extent = rd.f64()?;
    if n > 1 << 28 {
        return Err(Error::Format(format!("implausible point count {n}")));
    }
    let points = rd.vec3s(n)?;
    let colors = rd.vec3s(n)?;
    let labels = (0..n).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let s = Scene {
        points,
        colors,
        labels,
        num_classes: c,
        extent,
    };
    s.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(s)
}

pub fn save_scene(path: &Path, s: &Scene) -> Result<()> {
    fs::write(path, scene_to_bytes(s))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    read_scene(&mut fs::File::open(path)?)
}

pub fn write_checkpoint(w: &mut impl Write, p: &EncoderParams) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[p.fusion.code()])?;
    for v in [p.hidden, p.dim, p.knn_k] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (_, t, _) in p.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_to_bytes(p: &EncoderParams) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, p).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<EncoderParams> {
    let mut rd = Reader { inner: r };
    if &rd.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let fusion = FusionMode::from_code(rd.bytes::<1>()?[0])?;
    let hidden = rd.u32()? as usize;
    let dim = rd.u32()? as usize;
    let knn_k = rd.u32()? as usize;
    if hidden > 1 << 16 || dim > 1 << 16 {
        return Err(Error::Format("implausible layer sizes".into()));
    }
    let mut p = EncoderParams::zeros(fusion, hidden, dim, knn_k);
    for (_, t, _) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rd.f64()?;
        }
    }
    p.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(p)
}

pub fn save_checkpoint(path: &Path, p: &EncoderParams) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(p))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    read_checkpoint(&mut fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn scene_layout_is_exact() {
        let s = Scene {
            points: vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]],
            colors: vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]],
            labels: vec![3, 7],
            num_classes: 8,
            extent: 4.0,
        };
        let b = scene_to_bytes(&s);
        assert_eq!(b.len(), 8 + 8 + 8 + 8 + 2 * 3 * 8 * 2 + 2 * 4);
        assert_eq!(&b[..8], b"P4CSCN01");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 8);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 4.0);
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), 1.0);
        assert_eq!(u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap()), 7);
        assert_eq!(read_scene(&mut b.as_slice()).unwrap(), s);
    }

    #[test]
    fn generated_scene_round_trips() {
        let s = generate_scene(4, &SceneConfig::default()).unwrap();
        assert_eq!(read_scene(&mut scene_to_bytes(&s).as_slice()).unwrap(), s);
    }

    #[test]
    fn corrupt_scene_rejected() {
        let s = generate_scene(4, &SceneConfig::default()).unwrap();
        let b = scene_to_bytes(&s);
        assert!(read_scene(&mut &b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(read_scene(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_header_and_round_trip() {
        let p = EncoderParams::init(FusionMode::Hybrid, 8, 4, 3, &mut rng::rng(1)).unwrap();
        let b = checkpoint_to_bytes(&p);
        assert_eq!(&b[..8], b"P4CCKP01");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], 2);
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[21..25].try_into().unwrap()), 3);
        assert_eq!(b.len(), 25 + 8 * p.num_params());
        assert_eq!(f64::from_le_bytes(b[25..33].try_into().unwrap()), p.point.w1[0]);
        assert_eq!(read_checkpoint(&mut b.as_slice()).unwrap(), p);
    }
}
