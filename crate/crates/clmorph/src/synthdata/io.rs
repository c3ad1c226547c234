//! CLMV volume files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CLMV"
//! 4       2     format version (u16) = 1
//! 6       1     dtype code (u8): 0 = f64 image, 1 = u8 labels,
//!               2 = f64 displacement field (3 components, [3,D,H,W])
//! 7       12    extents (3 x u32): D, H, W
//! 19      12    spacing (3 x f32), millimetres per voxel
//! 31      ...   payload: D*H*W f64 | D*H*W u8 | 3*D*H*W f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{ImageVolume, LabelVolume};
use crate::warp::DisplacementField;

pub const MAGIC: [u8; 4] = *b"CLMV";
pub const VERSION: u16 = 1;

pub const DTYPE_IMAGE: u8 = 0;
pub const DTYPE_LABELS: u8 = 1;
pub const DTYPE_FIELD: u8 = 2;

/// Any volume a CLMV file can hold.
#[derive(Debug, Clone)]
pub enum AnyVolume {
    Image(ImageVolume),
    Labels(LabelVolume),
    Field(DisplacementField),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!(
                    "truncated file: needed {n} bytes for {what} at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn encode(dtype: u8, shape: [usize; 3], spacing: [f32; 3], payload_f64: Option<&[f64]>, payload_u8: Option<&[u8]>) -> Vec<u8> {
    let payload_len = payload_f64.map(|p| p.len() * 8).unwrap_or(0) + payload_u8.map(|p| p.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(31 + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    for e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    if let Some(p) = payload_f64 {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(p) = payload_u8 {
        out.extend_from_slice(p);
    }
    out
}

pub fn write_image(path: &Path, vol: &ImageVolume) -> Result<()> {
    fs::write(path, encode(DTYPE_IMAGE, vol.shape, vol.spacing, Some(&vol.data), None))?;
    Ok(())
}

pub fn write_labels(path: &Path, vol: &LabelVolume) -> Result<()> {
    fs::write(path, encode(DTYPE_LABELS, vol.shape, vol.spacing, None, Some(&vol.data)))?;
    Ok(())
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    fs::write(path, encode(DTYPE_FIELD, field.shape, [1.0; 3], Some(&field.data), None))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let buf = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format {
            offset: 0,
            message: format!("{}: file not found", path.display()),
        },
        _ => Error::Io(e),
    })?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"CLMV\""),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let dtype_offset = r.pos as u64;
    let dtype = r.take(1, "dtype")?[0];
    let d = r.u32("extent D")? as usize;
    let h = r.u32("extent H")? as usize;
    let w = r.u32("extent W")? as usize;
    let spacing = [r.f32("spacing D")?, r.f32("spacing H")?, r.f32("spacing W")?];
    let vox = d
        .checked_mul(h)
        .and_then(|p| p.checked_mul(w))
        .ok_or_else(|| Error::Format {
            offset: 7,
            message: format!("extent overflow: {d}x{h}x{w}"),
        })?;

    let payload_offset = r.pos;
    let out = match dtype {
        DTYPE_IMAGE | DTYPE_FIELD => {
            let count = if dtype == DTYPE_FIELD { 3 * vox } else { vox };
            let bytes = r.take(count * 8, "payload")?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if dtype == DTYPE_IMAGE {
                AnyVolume::Image(ImageVolume::new([d, h, w], spacing, data)?)
            } else {
                AnyVolume::Field(DisplacementField::new([d, h, w], data)?)
            }
        }
        DTYPE_LABELS => {
            let bytes = r.take(vox, "payload")?;
            AnyVolume::Labels(LabelVolume::new([d, h, w], spacing, bytes.to_vec())?)
        }
        other => {
            return Err(Error::Format {
                offset: dtype_offset,
                message: format!("unknown dtype code {other}"),
            })
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!(
                "{} trailing bytes after payload (payload starts at {payload_offset})",
                buf.len() - r.pos
            ),
        });
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<ImageVolume> {
    match read_volume(path)? {
        AnyVolume::Image(v) => Ok(v),
        other => Err(Error::Format {
            offset: 6,
            message: format!("{}: expected an image volume, found {}", path.display(), kind(&other)),
        }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        AnyVolume::Labels(v) => Ok(v),
        other => Err(Error::Format {
            offset: 6,
            message: format!("{}: expected a label volume, found {}", path.display(), kind(&other)),
        }),
    }
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    match read_volume(path)? {
        AnyVolume::Field(v) => Ok(v),
        other => Err(Error::Format {
            offset: 6,
            message: format!("{}: expected a displacement field, found {}", path.display(), kind(&other)),
        }),
    }
}

fn kind(v: &AnyVolume) -> &'static str {
    match v {
        AnyVolume::Image(_) => "image",
        AnyVolume::Labels(_) => "labels",
        AnyVolume::Field(_) => "field",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("clmv_io_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn image_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let vol = ImageVolume::new([2, 3, 4], [1.0, 0.5, 2.0], data).unwrap();
        let path = tmpdir().join("img.clmv");
        write_image(&path, &vol).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn labels_and_field_roundtrip() {
        let labels = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let field = DisplacementField::new([2, 2, 2], (0..24).map(|i| i as f64 / 7.0).collect()).unwrap();
        let dir = tmpdir();
        write_labels(&dir.join("l.clmv"), &labels).unwrap();
        write_field(&dir.join("f.clmv"), &field).unwrap();
        assert_eq!(read_labels(&dir.join("l.clmv")).unwrap(), labels);
        assert_eq!(read_field(&dir.join("f.clmv")).unwrap(), field);
    }

    #[test]
    fn one_voxel_volume_roundtrips() {
        let vol = ImageVolume::new([1, 1, 1], [1.0; 3], vec![0.25]).unwrap();
        let path = tmpdir().join("tiny.clmv");
        write_image(&path, &vol).unwrap();
        assert_eq!(read_image(&path).unwrap(), vol);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let vol = ImageVolume::new([1, 1, 2], [1.0; 3], vec![1.0, 2.0]).unwrap();
        let path = tmpdir().join("badmagic.clmv");
        write_image(&path, &vol).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        match read_volume(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let vol = ImageVolume::new([1, 2, 2], [1.0; 3], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = tmpdir().join("trunc.clmv");
        write_image(&path, &vol).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_volume(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 5),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_dtype_via_typed_reader_is_rejected() {
        let labels = LabelVolume::new([1, 1, 1], [1.0; 3], vec![1]).unwrap();
        let path = tmpdir().join("labels_as_image.clmv");
        write_labels(&path, &labels).unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format { .. })));
    }
}
