//! Reading and writing volumetric files.
//!
//! Two formats are recognised by extension:
//!
//! * NIfTI-1 (`.nii`, `.nii.gz`), axis 0 of our arrays is NIfTI's `k` (slice) axis;
//! * `.mtv`, a minimal raw format: the magic `MTV1`, three little-endian `u32`
//!   extents (D, H, W), then `D*H*W` little-endian `f32` voxels in D-major order.
//!   It carries no spacing, so volumes read from it have unit spacing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{dims, BinaryMask, Field, Volume};
use crate::error::{Error, Result};

pub const MTV_MAGIC: &[u8; 4] = b"MTV1";
pub const MTV_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    NiftiGz,
    Mtv,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::NiftiGz)
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti)
    } else if name.ends_with(".mtv") {
        Ok(Format::Mtv)
    } else {
        Err(Error::Format(format!("unknown extension: {}", path.display())))
    }
}

fn stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for ext in [".nii.gz", ".nii", ".mtv"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name.to_string()
}

/// Raw array plus spacing as stored on disk.
fn read_raw(path: &Path) -> Result<(Field, [f64; 3])> {
    match format_of(path)? {
        Format::Mtv => Ok((read_mtv(path)?, [1.0; 3])),
        Format::Nifti | Format::NiftiGz => read_nifti(path),
    }
}

/// Reads any `.mtv` payload as its declared shape and raw f32 values.
pub fn read_mtv_raw(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; MTV_HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Metadata(format!("{}: truncated header", path.display())))?;
    if &header[..4] != MTV_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let mut shape = [0usize; 3];
    for (i, s) in shape.iter_mut().enumerate() {
        let b: [u8; 4] = header[4 + 4 * i..8 + 4 * i].try_into().unwrap();
        *s = u32::from_le_bytes(b) as usize;
    }
    let n = shape.iter().product::<usize>();
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn write_mtv_raw(path: &Path, shape: [usize; 3], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("shape {shape:?} does not hold {} values", data.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MTV_MAGIC)?;
    for d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format("extent exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mtv(path: &Path) -> Result<Field> {
    let (shape, data) = read_mtv_raw(path)?;
    if shape.iter().any(|&d| d < 2) {
        return Err(Error::Format(format!(
            "{}: payload is not volumetric, shape {shape:?}",
            path.display()
        )));
    }
    Ok(Array3::from_shape_vec(shape, data.into_iter().map(f64::from).collect()).expect("length checked"))
}

pub fn write_mtv(field: &Field, path: &Path) -> Result<()> {
    let data: Vec<f32> = field.iter().map(|&v| v as f32).collect();
    write_mtv_raw(path, dims(field), &data)
}

fn read_nifti(path: &Path) -> Result<(Field, [f64; 3])> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = obj.header();
    let ndim = header
        .dimensionality()
        .map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?;
    let dim = header.dim[1..=ndim.min(7)].to_vec();
    let volumetric = ndim == 3 || (ndim == 4 && dim[3] == 1);
    if !volumetric {
        return Err(Error::Format(format!(
            "{}: expected a 3D payload, header declares {ndim}D {dim:?}",
            path.display()
        )));
    }
    let pixdim = header.pixdim;
    let spacing = [f64::from(pixdim[3]), f64::from(pixdim[2]), f64::from(pixdim[1])];
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Metadata(format!(
            "{}: invalid pixdim {:?}",
            path.display(),
            &pixdim[1..4]
        )));
    }
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let arr = if arr.ndim() == 4 {
        arr.index_axis_move(Axis(3), 0)
    } else {
        arr
    };
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format(e.to_string()))?;
    // (i, j, k) -> (k, j, i)
    let data = arr.reversed_axes().as_standard_layout().to_owned();
    Ok((data, spacing))
}

fn write_nifti(field: &Field, spacing: [f64; 3], path: &Path, compress: bool) -> Result<()> {
    let header = NiftiHeader {
        pixdim: [
            1.0,
            spacing[2] as f32,
            spacing[1] as f32,
            spacing[0] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ],
        // millimetres
        xyzt_units: 2,
        ..NiftiHeader::default()
    };
    let data = field.mapv(|v| v as f32);
    WriterOptions::new(path)
        .reference_header(&header)
        .compress(compress)
        .write_nifti(&data.t())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_field(field: &Field, spacing: [f64; 3], path: &Path) -> Result<()> {
    match format_of(path)? {
        Format::Mtv => write_mtv(field, path),
        Format::Nifti => write_nifti(field, spacing, path, false),
        Format::NiftiGz => write_nifti(field, spacing, path, true),
    }
}

/// Loads an intensity volume; the id is the file stem.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (data, spacing) = read_raw(path)?;
    Volume::new(stem(path), data, spacing)
}

/// Loads a label file, rejecting anything other than exact 0/1 values.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let (data, _) = read_raw(path)?;
    if data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format(format!("{}: mask is not binary", path.display())));
    }
    BinaryMask::new(data.mapv(|v| v as u8))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_field(&v.data, v.spacing, path.as_ref())
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_field(&mask.to_field(), [1.0; 3], path.as_ref())
}

/// Saves a real-valued map (distance field, probabilities, entropy) as float32.
pub fn save_map(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    write_field(field, [1.0; 3], path.as_ref())
}

pub fn save_map_with_spacing(field: &Field, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    write_field(field, spacing, path.as_ref())
}

/// Loads any real-valued map regardless of which writer produced it.
pub fn load_map(path: impl AsRef<Path>) -> Result<Field> {
    Ok(read_raw(path.as_ref())?.0)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_mask(seed: u64, shape: [usize; 3]) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinaryMask::new(Array3::from_shape_fn(shape, |_| u8::from(rng.gen_bool(0.4)))).unwrap()
    }

    #[test]
    fn mask_round_trip_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_mask(1, [8, 8, 8]);
        for name in ["m.mtv", "m.nii", "m.nii.gz"] {
            let p = dir.path().join(name);
            save_mask(&m, &p).unwrap();
            assert_eq!(load_mask(&p).unwrap(), m, "{name}");
        }
    }

    #[test]
    fn field_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Array3::from_shape_fn((6, 7, 8), |_| rng.gen_range(-1.0..1.0));
        for name in ["f.mtv", "f.nii.gz"] {
            let p = dir.path().join(name);
            save_map(&f, &p).unwrap();
            let back = load_map(&p).unwrap();
            assert_eq!(back.shape(), f.shape());
            assert!(super::super::max_abs_diff(&back, &f) <= 1e-7, "{name}");
        }
    }

    #[test]
    fn nifti_keeps_axis_order_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((4, 5, 6), |(z, y, x)| (z * 100 + y * 10 + x) as f64);
        let v = Volume::new("case", data.clone(), [2.5, 0.625, 0.7]).unwrap();
        let p = dir.path().join("case.nii");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.id, "case");
        assert_eq!(back.data, data);
        for a in 0..3 {
            assert!((back.spacing[a] - v.spacing[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn mtv_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mtv");
        let f = Array3::from_shape_fn((4, 5, 6), |(z, y, x)| (z + y + x) as f64);
        write_mtv(&f, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MTV1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(bytes.len(), 16 + 4 * 120);
        // voxel (0,0,1) is the second float
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1.0);
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        std::fs::write(&p, b"junk").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));

        // 2D NIfTI payload
        let p2 = dir.path().join("flat.nii");
        let flat = ndarray::Array2::<f32>::zeros((8, 8));
        WriterOptions::new(&p2).write_nifti(&flat).unwrap();
        assert!(matches!(load_volume(&p2), Err(Error::Format(_))));

        let p3 = dir.path().join("short.mtv");
        std::fs::write(&p3, b"MTV1\x04\x00").unwrap();
        assert!(matches!(load_volume(&p3), Err(Error::Metadata(_))));

        let p4 = dir.path().join("half.mtv");
        let mut bytes = b"MTV1".to_vec();
        for d in [4u32, 4, 4] {
            bytes.extend(d.to_le_bytes());
        }
        bytes.extend([0u8; 12]);
        std::fs::write(&p4, bytes).unwrap();
        assert!(matches!(load_volume(&p4), Err(Error::Format(_))));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mtv");
        write_mtv(&Array3::from_elem((4, 4, 4), 0.5), &p).unwrap();
        assert!(load_mask(&p).is_err());
    }
}
