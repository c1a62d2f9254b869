//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what BraTS-style volumes need: 3-D scalar grids (a trailing
//! singleton 4th dimension is accepted), the common integer and float
//! datatypes, `scl_slope`/`scl_inter` scaling and either byte order on read.
//! Writing is always little-endian with a diagonal sform built from the
//! voxel spacing. Gzip is chosen by the `.gz` extension and is
//! deterministic (no timestamp in the member header).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, LabelVolume, Spacing, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

/// Decoded image: grid in `(depth, height, width)` = `(z, y, x)` order with
/// x fastest, values after intensity scaling.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub dims: Dims,
    pub spacing: Spacing,
    pub values: Vec<f64>,
}

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }

    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.arr(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let mut reader = BufReader::new(file);
    if is_gz(path) {
        GzDecoder::new(reader).read_to_end(&mut buf)
    } else {
        reader.read_to_end(&mut buf)
    }
    .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = read_all(path)?;
    parse(&bytes).map_err(|reason| Error::format(path, reason))
}

fn parse(bytes: &[u8]) -> std::result::Result<NiftiImage, String> {
    if bytes.len() < HEADER_SIZE {
        return Err(format!("{} bytes is shorter than a NIfTI-1 header", bytes.len()));
    }
    let mut h = Fields { bytes, big_endian: false };
    if h.i32(0) != HEADER_SIZE as i32 {
        h.big_endian = true;
        if h.i32(0) != HEADER_SIZE as i32 {
            return Err("sizeof_hdr is not 348".into());
        }
    }
    if &bytes[344..347] != b"n+1" {
        return Err("not a single-file NIfTI-1 image (magic `n+1`)".into());
    }
    let ndim = h.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(format!("unsupported dimensionality {ndim}"));
    }
    let mut extent = [0usize; 3];
    for (a, e) in extent.iter_mut().enumerate() {
        let d = h.i16(42 + 2 * a);
        if d < 1 {
            return Err(format!("dim[{}] = {d}", a + 1));
        }
        *e = d as usize;
    }
    for a in 4..=ndim as usize {
        if h.i16(40 + 2 * a) > 1 {
            return Err("only single-volume (3-D) images are supported".into());
        }
    }
    let datatype = h.i16(70);
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let p = h.f32(80 + 4 * a) as f64;
        spacing[2 - a] = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }
    let offset = h.f32(108) as usize;
    let offset = offset.max(HEADER_SIZE);
    let [nx, ny, nz] = extent;
    let n = nx * ny * nz;
    if bytes.len() < offset + n * width {
        return Err(format!("truncated data: need {} bytes after offset {offset}", n * width));
    }
    let (slope, inter) = {
        let s = h.f32(112) as f64;
        let i = h.f32(116) as f64;
        if s == 0.0 || !s.is_finite() {
            (1.0, 0.0)
        } else {
            (s, if i.is_finite() { i } else { 0.0 })
        }
    };
    let raw = Fields { bytes: &bytes[offset..], big_endian: h.big_endian };
    let values = (0..n)
        .map(|i| {
            let o = i * width;
            let v = match datatype {
                DT_UINT8 => raw.bytes[o] as f64,
                DT_INT8 => raw.bytes[o] as i8 as f64,
                DT_INT16 => raw.i16(o) as f64,
                DT_UINT16 => u16::from_le_bytes(raw.arr(o)) as f64,
                DT_INT32 => raw.i32(o) as f64,
                DT_FLOAT32 => raw.f32(o) as f64,
                _ => f64::from_le_bytes(raw.arr(o)),
            };
            v * slope + inter
        })
        .collect();
    Ok(NiftiImage { dims: [nz, ny, nx], spacing, values })
}

fn header(dims: Dims, spacing: Spacing, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let mut put = |off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    put(39, &[0]);
    let [nz, ny, nx] = dims;
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(40 + 2 * i, &d.to_le_bytes());
    }
    put(70, &datatype.to_le_bytes());
    put(72, &bitpix.to_le_bytes());
    let pix = [1.0f32, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pix.iter().enumerate() {
        put(76 + 4 * i, &p.to_le_bytes());
    }
    put(108, &(DATA_OFFSET as f32).to_le_bytes());
    put(112, &1.0f32.to_le_bytes());
    put(123, &[2]); // millimetres
    put(254, &1i16.to_le_bytes()); // sform_code: scanner
    for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
        let mut srow = [0.0f32; 4];
        srow[row] = pix[row + 1];
        for (i, v) in srow.iter().enumerate() {
            put(off + 4 * i, &v.to_le_bytes());
        }
    }
    put(344, b"n+1\0");
    h
}

fn write_bytes(path: &Path, header: Vec<u8>, body: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = if is_gz(path) {
        let mut gz: GzEncoder<_> = GzBuilder::new().mtime(0).write(&mut out, Compression::fast());
        gz.write_all(&header)
            .and_then(|_| gz.write_all(&body))
            .and_then(|_| gz.finish().map(|_| ()))
    } else {
        out.write_all(&header).and_then(|_| out.write_all(&body))
    };
    res.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Writes one channel of `volume` as a float32 image.
pub fn write_volume(path: &Path, volume: &Volume, channel: usize) -> Result<()> {
    let body: Vec<u8> = volume.channel(channel).iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, header(volume.dims(), volume.spacing(), DT_FLOAT32, 32), body)
}

/// Writes a label grid as uint8.
pub fn write_labels(path: &Path, label: &LabelVolume) -> Result<()> {
    write_bytes(path, header(label.dims(), label.spacing(), DT_UINT8, 8), label.labels().to_vec())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let img = read_nifti(path)?;
    let data = img.values.iter().map(|&v| v as f32).collect();
    Volume::new(1, img.dims, img.spacing, data)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let img = read_nifti(path)?;
    let mut codes = Vec::with_capacity(voxel_count(img.dims));
    for &v in &img.values {
        if v.fract() != 0.0 {
            return Err(Error::format(path, format!("non-integer label value {v}")));
        }
        codes.push(v as i32);
    }
    LabelVolume::from_codes(img.dims, img.spacing, &codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn(1, [3, 4, 5], |_, z, y, x| (z * 100 + y * 10 + x) as f32 * 0.37 - 3.0)
            .with_spacing([2.0, 1.5, 0.75])
            .unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &v, 0).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn labels_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 4, 0, 0, 1, 2]).unwrap();
        let p = dir.path().join("seg.nii.gz");
        write_labels(&p, &l).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);

        let bad = Volume::new(1, [1, 1, 2], [1.0; 3], vec![0.0, 3.0]).unwrap();
        write_volume(&p, &bad, 0).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::InvalidLabel { value: 3 })));
    }

    #[test]
    fn gzip_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn(1, [4, 4, 4], |_, z, y, x| (z + y * x) as f32);
        let a = dir.path().join("a.nii.gz");
        let b = dir.path().join("b.nii.gz");
        write_volume(&a, &v, 0).unwrap();
        write_volume(&b, &v, 0).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn big_endian_int16_with_scaling() {
        let mut h = header([1, 1, 2], [1.0; 3], DT_INT16, 16);
        // flip every multi-byte header field we rely on to big-endian
        let mut be = h.clone();
        be[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_be_bytes());
        for i in 0..8 {
            let v = i16::from_le_bytes([h[40 + 2 * i], h[41 + 2 * i]]);
            be[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_be_bytes());
        }
        be[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        for i in 0..8 {
            let v = f32::from_le_bytes(h[76 + 4 * i..80 + 4 * i].try_into().unwrap());
            be[76 + 4 * i..80 + 4 * i].copy_from_slice(&v.to_be_bytes());
        }
        be[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_be_bytes());
        be[112..116].copy_from_slice(&2.0f32.to_be_bytes());
        be[116..120].copy_from_slice(&1.0f32.to_be_bytes());
        h = be;
        h.extend_from_slice(&7i16.to_be_bytes());
        h.extend_from_slice(&(-3i16).to_be_bytes());
        let img = parse(&h).unwrap();
        assert_eq!(img.dims, [1, 1, 2]);
        assert_eq!(img.values, vec![15.0, -5.0]);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_volume(Path::new("/nonexistent/x.nii.gz")).unwrap_err();
        assert!(matches!(err, Error::MissingFile { .. }));
    }
}
