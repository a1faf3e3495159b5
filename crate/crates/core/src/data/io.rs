//! Volume and mask I/O.
//!
//! Raw volumes are little-endian `f32` in C order over `(h, w, c)` (the
//! slice index varies fastest) next to a JSON sidecar with the same stem:
//! `{"shape": [h, w, c], "spacing": [sx, sy, sz], "identifier": "..."}`.
//! NIfTI-1 files (`.nii` / `.nii.gz`) map `dim[1..=3]` onto `(h, w, c)`.

use super::types::{BinaryImage, BinaryVolume, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;
use flate2::read::GzDecoder;
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Self {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::Raw
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub identifier: Option<String>,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn load_volume<T: Real>(path: &Path, format: VolumeFormat) -> Result<Volume<T>> {
    match format {
        VolumeFormat::Raw => load_raw(path),
        VolumeFormat::Nifti => load_nifti(path),
    }
}

pub fn load_raw<T: Real>(path: &Path) -> Result<Volume<T>> {
    let side = sidecar_path(path);
    let meta: RawSidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)
        .map_err(|e| Error::Format(format!("sidecar {}: {e}", side.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [h, w, c] = meta.shape;
    if bytes.len() != h * w * c * 4 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, sidecar shape {:?} needs {}",
            path.display(),
            bytes.len(),
            meta.shape,
            h * w * c * 4
        )));
    }
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    let voxels = Array3::from_shape_vec((h, w, c), data).expect("length checked");
    let id = meta
        .identifier
        .unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume").to_string());
    Volume::new(voxels, meta.spacing, id)
}

/// Little-endian `f32` voxels, slice index fastest.
pub fn raw_bytes<T: Real>(voxels: &Array3<T>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(voxels.len() * 4);
    for v in voxels.iter() {
        bytes.extend_from_slice(&(v.to_f64().unwrap_or(0.0) as f32).to_le_bytes());
    }
    bytes
}

/// Contents of the raw file `save_raw_mask` writes for `mask`.
pub fn raw_mask_bytes(mask: &BinaryVolume) -> Vec<u8> {
    raw_bytes(&mask.mapv(|b| b as f32))
}

/// Write `volume` as raw `f32` plus sidecar. Returns the sidecar path.
pub fn save_raw<T: Real>(volume: &Volume<T>, path: &Path) -> Result<PathBuf> {
    ensure_parent(path)?;
    let (h, w, c) = volume.dim();
    fs::write(path, raw_bytes(volume.voxels())).map_err(|e| Error::io(path, e))?;
    let meta = RawSidecar {
        shape: [h, w, c],
        spacing: volume.spacing(),
        identifier: Some(volume.identifier().to_string()),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta).expect("sidecar serializes")).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

/// Binary volume stored as a raw `f32` volume of zeros and ones.
pub fn save_raw_mask(mask: &BinaryVolume, spacing: [f64; 3], id: &str, path: &Path) -> Result<PathBuf> {
    let v = Volume::new(mask.mapv(|b| b as f32), spacing, id)?;
    save_raw(&v, path)
}

pub fn load_raw_mask(path: &Path) -> Result<BinaryVolume> {
    let v: Volume<f32> = load_raw(path)?;
    Ok(v.voxels().mapv(|x| u8::from(x > 0.5)))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
    fn sample(&self, at: usize, datatype: i16) -> f64 {
        match datatype {
            2 => self.buf[at] as f64,
            256 => self.buf[at] as i8 as f64,
            4 => i16::from_le_bytes(self.bytes(at)) as f64,
            512 => u16::from_le_bytes(self.bytes(at)) as f64,
            8 => i32::from_le_bytes(self.bytes(at)) as f64,
            768 => u32::from_le_bytes(self.bytes(at)) as f64,
            16 => f32::from_le_bytes(self.bytes(at)) as f64,
            64 => f64::from_le_bytes(self.bytes(at)),
            _ => unreachable!("datatype validated before sampling"),
        }
    }
}

fn datatype_width(datatype: i16) -> Option<usize> {
    match datatype {
        2 | 256 => Some(1),
        4 | 512 => Some(2),
        8 | 768 | 16 => Some(4),
        64 => Some(8),
        _ => None,
    }
}

pub fn load_nifti<T: Real>(path: &Path) -> Result<Volume<T>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    }
    parse_nifti(&buf, path)
}

fn parse_nifti<T: Real>(buf: &[u8], path: &Path) -> Result<Volume<T>> {
    let fmt = |m: String| Error::Format(format!("{}: {m}", path.display()));
    if buf.len() < NIFTI_HEADER_LEN {
        return Err(fmt("shorter than a NIfTI-1 header".into()));
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(buf[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(fmt(format!("sizeof_hdr {other} is not 348"))),
    };
    let r = Reader { buf, big_endian };
    if &buf[344..347] != b"n+1" && &buf[344..347] != b"ni1" {
        return Err(fmt("missing NIfTI-1 magic".into()));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(fmt(format!("dim[0] = {ndim}")));
    }
    let dim = |i: usize| -> usize {
        if i as i16 <= ndim {
            r.i16(40 + 2 * i).max(1) as usize
        } else {
            1
        }
    };
    let (h, w, c) = (dim(1), dim(2), dim(3));
    if (4..=7).any(|i| dim(i) > 1) {
        return Err(fmt("only 3D volumes (or 4D with a single frame) are supported".into()));
    }
    let datatype = r.i16(70);
    let width = datatype_width(datatype).ok_or_else(|| fmt(format!("unsupported datatype code {datatype}")))?;
    let spacing = [1, 2, 3].map(|i| {
        let p = r.f32(76 + 4 * i).abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });
    let offset = r.f32(108).max(NIFTI_HEADER_LEN as f32) as usize;
    let (mut slope, inter) = (r.f32(112) as f64, r.f32(116) as f64);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let n = h * w * c;
    if buf.len() < offset + n * width {
        return Err(fmt(format!("data section truncated: need {} bytes", offset + n * width)));
    }
    // NIfTI stores x fastest; map (x, y, z) -> (row, col, slice).
    let mut voxels = Array3::<T>::zeros((h, w, c));
    for z in 0..c {
        for y in 0..w {
            for x in 0..h {
                let idx = x + h * (y + w * z);
                let v = r.sample(offset + idx * width, datatype) * slope + inter;
                voxels[[x, y, z]] = T::lit(v);
            }
        }
    }
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_else(|| "volume".into());
    Volume::new(voxels, spacing, id)
}

/// Datatype of voxels written by [`save_nifti`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    F32,
}

/// Write a single-file little-endian NIfTI-1 volume.
pub fn save_nifti(voxels: &Array3<f64>, spacing: [f64; 3], dtype: NiftiDtype, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, c) = voxels.dim();
    let (code, bitpix, width): (i16, i16, usize) = match dtype {
        NiftiDtype::U8 => (2, 8, 1),
        NiftiDtype::F32 => (16, 32, 4),
    };
    let mut hdr = vec![0u8; NIFTI_VOX_OFFSET];
    hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims: [i16; 8] = [3, h as i16, w as i16, c as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&code.to_le_bytes());
    hdr[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        hdr[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    hdr[108..112].copy_from_slice(&(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    hdr[123] = 10; // xyzt_units: mm, sec
    hdr[344..348].copy_from_slice(b"n+1\0");
    let mut out = hdr;
    out.reserve(h * w * c * width);
    for z in 0..c {
        for y in 0..w {
            for x in 0..h {
                let v = voxels[[x, y, z]];
                match dtype {
                    NiftiDtype::U8 => out.push(v.clamp(0.0, 255.0).round() as u8),
                    NiftiDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_mask_nifti(mask: &BinaryVolume, spacing: [f64; 3], path: &Path) -> Result<()> {
    save_nifti(&mask.mapv(f64::from), spacing, NiftiDtype::U8, path)
}

/// Encode an 8-bit grayscale image as PNG bytes.
pub fn encode_png_gray(img: &ndarray::Array2<u8>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        let data: Vec<u8> = img.iter().copied().collect();
        writer.write_image_data(&data).expect("in-memory PNG body");
    }
    out
}

pub fn decode_png_gray(bytes: &[u8]) -> Result<ndarray::Array2<u8>> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected 8-bit grayscale PNG".into()));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    ndarray::Array2::from_shape_vec((h, w), buf[..h * w].to_vec()).map_err(|e| Error::Format(e.to_string()))
}

/// Binary mask rendered as 0/255 PNG.
pub fn mask_png(mask: &BinaryImage) -> Vec<u8> {
    encode_png_gray(&mask.mapv(|v| if v != 0 { 255 } else { 0 }))
}

/// Write `slice_0000.png`, `slice_0001.png`, ... into `dir`.
pub fn save_mask_pngs(mask: &BinaryVolume, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for k in 0..mask.dim().2 {
        let p = dir.join(format!("slice_{k:04}.png"));
        let bytes = mask_png(&mask.slice(s![.., .., k]).to_owned());
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        let mut wtr = BufWriter::new(f);
        std::io::Write::write_all(&mut wtr, &bytes).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Window a slice to 8-bit grayscale.
pub fn window_to_u8<T: Real>(slice: ndarray::ArrayView2<'_, T>, lo: f64, hi: f64) -> Result<ndarray::Array2<u8>> {
    if !(lo < hi) {
        return Err(Error::arg(format!("window needs lo < hi, got {lo},{hi}")));
    }
    Ok(slice.mapv(|v| {
        let t = ((v.to_f64().unwrap_or(0.0) - lo) / (hi - lo)).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ramp(h: usize, w: usize, c: usize) -> Volume<f32> {
        let v = Array3::from_shape_fn((h, w, c), |(i, j, k)| (i * 100 + j * 10 + k) as f32 * 0.5 - 3.0);
        Volume::new(v, [0.8, 0.8, 2.5], "ramp").unwrap()
    }

    #[test]
    fn raw_sidecar_fixture_loads_with_header_shape() {
        let dir = tempdir().unwrap();
        let raw = dir.path().join("vol.raw");
        let bytes: Vec<u8> = (0..16 * 16 * 4).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(&raw, bytes).unwrap();
        fs::write(sidecar_path(&raw), r#"{"shape":[16,16,4],"spacing":[1,1,1]}"#).unwrap();
        let v: Volume<f32> = load_volume(&raw, VolumeFormat::Raw).unwrap();
        assert_eq!(v.dim(), (16, 16, 4));
        // slice index is the fastest-varying axis
        assert_eq!(v.voxels()[[0, 0, 3]], 3.0);
        assert_eq!(v.voxels()[[0, 1, 0]], 4.0);
        assert_eq!(v.identifier(), "vol");
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.raw");
        let v = ramp(9, 8, 3);
        save_raw(&v, &p).unwrap();
        let back: Volume<f32> = load_raw(&p).unwrap();
        assert_eq!(back, v);
        let first = fs::read(&p).unwrap();
        save_raw(&back, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn raw_nan_voxel_is_a_validation_error() {
        let dir = tempdir().unwrap();
        let raw = dir.path().join("nan.raw");
        let mut vals = vec![0f32; 8 * 8 * 2];
        vals[5] = f32::NAN;
        fs::write(&raw, vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        fs::write(sidecar_path(&raw), r#"{"shape":[8,8,2],"spacing":[1,1,1]}"#).unwrap();
        let err = load_raw::<f32>(&raw).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("(0, 2, 1)"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_raw::<f32>(Path::new("/nonexistent/x.raw")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn nifti_roundtrip_float_and_gz() {
        let dir = tempdir().unwrap();
        let v = ramp(10, 9, 4);
        let p = dir.path().join("v.nii");
        save_nifti(&v.voxels().mapv(|x| x as f64), v.spacing(), NiftiDtype::F32, &p).unwrap();
        let back: Volume<f32> = load_volume(&p, VolumeFormat::from_path(&p)).unwrap();
        assert_eq!(back.voxels(), v.voxels());
        assert_eq!(back.spacing().map(|s| s as f32), v.spacing().map(|s| s as f32));

        let gz = dir.path().join("v.nii.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::fast());
        std::io::Write::write_all(&mut enc, &fs::read(&p).unwrap()).unwrap();
        enc.finish().unwrap();
        let back_gz: Volume<f32> = load_volume(&gz, VolumeFormat::from_path(&gz)).unwrap();
        assert_eq!(back_gz.voxels(), v.voxels());
    }

    #[test]
    fn nifti_full_ct_sized_volume() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ct.nii");
        let vox = Array3::from_shape_fn((512, 512, 100), |(i, j, k)| ((i + j + k) % 7) as f64);
        save_nifti(&vox, [0.7, 0.7, 5.0], NiftiDtype::U8, &p).unwrap();
        let v: Volume<f32> = load_nifti(&p).unwrap();
        assert_eq!(v.dim(), (512, 512, 100));
        assert_eq!(v.num_slices(), 100);
        assert_eq!(v.voxels()[[3, 2, 1]], 6.0);
    }

    #[test]
    fn nifti_rejects_garbage() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(matches!(load_nifti::<f32>(&p), Err(Error::Format(_))));
    }

    #[test]
    fn png_roundtrip_and_mask_export() {
        let img = ndarray::Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) as u8);
        assert_eq!(decode_png_gray(&encode_png_gray(&img)).unwrap(), img);
        let dir = tempdir().unwrap();
        let mut mask = BinaryVolume::zeros((8, 8, 3));
        mask[[2, 3, 1]] = 1;
        let files = save_mask_pngs(&mask, &dir.path().join("m")).unwrap();
        assert_eq!(files.len(), 3);
        let s1 = decode_png_gray(&fs::read(&files[1]).unwrap()).unwrap();
        assert_eq!(s1[[2, 3]], 255);
        assert_eq!(s1.iter().filter(|&&v| v > 0).count(), 1);
        let p = dir.path().join("m.nii");
        save_mask_nifti(&mask, [1.0; 3], &p).unwrap();
        let back: Volume<f32> = load_nifti(&p).unwrap();
        assert_eq!(back.voxels()[[2, 3, 1]], 1.0);
    }

    #[test]
    fn window_maps_endpoints() {
        let s = ndarray::array![[-1024.0f32, 0.0], [1024.0, 5000.0]];
        let w = window_to_u8(s.view(), -1024.0, 1024.0).unwrap();
        assert_eq!(w, ndarray::array![[0u8, 128], [255, 255]]);
        assert!(window_to_u8(s.view(), 1.0, 1.0).is_err());
    }
}
