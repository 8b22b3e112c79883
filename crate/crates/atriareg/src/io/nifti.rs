//! NIfTI-1 single-file reader and writer.
//!
//! Supports the little-endian subset this pipeline needs: 348-byte header
//! with magic "n+1\0", datatypes uint8 (2), int16 (4), and float32 (16),
//! 3D scalar images, 4D time series, and 4D displacement fields tagged with
//! the vector intent code. Files whose content starts with the gzip magic
//! are transparently decompressed; paths ending in `.gz` are written
//! gzip-compressed. Anything outside the subset is rejected with a typed
//! error rather than guessed at.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::transform::{DisplacementField, FieldUnit};
use crate::volume::{CineSeries, Mask3, Volume3};

const HEADER_LEN: usize = 348;
/// Header plus the four-byte "no extensions" indicator.
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
/// NIFTI_INTENT_VECTOR; marks the 4th axis as vector components.
const INTENT_VECTOR: i16 = 1007;

const INTENT_NAME_VOXEL: &[u8] = b"disp_voxel";
const INTENT_NAME_MM: &[u8] = b"disp_mm";

/// Everything a supported NIfTI file can decode to.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    Volume(Volume3),
    Mask(Mask3),
    Series(CineSeries),
    Field(DisplacementField),
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::IoFailure(format!("{}: gzip: {e}", path.display())))?;
        return Ok(out);
    }
    Ok(raw)
}

struct Header {
    ndim: usize,
    dims: [usize; 3],
    nt: usize,
    datatype: i16,
    spacing: [f64; 3],
    origin: [f64; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    intent_code: i16,
    intent_name: [u8; 16],
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let name = path.display();
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile(format!(
            "{name}: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::BadMagic(format!("{name}: sizeof_hdr {sizeof_hdr}")));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::BadMagic(format!("{name}: magic {:?}", &bytes[344..348])));
    }
    let datatype = i16_at(bytes, 70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_FLOAT32) {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let bitpix = i16_at(bytes, 72);
    let expected_bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        _ => 32,
    };
    if bitpix != expected_bitpix {
        return Err(Error::BadMagic(format!(
            "{name}: bitpix {bitpix} does not match datatype {datatype}"
        )));
    }
    let ndim = i16_at(bytes, 40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::IoFailure(format!("{name}: {ndim}-dimensional image not supported")));
    }
    let ndim = ndim as usize;
    let mut dims = [0usize; 3];
    for c in 0..3 {
        let d = i16_at(bytes, 42 + 2 * c);
        if d < 1 {
            return Err(Error::BadMagic(format!("{name}: dim[{}] = {d}", c + 1)));
        }
        dims[c] = d as usize;
    }
    let nt = if ndim == 4 {
        let t = i16_at(bytes, 48);
        if t < 1 {
            return Err(Error::BadMagic(format!("{name}: dim[4] = {t}")));
        }
        t as usize
    } else {
        1
    };
    let mut spacing = [0.0; 3];
    for c in 0..3 {
        spacing[c] = f32_at(bytes, 76 + 4 * (c + 1)) as f64;
    }
    let vox_offset_f = f32_at(bytes, 108);
    if !vox_offset_f.is_finite() || vox_offset_f < HEADER_LEN as f32 {
        return Err(Error::BadMagic(format!("{name}: vox_offset {vox_offset_f}")));
    }
    let sform_code = i16_at(bytes, 254);
    let origin = if sform_code > 0 {
        [
            f32_at(bytes, 292) as f64,
            f32_at(bytes, 308) as f64,
            f32_at(bytes, 324) as f64,
        ]
    } else {
        [0.0; 3]
    };
    let mut intent_name = [0u8; 16];
    intent_name.copy_from_slice(&bytes[328..344]);
    Ok(Header {
        ndim,
        dims,
        nt,
        datatype,
        spacing,
        origin,
        vox_offset: vox_offset_f as usize,
        scl_slope: f32_at(bytes, 112),
        scl_inter: f32_at(bytes, 116),
        intent_code: i16_at(bytes, 68),
        intent_name,
    })
}

fn decode_values(bytes: &[u8], hdr: &Header, path: &Path) -> Result<Vec<f64>> {
    let name = path.display();
    let count = hdr.dims[0]
        .checked_mul(hdr.dims[1])
        .and_then(|n| n.checked_mul(hdr.dims[2]))
        .and_then(|n| n.checked_mul(hdr.nt))
        .ok_or_else(|| Error::BadMagic(format!("{name}: dimension overflow")))?;
    let elem = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let end = hdr
        .vox_offset
        .checked_add(count * elem)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::TruncatedFile(format!(
                "{name}: need {} data bytes at offset {}, file has {}",
                count * elem,
                hdr.vox_offset,
                bytes.len()
            ))
        })?;
    let raw = &bytes[hdr.vox_offset..end];
    let mut values = Vec::with_capacity(count);
    match hdr.datatype {
        DT_UINT8 => values.extend(raw.iter().map(|&b| b as f64)),
        DT_INT16 => {
            for pair in raw.chunks_exact(2) {
                values.push(i16::from_le_bytes([pair[0], pair[1]]) as f64);
            }
        }
        _ => {
            for quad in raw.chunks_exact(4) {
                let v = f32::from_le_bytes([quad[0], quad[1], quad[2], quad[3]]);
                if !v.is_finite() {
                    return Err(Error::NonFiniteData(format!("{name}: non-finite voxel")));
                }
                values.push(v as f64);
            }
        }
    }
    if hdr.scl_slope != 0.0 {
        if !hdr.scl_slope.is_finite() || !hdr.scl_inter.is_finite() {
            return Err(Error::NonFiniteData(format!("{name}: scl_slope/scl_inter")));
        }
        let (slope, inter) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
        for v in &mut values {
            *v = slope * *v + inter;
        }
    }
    Ok(values)
}

/// Read any supported NIfTI file and classify its content.
///
/// 3D uint8 data whose (scaled) values are all exactly 0 or 1 loads as a
/// mask; other 3D data as a volume. 4D data with the vector intent code and
/// three timepoints loads as a displacement field whose unit comes from the
/// intent name; any other 4D data loads as a cine series.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiData> {
    let path = path.as_ref();
    let bytes = read_file_bytes(path)?;
    let hdr = parse_header(&bytes, path)?;
    let values = decode_values(&bytes, &hdr, path)?;
    let n3 = hdr.dims[0] * hdr.dims[1] * hdr.dims[2];

    if hdr.ndim == 3 {
        if hdr.datatype == DT_UINT8 && values.iter().all(|&v| v == 0.0 || v == 1.0) {
            let mask = Mask3::new(
                hdr.dims,
                hdr.spacing,
                hdr.origin,
                values.iter().map(|&v| v == 1.0).collect(),
            )?;
            return Ok(NiftiData::Mask(mask));
        }
        return Ok(NiftiData::Volume(Volume3::new(hdr.dims, hdr.spacing, hdr.origin, values)?));
    }

    if hdr.intent_code == INTENT_VECTOR && hdr.nt == 3 {
        let unit = if hdr.intent_name.starts_with(INTENT_NAME_MM) {
            FieldUnit::Mm
        } else {
            FieldUnit::Voxel
        };
        let field = DisplacementField::new(hdr.dims, hdr.spacing, hdr.origin, unit, values)?;
        return Ok(NiftiData::Field(field));
    }

    let mut phases = Vec::with_capacity(hdr.nt);
    for t in 0..hdr.nt {
        let chunk = values[t * n3..(t + 1) * n3].to_vec();
        phases.push(Volume3::new(hdr.dims, hdr.spacing, hdr.origin, chunk)?);
    }
    Ok(NiftiData::Series(CineSeries::new(phases, None, 0)?))
}

fn kind_mismatch(path: &Path, wanted: &str, got: &NiftiData) -> Error {
    let got = match got {
        NiftiData::Volume(_) => "a scalar volume",
        NiftiData::Mask(_) => "a binary mask",
        NiftiData::Series(_) => "a 4D series",
        NiftiData::Field(_) => "a displacement field",
    };
    Error::IoFailure(format!("{}: expected {wanted}, found {got}", path.display()))
}

/// Read a 3D scalar volume; a binary mask file loads as its 0/1 image.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    match read_nifti(path)? {
        NiftiData::Volume(v) => Ok(v),
        NiftiData::Mask(m) => Ok(Volume3::new(
            m.dims(),
            m.spacing(),
            m.origin(),
            m.data().iter().map(|&b| b as u8 as f64).collect(),
        )?),
        other => Err(kind_mismatch(path, "a 3D volume", &other)),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3> {
    let path = path.as_ref();
    match read_nifti(path)? {
        NiftiData::Mask(m) => Ok(m),
        other => Err(kind_mismatch(path, "a binary mask", &other)),
    }
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    match read_nifti(path)? {
        NiftiData::Field(f) => Ok(f),
        other => Err(kind_mismatch(path, "a displacement field", &other)),
    }
}

pub fn read_series(path: impl AsRef<Path>) -> Result<CineSeries> {
    let path = path.as_ref();
    match read_nifti(path)? {
        NiftiData::Series(s) => Ok(s),
        other => Err(kind_mismatch(path, "a 4D series", &other)),
    }
}

struct WriteSpec<'a> {
    dims: [usize; 3],
    nt: usize,
    datatype: i16,
    spacing: [f64; 3],
    origin: [f64; 3],
    intent_code: i16,
    intent_name: &'a [u8],
    payload: Vec<u8>,
}

fn encode_nifti(spec: &WriteSpec) -> Result<Vec<u8>> {
    for (c, &d) in spec.dims.iter().enumerate() {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::ConfigInvalid(format!("dim[{}] = {d} not writable", c + 1)));
        }
    }
    if spec.nt == 0 || spec.nt > i16::MAX as usize {
        return Err(Error::ConfigInvalid(format!("dim[4] = {} not writable", spec.nt)));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_LEN as i32);
    h[38] = b'r';
    let ndim: i16 = if spec.nt > 1 || spec.intent_code == INTENT_VECTOR { 4 } else { 3 };
    put_i16(&mut h, 40, ndim);
    for c in 0..3 {
        put_i16(&mut h, 42 + 2 * c, spec.dims[c] as i16);
    }
    put_i16(&mut h, 48, spec.nt as i16);
    for c in 4..7 {
        put_i16(&mut h, 42 + 2 * c, 1);
    }
    put_i16(&mut h, 68, spec.intent_code);
    put_i16(&mut h, 70, spec.datatype);
    let bitpix: i16 = match spec.datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        _ => 32,
    };
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for c in 0..3 {
        put_f32(&mut h, 76 + 4 * (c + 1), spec.spacing[c] as f32);
    }
    put_f32(&mut h, 92, 1.0);
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    // scl_slope 0 means "no scaling" per the standard; leave inter 0 too.
    put_f32(&mut h, 112, 0.0);
    put_f32(&mut h, 116, 0.0);
    // Spatial units are mm (2); no time units for cardiac phase indices.
    h[123] = 2;
    let descrip = b"atriareg";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // qform unused, sform carries a diagonal spacing + origin transform.
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, spec.spacing[0] as f32);
    put_f32(&mut h, 292, spec.origin[0] as f32);
    put_f32(&mut h, 300, spec.spacing[1] as f32);
    put_f32(&mut h, 308, spec.origin[1] as f32);
    put_f32(&mut h, 320, spec.spacing[2] as f32);
    put_f32(&mut h, 324, spec.origin[2] as f32);
    let n = spec.intent_name.len().min(16);
    h[328..328 + n].copy_from_slice(&spec.intent_name[..n]);
    h[344..348].copy_from_slice(MAGIC);

    let mut out = h;
    out.extend_from_slice(&spec.payload);
    Ok(out)
}

fn f32_payload<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    let mut payload = Vec::new();
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    payload
}

fn write_encoded(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes)
            .and_then(|_| enc.finish())
            .map_err(|e| Error::IoFailure(format!("{}: gzip: {e}", path.display())))
            .and_then(|compressed| atomic_write(path, &compressed))
    } else {
        atomic_write(path, &bytes)
    }
}

/// Write a scalar volume as 3D float32.
pub fn write_volume(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(&WriteSpec {
        dims: v.dims(),
        nt: 1,
        datatype: DT_FLOAT32,
        spacing: v.spacing(),
        origin: v.origin(),
        intent_code: 0,
        intent_name: b"",
        payload: f32_payload(v.data().iter()),
    })?;
    write_encoded(path.as_ref(), bytes)
}

/// Write a mask as 3D uint8 with values exactly 0 and 1.
pub fn write_mask(m: &Mask3, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(&WriteSpec {
        dims: m.dims(),
        nt: 1,
        datatype: DT_UINT8,
        spacing: m.spacing(),
        origin: m.origin(),
        intent_code: 0,
        intent_name: b"",
        payload: m.data().iter().map(|&b| b as u8).collect(),
    })?;
    write_encoded(path.as_ref(), bytes)
}

/// Write a displacement field as 4D float32 with dim[4] = 3, the vector
/// intent code, and an intent name recording the unit.
pub fn write_field(f: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let intent_name = match f.unit() {
        FieldUnit::Voxel => INTENT_NAME_VOXEL,
        FieldUnit::Mm => INTENT_NAME_MM,
    };
    let bytes = encode_nifti(&WriteSpec {
        dims: f.dims(),
        nt: 3,
        datatype: DT_FLOAT32,
        spacing: f.spacing(),
        origin: f.origin(),
        intent_code: INTENT_VECTOR,
        intent_name,
        payload: f32_payload(f.data().iter()),
    })?;
    write_encoded(path.as_ref(), bytes)
}

/// Write all phases of a series as 4D float32 (masks are not included;
/// write them separately as individual mask files).
pub fn write_series(s: &CineSeries, path: impl AsRef<Path>) -> Result<()> {
    let first = &s.phases[0];
    let mut payload = Vec::new();
    for p in &s.phases {
        payload.extend_from_slice(&f32_payload(p.data().iter()));
    }
    let bytes = encode_nifti(&WriteSpec {
        dims: first.dims(),
        nt: s.phase_count(),
        datatype: DT_FLOAT32,
        spacing: first.spacing(),
        origin: first.origin(),
        intent_code: 0,
        intent_name: b"",
        payload,
    })?;
    write_encoded(path.as_ref(), bytes)
}
