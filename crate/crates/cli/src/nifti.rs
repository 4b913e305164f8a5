//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supported subset: 3-D volumes stored as float32, int16 or uint8, either
//! byte order. The world affine comes from the sform rows when `sform_code`
//! is set and from the pixdim diagonal otherwise; qform is ignored.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use rotview_core::geometry::{AffineMatrix, GridSpec, Volume3D};

use crate::error::{CliError, NiftiError};

const HEADER_SIZE: i32 = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Header fields this module interprets.
#[derive(Debug, Clone, PartialEq)]
struct Header {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    cal_max: f32,
    cal_min: f32,
    sform_code: i16,
    srow: [[f32; 4]; 3],
    magic: [u8; 4],
}

fn parse_header<E: ByteOrder>(bytes: &[u8]) -> Header {
    let i16_at = |o: usize| E::read_i16(&bytes[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&bytes[o..o + 4]);
    let mut dim = [0i16; 8];
    let mut pixdim = [0f32; 8];
    for k in 0..8 {
        dim[k] = i16_at(40 + 2 * k);
        pixdim[k] = f32_at(76 + 4 * k);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(280 + 16 * r + 4 * c);
        }
    }
    Header {
        dim,
        datatype: i16_at(70),
        pixdim,
        vox_offset: f32_at(108),
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
        cal_max: f32_at(124),
        cal_min: f32_at(128),
        sform_code: i16_at(254),
        srow,
        magic: [bytes[344], bytes[345], bytes[346], bytes[347]],
    }
}

fn decode<E: ByteOrder>(h: &Header, payload: &[u8], n: usize) -> Result<Vec<f64>, NiftiError> {
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let need = n * width;
    if payload.len() < need {
        return Err(NiftiError::Truncated {
            expected: need,
            found: payload.len(),
        });
    }
    let raw: Vec<f64> = match h.datatype {
        DT_UINT8 => payload[..n].iter().map(|&b| b as f64).collect(),
        DT_INT16 => payload[..need].chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        _ => payload[..need].chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
    };
    // scl_slope = 0 means "no scaling"
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        return Ok(raw.into_iter().map(|v| v * slope + inter).collect());
    }
    Ok(raw)
}

/// Parses a NIfTI-1 file held in memory.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume3D, NiftiError> {
    if bytes.len() < HEADER_SIZE as usize {
        return Err(NiftiError::Truncated {
            expected: HEADER_SIZE as usize,
            found: bytes.len(),
        });
    }
    let size_le = LittleEndian::read_i32(&bytes[0..4]);
    let big = if size_le == HEADER_SIZE {
        false
    } else if size_le.swap_bytes() == HEADER_SIZE {
        true
    } else {
        return Err(NiftiError::BadHeaderSize(size_le));
    };
    let h = if big {
        parse_header::<BigEndian>(bytes)
    } else {
        parse_header::<LittleEndian>(bytes)
    };
    if &h.magic != MAGIC {
        return Err(NiftiError::BadMagic(h.magic));
    }
    if h.dim[0] != 3 {
        return Err(NiftiError::BadDim(h.dim[0]));
    }
    let dims = [h.dim[1], h.dim[2], h.dim[3]];
    if dims.iter().any(|&d| d < 1) {
        return Err(NiftiError::BadDim(h.dim[0]));
    }
    let dims = dims.map(|d| d as usize);
    let offset = h.vox_offset as usize;
    if h.vox_offset.is_nan() || h.vox_offset < HEADER_SIZE as f32 || offset > bytes.len() {
        return Err(NiftiError::BadVoxOffset(h.vox_offset));
    }
    let n = dims.iter().product();
    let data = if big {
        decode::<BigEndian>(&h, &bytes[offset..], n)?
    } else {
        decode::<LittleEndian>(&h, &bytes[offset..], n)?
    };
    let spacing = [1, 2, 3].map(|k| (h.pixdim[k].abs() as f64).max(f64::MIN_POSITIVE));
    let affine = if h.sform_code > 0 {
        let mut rows = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..4 {
                rows[r][c] = h.srow[r][c] as f64;
            }
        }
        rows[3][3] = 1.0;
        AffineMatrix::from_rows(rows)
    } else {
        AffineMatrix::scaling(spacing)
    };
    let grid = GridSpec::new(dims, spacing, affine).map_err(|e| NiftiError::BadGeometry(e.to_string()))?;
    let mut vol = Volume3D::new(grid, data).map_err(|e| NiftiError::BadGeometry(e.to_string()))?;
    if h.cal_max > h.cal_min {
        vol.set_intensity_range(Some((h.cal_min as f64, h.cal_max as f64)));
    }
    Ok(vol)
}

/// Reads a `.nii` file.
pub fn read_nifti(path: &Path) -> Result<Volume3D, CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    parse_nifti(&bytes).map_err(|source| CliError::Nifti {
        path: path.to_path_buf(),
        source,
    })
}

/// Serialises `vol` as little-endian float32 NIfTI-1 with the sform set from
/// the volume affine.
pub fn encode_nifti(vol: &Volume3D) -> Vec<u8> {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let mut out = Vec::with_capacity(VOX_OFFSET + 4 * vol.data().len());
    let w = &mut out;
    w.write_i32::<LittleEndian>(HEADER_SIZE).unwrap();
    w.extend_from_slice(&[0u8; 36]); // data_type, db_name, extents, session_error, regular, dim_info
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    dim.iter().for_each(|d| w.write_i16::<LittleEndian>(*d).unwrap());
    w.extend_from_slice(&[0u8; 14]); // intent_p1..3, intent_code
    w.write_i16::<LittleEndian>(DT_FLOAT32).unwrap();
    w.write_i16::<LittleEndian>(32).unwrap();
    w.write_i16::<LittleEndian>(0).unwrap(); // slice_start
    let pixdim = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    pixdim.iter().for_each(|p| w.write_f32::<LittleEndian>(*p).unwrap());
    w.write_f32::<LittleEndian>(VOX_OFFSET as f32).unwrap();
    w.write_f32::<LittleEndian>(1.0).unwrap(); // scl_slope
    w.write_f32::<LittleEndian>(0.0).unwrap(); // scl_inter
    w.extend_from_slice(&[0u8; 4]); // slice_end, slice_code, xyzt_units
    let (cal_min, cal_max) = vol.intensity_range().unwrap_or((0.0, 0.0));
    w.write_f32::<LittleEndian>(cal_max as f32).unwrap();
    w.write_f32::<LittleEndian>(cal_min as f32).unwrap();
    w.extend_from_slice(&[0u8; 16]); // slice_duration, toffset, glmax, glmin
    w.extend_from_slice(&[0u8; 80 + 24]); // descrip, aux_file
    w.write_i16::<LittleEndian>(0).unwrap(); // qform_code
    w.write_i16::<LittleEndian>(2).unwrap(); // sform_code: aligned
    w.extend_from_slice(&[0u8; 24]); // quatern_b..d, qoffset_x..z
    let rows = vol.affine().to_rows();
    for row in rows.iter().take(3) {
        row.iter().for_each(|v| w.write_f32::<LittleEndian>(*v as f32).unwrap());
    }
    w.extend_from_slice(&[0u8; 16]); // intent_name
    w.extend_from_slice(MAGIC);
    debug_assert_eq!(w.len(), HEADER_SIZE as usize);
    w.extend_from_slice(&[0u8; 4]); // empty extension block
    for v in vol.data() {
        w.write_f32::<LittleEndian>(*v as f32).unwrap();
    }
    out
}

/// Writes `vol` to `path` (see [`encode_nifti`]).
pub fn write_nifti(vol: &Volume3D, path: &Path) -> Result<(), CliError> {
    fs::write(path, encode_nifti(vol)).map_err(|e| CliError::io(path, e))
}
