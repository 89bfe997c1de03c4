//! Single-file little-endian NIfTI-1 reader and writer for scalar volumes and
//! 3-component displacement fields.

use std::path::Path;

use crate::geometry::Affine;
use crate::volumes::{voxel_sizes, ImageStack, LabelVolume, LoadedVolume, RawData};
use crate::{Error, Result};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;

/// Displacement vector intent code.
pub const INTENT_DISPVECT: i16 = 1006;

const UNITS_METER: u8 = 1;
const UNITS_MM: u8 = 2;
const UNITS_MICRON: u8 = 3;

/// All fields of the 348-byte header, kept verbatim so a read/write cycle
/// reproduces the header bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p: [f32; 3],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.b[self.at..self.at + N]);
        self.at += N;
        out
    }
    fn i16(&mut self) -> i16 {
        i16::from_le_bytes(self.bytes())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.bytes())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.bytes())
    }
    fn u8(&mut self) -> u8 {
        self.bytes::<1>()[0]
    }
}

impl NiftiHeader {
    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::Parse(format!(
                "header needs {HEADER_LEN} bytes, file has {}",
                b.len()
            )));
        }
        let size = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if size != HEADER_LEN as i32 {
            if i32::from_be_bytes([b[0], b[1], b[2], b[3]]) == HEADER_LEN as i32 {
                return Err(Error::Parse("big-endian NIfTI is not supported".into()));
            }
            return Err(Error::Parse(format!("bad header size {size}")));
        }
        let mut c = Cursor { b, at: 4 };
        let h = NiftiHeader {
            data_type: c.bytes(),
            db_name: c.bytes(),
            extents: c.i32(),
            session_error: c.i16(),
            regular: c.u8(),
            dim_info: c.u8(),
            dim: std::array::from_fn(|_| c.i16()),
            intent_p: std::array::from_fn(|_| c.f32()),
            intent_code: c.i16(),
            datatype: c.i16(),
            bitpix: c.i16(),
            slice_start: c.i16(),
            pixdim: std::array::from_fn(|_| c.f32()),
            vox_offset: c.f32(),
            scl_slope: c.f32(),
            scl_inter: c.f32(),
            slice_end: c.i16(),
            slice_code: c.u8(),
            xyzt_units: c.u8(),
            cal_max: c.f32(),
            cal_min: c.f32(),
            slice_duration: c.f32(),
            toffset: c.f32(),
            glmax: c.i32(),
            glmin: c.i32(),
            descrip: c.bytes(),
            aux_file: c.bytes(),
            qform_code: c.i16(),
            sform_code: c.i16(),
            quatern: std::array::from_fn(|_| c.f32()),
            qoffset: std::array::from_fn(|_| c.f32()),
            srow: std::array::from_fn(|_| std::array::from_fn(|_| c.f32())),
            intent_name: c.bytes(),
            magic: c.bytes(),
        };
        debug_assert_eq!(c.at, HEADER_LEN);
        if &h.magic != b"n+1\0" {
            return Err(Error::Parse("not a single-file NIfTI-1 volume".into()));
        }
        Ok(h)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut o = Vec::with_capacity(HEADER_LEN);
        o.extend_from_slice(&(HEADER_LEN as i32).to_le_bytes());
        o.extend_from_slice(&self.data_type);
        o.extend_from_slice(&self.db_name);
        o.extend_from_slice(&self.extents.to_le_bytes());
        o.extend_from_slice(&self.session_error.to_le_bytes());
        o.push(self.regular);
        o.push(self.dim_info);
        self.dim.iter().for_each(|v| o.extend_from_slice(&v.to_le_bytes()));
        self.intent_p.iter().for_each(|v| o.extend_from_slice(&v.to_le_bytes()));
        o.extend_from_slice(&self.intent_code.to_le_bytes());
        o.extend_from_slice(&self.datatype.to_le_bytes());
        o.extend_from_slice(&self.bitpix.to_le_bytes());
        o.extend_from_slice(&self.slice_start.to_le_bytes());
        self.pixdim.iter().for_each(|v| o.extend_from_slice(&v.to_le_bytes()));
        o.extend_from_slice(&self.vox_offset.to_le_bytes());
        o.extend_from_slice(&self.scl_slope.to_le_bytes());
        o.extend_from_slice(&self.scl_inter.to_le_bytes());
        o.extend_from_slice(&self.slice_end.to_le_bytes());
        o.push(self.slice_code);
        o.push(self.xyzt_units);
        for v in [self.cal_max, self.cal_min, self.slice_duration, self.toffset] {
            o.extend_from_slice(&v.to_le_bytes());
        }
        o.extend_from_slice(&self.glmax.to_le_bytes());
        o.extend_from_slice(&self.glmin.to_le_bytes());
        o.extend_from_slice(&self.descrip);
        o.extend_from_slice(&self.aux_file);
        o.extend_from_slice(&self.qform_code.to_le_bytes());
        o.extend_from_slice(&self.sform_code.to_le_bytes());
        self.quatern.iter().for_each(|v| o.extend_from_slice(&v.to_le_bytes()));
        self.qoffset.iter().for_each(|v| o.extend_from_slice(&v.to_le_bytes()));
        self.srow.iter().flatten().for_each(|v| o.extend_from_slice(&v.to_le_bytes()));
        o.extend_from_slice(&self.intent_name);
        o.extend_from_slice(&self.magic);
        debug_assert_eq!(o.len(), HEADER_LEN);
        o
    }

    /// Header for a new volume with the transform stored in the s-form.
    pub fn new(dims: [usize; 3], components: usize, datatype: i16, affine: &Affine) -> Result<Self> {
        let bitpix = bits(datatype)?;
        let mut dim = [1i16; 8];
        dim[0] = if components > 1 { 5 } else { 3 };
        for a in 0..3 {
            dim[a + 1] = i16::try_from(dims[a])
                .map_err(|_| Error::ShapeMismatch(format!("dimension {} too large for NIfTI-1", dims[a])))?;
        }
        dim[5] = components as i16;
        let vs = voxel_sizes(affine);
        let mut pixdim = [1.0f32; 8];
        pixdim[1] = vs[0] as f32;
        pixdim[2] = vs[1] as f32;
        pixdim[3] = vs[2] as f32;
        let m = affine.matrix();
        Ok(NiftiHeader {
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim,
            intent_p: [0.0; 3],
            intent_code: if components == 3 { INTENT_DISPVECT } else { 0 },
            datatype,
            bitpix,
            slice_start: 0,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: UNITS_MM,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 2,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: std::array::from_fn(|r| std::array::from_fn(|c| m[r][c] as f32)),
            intent_name: [0; 16],
            magic: *b"n+1\0",
        })
    }

    pub fn dims(&self) -> Result<[usize; 3]> {
        let nd = self.dim[0];
        if !(1..=7).contains(&nd) {
            return Err(Error::Parse(format!("invalid dimension count {nd}")));
        }
        let mut out = [1usize; 3];
        for a in 0..3 {
            if (a as i16) < nd {
                let d = self.dim[a + 1];
                if d < 1 {
                    return Err(Error::Parse(format!("invalid dimension {d}")));
                }
                out[a] = d as usize;
            }
        }
        Ok(out)
    }

    /// Number of values per voxel (1 for scalars, 3 for displacement fields).
    pub fn components(&self) -> Result<usize> {
        let nd = self.dim[0];
        for a in 4..=nd as usize {
            let d = self.dim[a];
            let ok = d == 1 || (a == 5 && d == 3);
            if !ok {
                return Err(Error::Parse(format!(
                    "unsupported extent {d} along dimension {a}; only scalar or 3-vector volumes are read"
                )));
            }
        }
        Ok(if nd >= 5 { self.dim[5] as usize } else { 1 })
    }

    fn unit_scale(&self) -> f64 {
        match self.xyzt_units & 7 {
            UNITS_METER => 1000.0,
            UNITS_MICRON => 1e-3,
            _ => 1.0,
        }
    }

    /// Array-to-world transform in millimetres: s-form, else q-form, else spacing.
    pub fn affine(&self) -> Result<Affine> {
        let u = self.unit_scale();
        let a = if self.sform_code > 0 {
            let mut rows = [[0.0; 4]; 3];
            for r in 0..3 {
                for c in 0..4 {
                    rows[r][c] = self.srow[r][c] as f64 * u;
                }
            }
            Affine::from_rows(rows)
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let s = [
                self.pixdim[1] as f64 * u,
                self.pixdim[2] as f64 * u,
                self.pixdim[3] as f64 * u * qfac,
            ];
            let mut lin = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    lin[i][j] = r[i][j] * s[j];
                }
            }
            Affine::from_linear(lin, self.qoffset.map(|v| v as f64 * u))
        } else {
            let s = [1, 2, 3].map(|i| {
                let p = self.pixdim[i].abs() as f64;
                if p > 0.0 {
                    p * u
                } else {
                    1.0
                }
            });
            Affine::scaling(s)
        };
        a.invert()?;
        Ok(a)
    }
}

fn bits(datatype: i16) -> Result<i16> {
    Ok(match datatype {
        DT_UINT8 | DT_INT8 => 8,
        DT_INT16 | DT_UINT16 => 16,
        DT_FLOAT32 => 32,
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

/// Voxel values as stored.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::U8(v) => v.len(),
            Payload::I8(v) => v.len(),
            Payload::I16(v) => v.len(),
            Payload::U16(v) => v.len(),
            Payload::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn datatype(&self) -> i16 {
        match self {
            Payload::U8(_) => DT_UINT8,
            Payload::I8(_) => DT_INT8,
            Payload::I16(_) => DT_INT16,
            Payload::U16(_) => DT_UINT16,
            Payload::F32(_) => DT_FLOAT32,
        }
    }

    fn decode(datatype: i16, b: &[u8], n: usize) -> Result<Self> {
        let need = n * (bits(datatype)? as usize / 8);
        if b.len() < need {
            return Err(Error::Parse(format!(
                "truncated data: need {need} bytes, found {}",
                b.len()
            )));
        }
        let b = &b[..need];
        Ok(match datatype {
            DT_UINT8 => Payload::U8(b.to_vec()),
            DT_INT8 => Payload::I8(b.iter().map(|&v| v as i8).collect()),
            DT_INT16 => Payload::I16(b.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()),
            DT_UINT16 => Payload::U16(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
            DT_FLOAT32 => Payload::F32(
                b.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            Payload::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn as_f64(&self) -> Vec<f64> {
        match self {
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::I8(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::I16(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U16(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    pub payload: Payload,
}

impl NiftiVolume {
    pub fn from_image(img: &ImageStack) -> Self {
        NiftiVolume {
            header: NiftiHeader::new(img.dims(), 1, DT_FLOAT32, img.affine())
                .expect("image dimensions fit NIfTI-1"),
            payload: Payload::F32(img.data().to_vec()),
        }
    }

    pub fn from_labels(lab: &LabelVolume) -> Self {
        let max = lab.data().iter().copied().max().unwrap_or(0);
        let payload = if max <= u16::MAX as u32 {
            Payload::U16(lab.data().iter().map(|&v| v as u16).collect())
        } else {
            Payload::F32(lab.data().iter().map(|&v| v as f32).collect())
        };
        let dt = payload.datatype();
        NiftiVolume {
            header: NiftiHeader::new(lab.dims(), 1, dt, lab.affine()).expect("label dimensions fit NIfTI-1"),
            payload,
        }
    }

    /// 3-vector field stored as `dim5 = 3`, components planar.
    pub fn from_vector_field(dims: [usize; 3], planar: &[f32], affine: &Affine) -> Result<Self> {
        let n: usize = dims.iter().product();
        if planar.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!(
                "vector field of {} values for {n} voxels",
                planar.len()
            )));
        }
        Ok(NiftiVolume {
            header: NiftiHeader::new(dims, 3, DT_FLOAT32, affine)?,
            payload: Payload::F32(planar.to_vec()),
        })
    }

    /// Voxel values with the intensity scaling applied.
    pub fn scaled_values(&self) -> Vec<f64> {
        let (s, i) = (self.header.scl_slope as f64, self.header.scl_inter as f64);
        let raw = self.payload.as_f64();
        if s == 0.0 || (s == 1.0 && i == 0.0) || !s.is_finite() {
            raw
        } else {
            raw.into_iter().map(|v| v * s + i).collect()
        }
    }

    pub fn into_loaded(self) -> Result<LoadedVolume> {
        if self.header.components()? != 1 {
            return Err(Error::Parse("expected a scalar volume, found a vector field".into()));
        }
        let dims = self.header.dims()?;
        let affine = self.header.affine()?;
        let integral = !matches!(self.payload, Payload::F32(_));
        let values = self.scaled_values();
        let data = if integral && values.iter().all(|&v| v >= 0.0 && v.fract() == 0.0) {
            RawData::U32(values.into_iter().map(|v| v as u32).collect())
        } else {
            RawData::F32(values.into_iter().map(|v| v as f32).collect())
        };
        Ok(LoadedVolume { dims, data, affine })
    }
}

pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume> {
    let header = NiftiHeader::from_bytes(bytes)?;
    let dims = header.dims()?;
    let comps = header.components()?;
    let offset = header.vox_offset;
    if !(offset >= HEADER_LEN as f32) || offset.fract() != 0.0 {
        return Err(Error::Parse(format!("invalid data offset {offset}")));
    }
    let offset = offset as usize;
    if bytes.len() < offset {
        return Err(Error::Parse("file ends before the data offset".into()));
    }
    let n = dims.iter().product::<usize>() * comps;
    let payload = Payload::decode(header.datatype, &bytes[offset..], n)?;
    Ok(NiftiVolume { header, payload })
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = std::fs::read(path)?;
    parse_nifti(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn encode_nifti(vol: &NiftiVolume) -> Result<Vec<u8>> {
    let expected = vol.header.dims()?.iter().product::<usize>() * vol.header.components()?;
    if vol.payload.len() != expected || vol.payload.datatype() != vol.header.datatype {
        return Err(Error::ShapeMismatch("payload does not match header".into()));
    }
    let offset = vol.header.vox_offset as usize;
    let mut out = vol.header.to_bytes();
    out.resize(offset.max(DATA_OFFSET), 0);
    vol.payload.encode(&mut out);
    Ok(out)
}

pub fn write_nifti(path: &Path, vol: &NiftiVolume) -> Result<()> {
    std::fs::write(path, encode_nifti(vol)?)?;
    Ok(())
}
