//! `.mskv` volume and `.mski` image files.
//!
//! Both are a single UTF-8 JSON header line terminated by `\n`, followed
//! directly by a raw little-endian payload in x-fastest (column-fastest for
//! images) order. Scalar payloads are `f32`; label payloads are `u16`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::project::DrrKind;
use crate::volume::{Grid3, LabelMap, ScalarVolume, VolumeKind};

pub const VOLUME_MAGIC: &str = "MSKV1";
pub const IMAGE_MAGIC: &str = "MSKI1";

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Scalar(ScalarVolume),
    Labels(LabelMap),
}

impl VolumeFile {
    pub fn grid(&self) -> &Grid3 {
        match self {
            VolumeFile::Scalar(v) => v.grid(),
            VolumeFile::Labels(m) => m.grid(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            VolumeFile::Scalar(v) => Ok(v),
            VolumeFile::Labels(_) => Err(Error::Usage(
                "expected a scalar volume, found a label map".into(),
            )),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            VolumeFile::Labels(m) => Ok(m),
            VolumeFile::Scalar(_) => Err(Error::Usage(
                "expected a label map, found a scalar volume".into(),
            )),
        }
    }
}

impl From<ScalarVolume> for VolumeFile {
    fn from(v: ScalarVolume) -> Self {
        VolumeFile::Scalar(v)
    }
}

impl From<LabelMap> for VolumeFile {
    fn from(m: LabelMap) -> Self {
        VolumeFile::Labels(m)
    }
}

#[derive(Serialize)]
struct VolumeHeader<'a> {
    magic: &'a str,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    kind: &'a str,
    dtype: &'a str,
}

/// Encodes a volume. Scalar values are narrowed to `f32`.
pub fn encode_volume(v: &VolumeFile) -> Result<Vec<u8>> {
    let grid = v.grid();
    let (kind, dtype) = match v {
        VolumeFile::Scalar(s) => (s.kind().as_str(), "f32"),
        VolumeFile::Labels(_) => ("labels", "u16"),
    };
    let header = VolumeHeader {
        magic: VOLUME_MAGIC,
        dims: grid.dims(),
        spacing_mm: grid.spacing(),
        origin_mm: grid.origin(),
        kind,
        dtype,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    match v {
        VolumeFile::Scalar(s) => {
            out.reserve(4 * s.values().len());
            for &x in s.values() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        VolumeFile::Labels(m) => {
            out.reserve(2 * m.labels().len());
            for &l in m.labels() {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_volume(v: &VolumeFile, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_volume(v)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let f = fs::File::open(path)?;
    decode_volume(BufReader::new(f))
}

pub fn decode_volume(mut reader: impl BufRead) -> Result<VolumeFile> {
    let header = read_header(&mut reader)?;
    expect_magic(&header, VOLUME_MAGIC)?;
    let dims = usize_triple(&header, "dims")?;
    let spacing = f64_array::<3>(&header, "spacing_mm")?;
    let origin = f64_array::<3>(&header, "origin_mm")?;
    let kind = str_field(&header, "kind")?;
    let dtype = str_field(&header, "dtype")?;
    let grid = Grid3::new(dims, spacing, origin).map_err(|e| match e {
        Error::Dimension(reason) => Error::format("dims", reason),
        other => other,
    })?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    if kind == "labels" {
        if dtype != "u16" {
            return Err(Error::format(
                "dtype",
                format!("labels require u16, got `{dtype}`"),
            ));
        }
        check_payload(payload.len(), grid.len() * 2)?;
        let labels = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        return Ok(VolumeFile::Labels(LabelMap::new(grid, labels)?));
    }

    let kind = VolumeKind::parse(kind)
        .ok_or_else(|| Error::format("kind", format!("unknown volume kind `{kind}`")))?;
    if dtype != "f32" {
        return Err(Error::format(
            "dtype",
            format!("scalar volumes require f32, got `{dtype}`"),
        ));
    }
    check_payload(payload.len(), grid.len() * 4)?;
    let values = decode_f32(&payload);
    Ok(VolumeFile::Scalar(ScalarVolume::new(grid, values, kind)?))
}

/// A decoded `.mski` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFile {
    pub image: Image,
    /// `[row, column]` spacing in millimeters.
    pub pixel_spacing_mm: [f64; 2],
    pub kind: ImageKind,
    pub object_name: String,
    pub units: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    Drr(DrrKind),
    /// A radiograph or any other non-decomposed image.
    Xray,
}

impl ImageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageKind::Drr(k) => k.as_str(),
            ImageKind::Xray => "xray",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "xray" {
            return Some(ImageKind::Xray);
        }
        DrrKind::parse(s).map(ImageKind::Drr)
    }
}

#[derive(Serialize)]
struct ImageHeader<'a> {
    magic: &'a str,
    dims: [usize; 2],
    pixel_spacing_mm: [f64; 2],
    kind: &'a str,
    object_name: &'a str,
    units: &'a str,
}

pub fn encode_image(f: &ImageFile) -> Result<Vec<u8>> {
    let header = ImageHeader {
        magic: IMAGE_MAGIC,
        dims: [f.image.height(), f.image.width()],
        pixel_spacing_mm: f.pixel_spacing_mm,
        kind: f.kind.as_str(),
        object_name: &f.object_name,
        units: &f.units,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(4 * f.image.len());
    for &x in f.image.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_image(f: &ImageFile, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_image(f)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageFile> {
    let f = fs::File::open(path)?;
    decode_image(BufReader::new(f))
}

pub fn decode_image(mut reader: impl BufRead) -> Result<ImageFile> {
    let header = read_header(&mut reader)?;
    expect_magic(&header, IMAGE_MAGIC)?;
    let dims = usize_array::<2>(&header, "dims")?;
    if dims.contains(&0) {
        return Err(Error::format("dims", "image dims must be positive"));
    }
    let spacing = f64_array::<2>(&header, "pixel_spacing_mm")?;
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::format(
            "pixel_spacing_mm",
            "spacing must be positive",
        ));
    }
    let kind_str = str_field(&header, "kind")?;
    let kind = ImageKind::parse(kind_str)
        .ok_or_else(|| Error::format("kind", format!("unknown image kind `{kind_str}`")))?;
    let object_name = str_field(&header, "object_name")?.to_string();
    let units = str_field(&header, "units")?.to_string();

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    check_payload(payload.len(), dims[0] * dims[1] * 4)?;
    let image = Image::from_vec(dims[0], dims[1], decode_f32(&payload))?;
    if !image.is_finite() {
        return Err(Error::format("payload", "non-finite pixel value"));
    }
    Ok(ImageFile {
        image,
        pixel_spacing_mm: spacing,
        kind,
        object_name,
        units,
    })
}

fn read_header(reader: &mut impl BufRead) -> Result<Map<String, Value>> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("header", "missing newline terminator"));
    }
    line.pop();
    let text = std::str::from_utf8(&line).map_err(|_| Error::format("header", "not UTF-8"))?;
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::format("header", "not a JSON object")),
        Err(e) => Err(Error::format("header", e.to_string())),
    }
}

fn expect_magic(header: &Map<String, Value>, magic: &str) -> Result<()> {
    let found = str_field(header, "magic")?;
    if found != magic {
        return Err(Error::format(
            "magic",
            format!("expected `{magic}`, found `{found}`"),
        ));
    }
    Ok(())
}

fn field<'a>(header: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    header
        .get(name)
        .ok_or_else(|| Error::format(name, "missing"))
}

fn str_field<'a>(header: &'a Map<String, Value>, name: &str) -> Result<&'a str> {
    field(header, name)?
        .as_str()
        .ok_or_else(|| Error::format(name, "expected a string"))
}

fn array_field<'a, const N: usize>(
    header: &'a Map<String, Value>,
    name: &str,
) -> Result<&'a Vec<Value>> {
    let arr = field(header, name)?
        .as_array()
        .ok_or_else(|| Error::format(name, "expected an array"))?;
    if arr.len() != N {
        return Err(Error::format(
            name,
            format!("expected {N} entries, found {}", arr.len()),
        ));
    }
    Ok(arr)
}

fn usize_array<const N: usize>(header: &Map<String, Value>, name: &str) -> Result<[usize; N]> {
    let arr = array_field::<N>(header, name)?;
    let mut out = [0usize; N];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v
            .as_u64()
            .ok_or_else(|| Error::format(name, "expected non-negative integers"))?
            as usize;
    }
    Ok(out)
}

fn usize_triple(header: &Map<String, Value>, name: &str) -> Result<[usize; 3]> {
    usize_array::<3>(header, name)
}

fn f64_array<const N: usize>(header: &Map<String, Value>, name: &str) -> Result<[f64; N]> {
    let arr = array_field::<N>(header, name)?;
    let mut out = [0f64; N];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v
            .as_f64()
            .ok_or_else(|| Error::format(name, "expected numbers"))?;
    }
    Ok(out)
}

fn check_payload(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Truncated { expected, found });
    }
    Ok(())
}

fn decode_f32(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(json: &str) -> Vec<u8> {
        let mut b = json.as_bytes().to_vec();
        b.push(b'\n');
        b
    }

    const HDR_222: &str = r#"{"magic":"MSKV1","dims":[2,2,2],"spacing_mm":[1.0,1.0,1.0],"origin_mm":[0.0,0.0,0.0],"kind":"hu","dtype":"f32"}"#;

    #[test]
    fn minimal_well_formed_file() {
        let mut bytes = header_bytes(HDR_222);
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let v = decode_volume(&bytes[..]).unwrap().into_scalar().unwrap();
        assert_eq!(v.values().len(), 8);
        assert_eq!(v.values()[7], 7.0);
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = header_bytes(HDR_222);
        for _ in 0..7 {
            bytes.extend_from_slice(&1f32.to_le_bytes());
        }
        assert!(matches!(
            decode_volume(&bytes[..]),
            Err(Error::Truncated {
                expected: 32,
                found: 28
            })
        ));
    }

    #[test]
    fn malformed_header_names_field() {
        let cases = [
            (
                r#"{"magic":"MSKV2","dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"kind":"hu","dtype":"f32"}"#,
                "magic",
            ),
            (
                r#"{"magic":"MSKV1","dims":[2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"kind":"hu","dtype":"f32"}"#,
                "dims",
            ),
            (
                r#"{"magic":"MSKV1","dims":[2,2,2],"spacing_mm":[1,"a",1],"origin_mm":[0,0,0],"kind":"hu","dtype":"f32"}"#,
                "spacing_mm",
            ),
            (
                r#"{"magic":"MSKV1","dims":[2,2,2],"spacing_mm":[1,1,1],"kind":"hu","dtype":"f32"}"#,
                "origin_mm",
            ),
            (
                r#"{"magic":"MSKV1","dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"kind":"bone","dtype":"f32"}"#,
                "kind",
            ),
            (
                r#"{"magic":"MSKV1","dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"kind":"hu","dtype":"u16"}"#,
                "dtype",
            ),
            (
                r#"{"magic":"MSKV1","dims":[0,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"kind":"hu","dtype":"f32"}"#,
                "dims",
            ),
            (r#"[1,2]"#, "header"),
        ];
        for (hdr, want) in cases {
            let mut bytes = header_bytes(hdr);
            bytes.extend_from_slice(&[0u8; 32]);
            match decode_volume(&bytes[..]) {
                Err(Error::Format { field, .. }) => assert_eq!(field, want, "{hdr}"),
                other => panic!("expected format error for {want}, got {other:?}"),
            }
        }
    }

    #[test]
    fn single_voxel_payload_bytes() {
        let g = Grid3::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = ScalarVolume::filled(g, 3.5, VolumeKind::Hu).unwrap();
        let bytes = encode_volume(&v.into()).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[nl + 1..], &3.5f32.to_le_bytes());
        let header: Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["magic"], "MSKV1");
        assert_eq!(header["dtype"], "f32");
    }

    #[test]
    fn max_label_round_trips() {
        let g = Grid3::new([2, 1, 1], [0.7, 1.3, 2.9], [-1.25, 3.0, 1e-3]).unwrap();
        let m = LabelMap::new(g, vec![65535, 0]).unwrap();
        let bytes = encode_volume(&m.clone().into()).unwrap();
        assert_eq!(decode_volume(&bytes[..]).unwrap(), VolumeFile::Labels(m));
    }

    #[test]
    fn image_header_and_round_trip() {
        let f = ImageFile {
            image: Image::from_vec(2, 3, vec![0.0, 1.5, 2.25, -3.0, 4.0, 5.5]).unwrap(),
            pixel_spacing_mm: [0.8, 1.2],
            kind: ImageKind::Drr(DrrKind::M),
            object_name: "glu_med".into(),
            units: "g/cm^2".into(),
        };
        let bytes = encode_image(&f).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["magic"], "MSKI1");
        assert_eq!(header["dims"], serde_json::json!([2, 3]));
        assert_eq!(decode_image(&bytes[..]).unwrap(), f);

        let mut short = bytes.clone();
        short.truncate(short.len() - 1);
        assert!(matches!(
            decode_image(&short[..]),
            Err(Error::Truncated { .. })
        ));
    }
}
