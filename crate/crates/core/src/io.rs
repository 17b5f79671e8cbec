//! On-disk formats.
//!
//! Volumes are a `<name>.json` header plus a `<name>.raw` payload of
//! little-endian int16 voxels, slice-major and row-major within a slice.
//! Landmark annotations live in `<name>.landmarks.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data_model::{DataError, LandmarkAnnotation, Point, Spacing, VertebraLandmarks, Volume};

pub const DTYPE_INT16LE: &str = "int16le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    if source.kind() == std::io::ErrorKind::NotFound {
        DataError::MissingFile(path.display().to_string())
    } else {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Header and payload paths for a volume given either file or the bare stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(header), PathBuf::from(raw))
}

fn volume_id_from(path: &Path) -> String {
    let (header, _) = volume_paths(path);
    header
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::MalformedJson {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DataError::MalformedJson {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume, DataError> {
    let (header_path, raw_path) = volume_paths(path);
    let header: VolumeHeader = read_json(&header_path)?;
    if header.dtype != DTYPE_INT16LE {
        return Err(DataError::UnsupportedDtype(header.dtype));
    }
    let [s, h, w] = header.dims;
    if s == 0 || h == 0 || w == 0 {
        return Err(DataError::InvalidDims(header.dims));
    }
    let [ds, dy, dx] = header.spacing_mm;
    let spacing = Spacing::new(ds, dy, dx)?;
    let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    let expected = s * h * w * 2;
    if bytes.len() != expected {
        return Err(DataError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let voxels: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let voxels = Array3::from_shape_vec((s, h, w), voxels)
        .map_err(|e| DataError::InvalidLabels(e.to_string()))?;
    Volume::new(volume_id_from(path), voxels, spacing)
}

pub fn volume_to_bytes(voxels: &Array3<i16>) -> Vec<u8> {
    let mut out = Vec::with_capacity(voxels.len() * 2);
    for v in voxels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), DataError> {
    write_raw_volume(v.voxels(), v.spacing(), path)
}

/// Writes any int16 grid (images or instance labelmaps) in the volume format.
pub fn write_raw_volume(
    voxels: &Array3<i16>,
    spacing: Spacing,
    path: &Path,
) -> Result<(), DataError> {
    let (header_path, raw_path) = volume_paths(path);
    let (s, h, w) = voxels.dim();
    let header = VolumeHeader {
        dims: [s, h, w],
        spacing_mm: spacing.to_array(),
        dtype: DTYPE_INT16LE.to_string(),
    };
    write_json(&header, &header_path)?;
    fs::write(&raw_path, volume_to_bytes(voxels)).map_err(|e| io_err(&raw_path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    volume_id: String,
    slice_index: usize,
    vertebrae: Vec<VertebraFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VertebraFile {
    id: String,
    corners: Vec<[f64; 2]>,
}

/// Parses and validates an annotation. Corner order in the file must describe
/// a simple quadrilateral; it is canonicalized on load.
pub fn read_annotation(path: &Path) -> Result<LandmarkAnnotation, DataError> {
    let file: AnnotationFile = read_json(path)?;
    let mut vertebrae = Vec::with_capacity(file.vertebrae.len());
    for v in file.vertebrae {
        let corners: [[f64; 2]; 4] =
            v.corners
                .try_into()
                .map_err(|c: Vec<[f64; 2]>| DataError::MalformedJson {
                    path: path.display().to_string(),
                    message: format!("vertebra {} has {} corners, expected 4", v.id, c.len()),
                })?;
        vertebrae.push(VertebraLandmarks::new(
            v.id,
            corners.map(|[x, y]| Point::new(x, y)),
        )?);
    }
    LandmarkAnnotation::new(file.volume_id, file.slice_index, vertebrae)
}

/// Reads an annotation and checks it against its volume (ids, slice, bounds).
pub fn read_annotation_for(path: &Path, volume: &Volume) -> Result<LandmarkAnnotation, DataError> {
    let a = read_annotation(path)?;
    a.validate_against(volume)?;
    Ok(a)
}

pub fn write_annotation(a: &LandmarkAnnotation, path: &Path) -> Result<(), DataError> {
    let file = AnnotationFile {
        volume_id: a.volume_id.clone(),
        slice_index: a.slice_index,
        vertebrae: a
            .vertebrae
            .iter()
            .map(|v| VertebraFile {
                id: v.id.clone(),
                corners: v.corners.iter().map(|p| [p.x, p.y]).collect(),
            })
            .collect(),
    };
    write_json(&file, path)
}

pub fn annotation_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.landmarks.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp() -> Spacing {
        Spacing::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn reads_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("z.json"),
            r#"{"dims":[1,2,2],"spacing_mm":[1,1,1],"dtype":"int16le"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("z.raw"), [0u8; 8]).unwrap();
        let v = read_volume(&dir.path().join("z.json")).unwrap();
        assert_eq!(v.dims(), (1, 2, 2));
        assert!(v.voxels().iter().all(|&x| x == 0));
        assert_eq!(v.id(), "z");
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("z.json"),
            r#"{"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"int16le"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("z.raw"), [0u8; 8]).unwrap();
        match read_volume(&dir.path().join("z")) {
            Err(DataError::SizeMismatch { expected, actual }) => {
                assert_eq!((expected, actual), (16, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distinct_read_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("missing")),
            Err(DataError::MissingFile(_))
        ));
        fs::write(
            dir.path().join("s.json"),
            r#"{"dims":[1,1,1],"spacing_mm":[1,-1,1],"dtype":"int16le"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), [0u8; 2]).unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("s")),
            Err(DataError::InvalidSpacing(_))
        ));
    }

    #[test]
    fn little_endian_payload() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new("one", Array3::from_elem((1, 1, 1), 100i16), sp()).unwrap();
        write_volume(&v, &dir.path().join("one")).unwrap();
        assert_eq!(fs::read(dir.path().join("one.raw")).unwrap(), vec![0x64, 0x00]);
        let z = Volume::new("zero", Array3::zeros((2, 3, 4)), sp()).unwrap();
        write_volume(&z, &dir.path().join("zero.json")).unwrap();
        let raw = fs::read(dir.path().join("zero.raw")).unwrap();
        assert_eq!(raw.len(), 48);
        assert!(raw.iter().all(|&b| b == 0));
    }

    #[test]
    fn annotation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.landmarks.json");
        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(read_annotation(&p), Err(DataError::MalformedJson { .. })));
        fs::write(
            &p,
            r#"{"volume_id":"a","slice_index":0,"vertebrae":[{"id":"L1","corners":[[0,0],[4,4],[4,0],[0,4]]}]}"#,
        )
        .unwrap();
        assert!(matches!(read_annotation(&p), Err(DataError::SelfIntersecting(_))));
        fs::write(
            &p,
            r#"{"volume_id":"a","slice_index":0,"vertebrae":[{"id":"L1","corners":[[0,0],[4,0],[4,4],[0,4]]}]}"#,
        )
        .unwrap();
        let a = read_annotation(&p).unwrap();
        assert_eq!(a.vertebrae[0].area(), 16.0);
        let small = Volume::new("a", Array3::zeros((1, 3, 3)), sp()).unwrap();
        assert!(matches!(
            read_annotation_for(&p, &small),
            Err(DataError::OutOfBounds { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn volume_round_trip_is_bit_exact(
            data in proptest::collection::vec(any::<i16>(), 24),
            ds in 0.1f64..5.0, dy in 0.1f64..5.0, dx in 0.1f64..5.0,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let vox = Array3::from_shape_vec((2, 3, 4), data).unwrap();
            let v = Volume::new("rt", vox, Spacing::new(ds, dy, dx).unwrap()).unwrap();
            write_volume(&v, &dir.path().join("rt")).unwrap();
            let raw1 = fs::read(dir.path().join("rt.raw")).unwrap();
            let back = read_volume(&dir.path().join("rt.json")).unwrap();
            prop_assert_eq!(&back, &v);
            write_volume(&back, &dir.path().join("rt2")).unwrap();
            prop_assert_eq!(raw1, fs::read(dir.path().join("rt2.raw")).unwrap());
        }

        #[test]
        fn annotation_round_trip(
            x0 in 0.0f64..20.0, y0 in 0.0f64..20.0, w in 1.0f64..20.0, h in 1.0f64..20.0,
            skew in -0.9f64..0.9, slice in 0usize..9,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let corners = [
                Point::new(x0 + skew, y0),
                Point::new(x0 + w, y0 + skew.abs()),
                Point::new(x0 + w - skew, y0 + h),
                Point::new(x0, y0 + h),
            ];
            let a = LandmarkAnnotation::new(
                "vol", slice, vec![VertebraLandmarks::new("L1", corners).unwrap()],
            ).unwrap();
            let p = annotation_path(dir.path(), "vol");
            write_annotation(&a, &p).unwrap();
            prop_assert_eq!(read_annotation(&p).unwrap(), a);
        }
    }
}
