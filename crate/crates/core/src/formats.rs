//! Feature and global-descriptor files: a line-oriented text header closed by
//! `end`, followed by a raw little-endian `f32` payload. See `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::descriptor::ExtractionMode;
use crate::error::{Error, Result};
use crate::global_desc::{GlobalDescriptor, RetrievalIndex};
use crate::pipeline::{keypoint_rows, LocalFeatures};

pub const FEATURE_MAGIC: &str = "UNIFEAT-FEATURES";
pub const GLOBAL_MAGIC: &str = "UNIFEAT-GLOBAL";
pub const FORMAT_VERSION: u32 = 1;

/// Extension of global-descriptor files inside an index directory.
pub const GLOBAL_EXT: &str = "gdesc";

const UNIT_TOLERANCE: f64 = 1e-5;

/// Keypoints and local descriptors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub image_width: usize,
    pub image_height: usize,
    /// Stride of the detection map, in pixels.
    pub stride: f64,
    pub mode: ExtractionMode,
    pub groups: usize,
    /// `N×4` rows `(x, y, score, group_id)`.
    pub keypoints: Array2<f32>,
    /// `N×D`
    pub descriptors: Array2<f32>,
}

impl FeatureFile {
    pub fn from_local(local: &LocalFeatures, mode: ExtractionMode, groups: usize) -> Self {
        FeatureFile {
            image_width: local.image_size.0,
            image_height: local.image_size.1,
            stride: local.stride,
            mode,
            groups,
            keypoints: keypoint_rows(&local.keypoints),
            descriptors: local.descriptors.vectors.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    fn check(&self) -> Result<()> {
        if self.keypoints.ncols() != 4 {
            return Err(Error::dim(format!(
                "keypoint rows have {} columns, expected 4",
                self.keypoints.ncols()
            )));
        }
        if self.keypoints.nrows() != self.descriptors.nrows() {
            return Err(Error::dim(format!(
                "{} keypoints but {} descriptors",
                self.keypoints.nrows(),
                self.descriptors.nrows()
            )));
        }
        if self.dim() == 0 {
            return Err(Error::dim("descriptor dim must be positive"));
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::arg(format!(
                "stride {} is not positive",
                self.stride
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let n = self.len();
        let mut out = format!(
            "{FEATURE_MAGIC}\nversion {FORMAT_VERSION}\ndim {}\ncount {n}\nimage_width {}\n\
             image_height {}\nstride {}\nmode {}\ngroups {}\nend\n",
            self.dim(),
            self.image_width,
            self.image_height,
            self.stride,
            self.mode.as_str(),
            self.groups,
        )
        .into_bytes();
        out.reserve(4 * n * (4 + self.dim()));
        push_f32(&mut out, self.keypoints.iter());
        push_f32(&mut out, self.descriptors.iter());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes, FEATURE_MAGIC)?;
        let dim: usize = header.number("dim")?;
        let n: usize = header.number("count")?;
        let mode_raw = header.text("mode")?;
        let mode = ExtractionMode::parse(mode_raw)
            .ok_or_else(|| Error::Format(format!("unknown mode {mode_raw:?}")))?;
        header.expect_only(&[
            "version",
            "dim",
            "count",
            "image_width",
            "image_height",
            "stride",
            "mode",
            "groups",
        ])?;
        if dim == 0 {
            return Err(Error::Format("dim must be positive".into()));
        }
        let values = n
            .checked_mul(4 + dim)
            .ok_or_else(|| Error::Format("count overflows".into()))?;
        let floats = read_f32(payload, values)?;
        let (kp, desc) = floats.split_at(4 * n);
        let file = FeatureFile {
            image_width: header.number("image_width")?,
            image_height: header.number("image_height")?,
            stride: header.number("stride")?,
            mode,
            groups: header.number("groups")?,
            keypoints: Array2::from_shape_vec((n, 4), kp.to_vec()).expect("sized"),
            descriptors: Array2::from_shape_vec((n, dim), desc.to_vec()).expect("sized"),
        };
        file.check().map_err(|e| Error::Format(e.to_string()))?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| in_file(path, e))
    }
}

/// Global descriptor of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescFile {
    pub image_id: String,
    pub vector: Array1<f32>,
}

impl GlobalDescFile {
    pub fn new(image_id: impl Into<String>, desc: &GlobalDescriptor) -> Self {
        GlobalDescFile {
            image_id: image_id.into(),
            vector: desc.vector.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn descriptor(&self) -> GlobalDescriptor {
        GlobalDescriptor::from_vector(self.vector.clone())
    }

    fn check(&self) -> Result<()> {
        let id = &self.image_id;
        if id.is_empty() || id.trim() != id || id.contains(['\n', '\r']) {
            return Err(Error::arg(format!(
                "image id {id:?} must be non-empty, single-line and unpadded"
            )));
        }
        if self.vector.is_empty() {
            return Err(Error::dim("global descriptor is empty"));
        }
        let norm = self
            .vector
            .iter()
            .map(|v| f64::from(*v).powi(2))
            .sum::<f64>()
            .sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::arg(format!(
                "global descriptor of {id:?} has norm {norm}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = format!(
            "{GLOBAL_MAGIC}\nversion {FORMAT_VERSION}\ndim {}\nimage_id {}\nend\n",
            self.dim(),
            self.image_id
        )
        .into_bytes();
        push_f32(&mut out, self.vector.iter());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes, GLOBAL_MAGIC)?;
        header.expect_only(&["version", "dim", "image_id"])?;
        let dim: usize = header.number("dim")?;
        let file = GlobalDescFile {
            image_id: header.text("image_id")?.to_string(),
            vector: Array1::from_vec(read_f32(payload, dim)?),
        };
        file.check().map_err(|e| Error::Format(e.to_string()))?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| in_file(path, e))
    }
}

/// Every `*.gdesc` file of `dir`, in file-name order.
pub fn index_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![];
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == GLOBAL_EXT) && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Builds a retrieval index from a directory of global-descriptor files.
///
/// Fails with a dimension error when the files disagree on the descriptor length.
pub fn load_index(dir: &Path) -> Result<RetrievalIndex> {
    let mut index = RetrievalIndex::new();
    for path in index_files(dir)? {
        let file = GlobalDescFile::read(&path)?;
        index
            .insert(file.image_id.clone(), file.descriptor())
            .map_err(|e| in_file(&path, e))?;
    }
    Ok(index)
}

/// File name used for an image id inside an index directory.
pub fn index_file_name(image_id: &str) -> String {
    let safe: String = image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.{GLOBAL_EXT}")
}

fn in_file(path: &Path, e: Error) -> Error {
    let at = path.display();
    match e {
        Error::Format(m) => Error::Format(format!("{at}: {m}")),
        Error::Dimension(m) => Error::Dimension(format!("{at}: {m}")),
        other => other,
    }
}

fn push_f32<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32(payload: &[u8], count: usize) -> Result<Vec<f32>> {
    let want = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if payload.len() != want {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {want}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

struct Header<'a> {
    fields: BTreeMap<&'a str, &'a str>,
}

impl<'a> Header<'a> {
    fn text(&self, key: &str) -> Result<&'a str> {
        self.fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::Format(format!("header lacks {key}")))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.text(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("header {key} = {raw:?} is not a number")))
    }

    fn expect_only(&self, keys: &[&str]) -> Result<()> {
        match self.fields.keys().find(|k| !keys.contains(k)) {
            Some(k) => Err(Error::Format(format!("unknown header key {k:?}"))),
            None => Ok(()),
        }
    }
}

/// Splits the text header (through the `end` line) from the payload and checks the version.
fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Header<'a>, &'a [u8])> {
    let mut fields = BTreeMap::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("header is not terminated by an end line".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != magic {
                return Err(Error::Format(format!(
                    "expected {magic} header, found {line:?}"
                )));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        if fields.insert(key, value).is_some() {
            return Err(Error::Format(format!("duplicate header key {key:?}")));
        }
    }
    let header = Header { fields };
    let version: u32 = header.number("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok((header, &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feature(n: usize, d: usize) -> FeatureFile {
        FeatureFile {
            image_width: 640,
            image_height: 480,
            stride: 4.0,
            mode: ExtractionMode::Teacher,
            groups: 6,
            keypoints: Array2::from_shape_fn((n, 4), |(i, j)| (i * 4 + j) as f32 * 0.5),
            descriptors: Array2::from_shape_fn((n, d), |(i, j)| (i as f32 - j as f32) / 7.0),
        }
    }

    #[test]
    fn feature_layout_matches_documented_bytes() {
        let f = feature(2, 3);
        let bytes = f.to_bytes().unwrap();
        let header = "UNIFEAT-FEATURES\nversion 1\ndim 3\ncount 2\nimage_width 640\n\
                      image_height 480\nstride 4\nmode teacher\ngroups 6\nend\n";
        assert!(bytes.starts_with(header.as_bytes()));
        let payload = &bytes[header.len()..];
        assert_eq!(payload.len(), 4 * (4 * 2 + 2 * 3));
        // first keypoint x, then the first descriptor value after all keypoints
        assert_eq!(&payload[..4], &0f32.to_le_bytes());
        assert_eq!(&payload[4..8], &0.5f32.to_le_bytes());
        assert_eq!(&payload[32..36], &0f32.to_le_bytes());
        assert_eq!(&payload[36..40], &(-1f32 / 7.0).to_le_bytes());
    }

    #[test]
    fn empty_feature_file_round_trips() {
        let f = feature(0, 1536);
        let back = FeatureFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(back, f);
        assert!(back.is_empty());
        assert_eq!(back.dim(), 1536);
    }

    #[test]
    fn corrupt_feature_files_are_rejected() {
        let good = feature(3, 4).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&good).to_string();
        let cases: Vec<Vec<u8>> = vec![
            good[..good.len() - 1].to_vec(),
            [good.clone(), vec![0]].concat(),
            text.replacen("version 1", "version 2", 1).into_bytes(),
            text.replacen("mode teacher", "mode other", 1).into_bytes(),
            text.replacen("groups 6", "groups 6\nextra 1", 1)
                .into_bytes(),
            text.replacen("UNIFEAT-FEATURES", "UNIFEAT-GLOBAL", 1)
                .into_bytes(),
            b"UNIFEAT-FEATURES\nversion 1\n".to_vec(),
        ];
        for (i, bytes) in cases.iter().enumerate() {
            assert!(
                matches!(FeatureFile::from_bytes(bytes), Err(Error::Format(_))),
                "case {i}"
            );
        }
    }

    #[test]
    fn global_file_requires_unit_norm() {
        let bad = GlobalDescFile {
            image_id: "a".into(),
            vector: Array1::from_vec(vec![1.0, 1.0]),
        };
        assert!(bad.to_bytes().is_err());
        let mut bytes = GlobalDescFile {
            image_id: "a".into(),
            vector: Array1::from_vec(vec![0.6, 0.8]),
        }
        .to_bytes()
        .unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&0.9f32.to_le_bytes());
        assert!(matches!(
            GlobalDescFile::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn index_rejects_dimension_drift() {
        let dir = tempfile::tempdir().unwrap();
        for (id, v) in [("a", vec![1.0, 0.0]), ("b", vec![0.0, 0.0, 1.0])] {
            GlobalDescFile {
                image_id: id.into(),
                vector: Array1::from_vec(v),
            }
            .write(&dir.path().join(index_file_name(id)))
            .unwrap();
        }
        assert!(matches!(load_index(dir.path()), Err(Error::Dimension(_))));
    }

    #[test]
    fn index_file_names_are_sanitized() {
        assert_eq!(index_file_name("a/b c.png"), "a_b_c.png.gdesc");
    }

    proptest! {
        #[test]
        fn feature_round_trip_is_bitwise(
            n in 0usize..6,
            d in 1usize..9,
            bits in proptest::collection::vec(any::<u32>(), 60),
            stride in 0.5f64..64.0,
        ) {
            let mut f = feature(n, d);
            f.stride = stride;
            f.mode = ExtractionMode::Ss;
            for (v, b) in f.keypoints.iter_mut().chain(f.descriptors.iter_mut()).zip(bits.iter().cycle()) {
                *v = f32::from_bits(*b);
            }
            let back = FeatureFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            let as_bits = |a: &Array2<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(as_bits(&back.keypoints), as_bits(&f.keypoints));
            prop_assert_eq!(as_bits(&back.descriptors), as_bits(&f.descriptors));
            prop_assert_eq!(back.stride, f.stride);
            prop_assert_eq!(back.mode, f.mode);
        }

        #[test]
        fn global_round_trip_is_bitwise(raw in proptest::collection::vec(-1.0f32..1.0, 1..64), id in "[a-z0-9_./]{1,12}") {
            prop_assume!(raw.iter().any(|v| v.abs() > 1e-3));
            let g = GlobalDescriptor::from_vector(Array1::from_vec(raw.clone()));
            let norm = g.vector.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            let unit = g.vector.mapv(|v| (f64::from(v) / norm) as f32);
            let f = GlobalDescFile { image_id: id, vector: unit };
            let back = GlobalDescFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back.image_id, &f.image_id);
            let a: Vec<u32> = back.vector.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = f.vector.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
