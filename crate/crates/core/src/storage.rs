//! On-disk volume format shared with other tools.
//!
//! A volume is a directory holding `meta.json` (a [`VolumeHeader`]) and
//! `data.f32`: raw little-endian IEEE-754 single precision, C-order, slowest
//! axis first `(t | c, z, y, x)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{Dims3, DynamicImage, ParametricMaps, CHANNEL_NAMES};
use crate::timegrid::FrameSchedule;

pub const MAGIC: &str = "PETKIN1";
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Dynamic,
    Maps,
    Labels,
    /// Single-channel derived volume such as a Ki map.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub magic: String,
    pub kind: VolumeKind,
    /// `(t | c, z, y, x)`
    pub dims: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<FrameSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<String>>,
    pub units: String,
    pub endianness: String,
}

impl VolumeHeader {
    pub fn dynamic(schedule: &FrameSchedule, dims: Dims3) -> Self {
        Self::base(VolumeKind::Dynamic, [schedule.len(), dims[0], dims[1], dims[2]], "kBq/mL")
            .with_schedule(schedule.clone())
    }

    pub fn maps(dims: Dims3) -> Self {
        let mut h = Self::base(VolumeKind::Maps, [4, dims[0], dims[1], dims[2]], "K1: mL/min/mL; k2, k3: 1/min; Vb: 1");
        h.channels = Some(CHANNEL_NAMES.iter().map(|s| s.to_string()).collect());
        h
    }

    pub fn labels(dims: Dims3) -> Self {
        Self::base(VolumeKind::Labels, [1, dims[0], dims[1], dims[2]], "label")
    }

    pub fn scalar(dims: Dims3, units: &str) -> Self {
        Self::base(VolumeKind::Scalar, [1, dims[0], dims[1], dims[2]], units)
    }

    fn base(kind: VolumeKind, dims: [usize; 4], units: &str) -> Self {
        Self {
            magic: MAGIC.to_string(),
            kind,
            dims,
            schedule: None,
            channels: None,
            units: units.to_string(),
            endianness: "little".to_string(),
        }
    }

    fn with_schedule(mut self, s: FrameSchedule) -> Self {
        self.schedule = Some(s);
        self
    }

    pub fn spatial(&self) -> Dims3 {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn n_values(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.magic != MAGIC {
            return Err(Error::invalid("volume header", format!("magic `{}` is not {MAGIC}", self.magic)));
        }
        if self.endianness != "little" {
            return Err(Error::invalid("volume header", format!("unsupported endianness `{}`", self.endianness)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("volume header", format!("dims must be positive, got {:?}", self.dims)));
        }
        match self.kind {
            VolumeKind::Dynamic => {
                let s = self
                    .schedule
                    .as_ref()
                    .ok_or_else(|| Error::invalid("volume header", "dynamic volume without schedule"))?;
                if s.len() != self.dims[0] {
                    return Err(Error::invalid(
                        "volume header",
                        format!("schedule has {} frames but t dim is {}", s.len(), self.dims[0]),
                    ));
                }
            }
            VolumeKind::Maps => {
                let ok = self
                    .channels
                    .as_ref()
                    .is_some_and(|c| c.iter().map(String::as_str).eq(CHANNEL_NAMES.iter().copied()));
                if !ok {
                    return Err(Error::invalid(
                        "volume header",
                        format!("maps channels must be {CHANNEL_NAMES:?}, got {:?}", self.channels),
                    ));
                }
                if self.dims[0] != 4 {
                    return Err(Error::invalid("volume header", "maps volume needs 4 channels"));
                }
            }
            VolumeKind::Labels | VolumeKind::Scalar => {
                if self.dims[0] != 1 {
                    return Err(Error::invalid("volume header", "single-channel volume needs leading dim 1"));
                }
            }
        }
        Ok(())
    }
}

pub fn write_volume(dir: impl AsRef<Path>, header: &VolumeHeader, data: &[f32]) -> Result<()> {
    let dir = dir.as_ref();
    header.validate()?;
    if data.len() != header.n_values() {
        return Err(Error::invalid(
            "volume data",
            format!("{} values for dims {:?}", data.len(), header.dims),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("volume data", "non-finite value"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(dir.join(META_FILE), header)?;
    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(DATA_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(dir: impl AsRef<Path>) -> Result<(VolumeHeader, Vec<f32>)> {
    let dir = dir.as_ref();
    let header: VolumeHeader = read_json(dir.join(META_FILE))?;
    header.validate()?;
    let path = dir.join(DATA_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = 4 * header.n_values() as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { path, expected, actual });
    }
    if actual > expected {
        return Err(Error::invalid(
            "volume data",
            format!("{}: expected {expected} bytes, found {actual}", path.display()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid("volume data", format!("{}: non-finite value at index {i}", path.display())));
    }
    Ok((header, data))
}

fn expect_kind(header: &VolumeHeader, kind: VolumeKind, dir: &Path) -> Result<()> {
    if header.kind != kind {
        return Err(Error::invalid(
            "volume",
            format!("{}: expected {kind:?} volume, found {:?}", dir.display(), header.kind),
        ));
    }
    Ok(())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn write_dynamic(dir: impl AsRef<Path>, img: &DynamicImage) -> Result<()> {
    write_volume(dir, &VolumeHeader::dynamic(img.schedule(), img.dims()), &to_f32(img.values()))
}

pub fn read_dynamic(dir: impl AsRef<Path>) -> Result<DynamicImage> {
    let dir = dir.as_ref();
    let (h, data) = read_volume(dir)?;
    expect_kind(&h, VolumeKind::Dynamic, dir)?;
    let schedule = h.schedule.clone().expect("validated dynamic header");
    DynamicImage::new(schedule, h.spatial(), to_f64(&data))
}

/// Channels only; the mask is not stored.
pub fn write_maps(dir: impl AsRef<Path>, maps: &ParametricMaps) -> Result<()> {
    let data: Vec<f32> = maps.channels().iter().flat_map(|c| to_f32(c)).collect();
    write_volume(dir, &VolumeHeader::maps(maps.dims()), &data)
}

/// The mask of the returned maps marks voxels with any non-zero channel.
pub fn read_maps(dir: impl AsRef<Path>) -> Result<ParametricMaps> {
    let dir = dir.as_ref();
    let (h, data) = read_volume(dir)?;
    expect_kind(&h, VolumeKind::Maps, dir)?;
    let n = h.dims[1] * h.dims[2] * h.dims[3];
    let ch = |c: usize| to_f64(&data[c * n..(c + 1) * n]);
    let channels = [ch(0), ch(1), ch(2), ch(3)];
    let mask = (0..n).map(|i| channels.iter().any(|c| c[i] != 0.0)).collect();
    ParametricMaps::from_channels(h.spatial(), channels, mask)
}

pub fn write_labels(dir: impl AsRef<Path>, dims: Dims3, labels: &[u32]) -> Result<()> {
    if labels.iter().any(|&l| l > (1 << 24)) {
        return Err(Error::invalid("labels", "label exceeds 2^24 and cannot be stored exactly"));
    }
    let data: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
    write_volume(dir, &VolumeHeader::labels(dims), &data)
}

pub fn read_labels(dir: impl AsRef<Path>) -> Result<(Dims3, Vec<u32>)> {
    let dir = dir.as_ref();
    let (h, data) = read_volume(dir)?;
    expect_kind(&h, VolumeKind::Labels, dir)?;
    let mut out = Vec::with_capacity(data.len());
    for v in data {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::invalid("labels", format!("{}: non-integer label {v}", dir.display())));
        }
        out.push(v as u32);
    }
    Ok((h.spatial(), out))
}

pub fn write_scalar(dir: impl AsRef<Path>, dims: Dims3, values: &[f64], units: &str) -> Result<()> {
    write_volume(dir, &VolumeHeader::scalar(dims, units), &to_f32(values))
}

pub fn read_scalar(dir: impl AsRef<Path>) -> Result<(Dims3, Vec<f64>)> {
    let dir = dir.as_ref();
    let (h, data) = read_volume(dir)?;
    expect_kind(&h, VolumeKind::Scalar, dir)?;
    Ok((h.spatial(), to_f64(&data)))
}

/// Any single-channel volume (labels or scalar) as a boolean mask of
/// non-zero voxels.
pub fn read_mask(dir: impl AsRef<Path>) -> Result<(Dims3, Vec<bool>)> {
    let dir = dir.as_ref();
    let (h, data) = read_volume(dir)?;
    if !matches!(h.kind, VolumeKind::Labels | VolumeKind::Scalar) {
        return Err(Error::invalid(
            "mask",
            format!("{}: expected a labels or scalar volume, found {:?}", dir.display(), h.kind),
        ));
    }
    Ok((h.spatial(), data.iter().map(|&v| v != 0.0).collect()))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: PathBuf::from(path),
        source,
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: PathBuf::from(path),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::KineticParams;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn tiny_dynamic_round_trip() {
        let d = tmp();
        let s = FrameSchedule::from_segments(&[(2, 10.0)]).unwrap();
        let h = VolumeHeader::dynamic(&s, [1, 1, 1]);
        let data = [1.5f32, -2.25];
        write_volume(d.path(), &h, &data).unwrap();
        let (h2, back) = read_volume(d.path()).unwrap();
        assert_eq!(h2, h);
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(fs::metadata(d.path().join(DATA_FILE)).unwrap().len(), 4 * 2);
    }

    #[test]
    fn payload_size_is_four_bytes_per_value() {
        let d = tmp();
        let maps = ParametricMaps::uniform([2, 3, 5], KineticParams::new(0.5, 0.3, 0.1, 0.05));
        write_maps(d.path(), &maps).unwrap();
        assert_eq!(fs::metadata(d.path().join(DATA_FILE)).unwrap().len(), 4 * 4 * 2 * 3 * 5);
    }

    #[test]
    fn reordered_channels_rejected() {
        let d = tmp();
        let maps = ParametricMaps::uniform([1, 1, 2], KineticParams::new(0.5, 0.3, 0.1, 0.05));
        write_maps(d.path(), &maps).unwrap();
        let mut h: VolumeHeader = read_json(d.path().join(META_FILE)).unwrap();
        h.channels = Some(["K1", "k2", "Vb", "k3"].iter().map(|s| s.to_string()).collect());
        write_json(d.path().join(META_FILE), &h).unwrap();
        assert!(read_maps(d.path()).unwrap_err().is_validation());
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let d = tmp();
        write_labels(d.path(), [2, 2, 2], &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let p = d.path().join(DATA_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..30]).unwrap();
        let err = read_labels(d.path()).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 32, actual: 30, .. }));
        let msg = err.to_string();
        assert!(msg.contains("32") && msg.contains("30"), "{msg}");
    }

    #[test]
    fn frame_count_mismatch_rejected() {
        let d = tmp();
        let s = FrameSchedule::from_segments(&[(3, 10.0)]).unwrap();
        let mut h = VolumeHeader::dynamic(&s, [1, 1, 1]);
        h.dims[0] = 2;
        assert!(h.validate().is_err());
        fs::create_dir_all(d.path()).unwrap();
        write_json(d.path().join(META_FILE), &h).unwrap();
        fs::write(d.path().join(DATA_FILE), [0u8; 8]).unwrap();
        assert!(read_volume(d.path()).unwrap_err().is_validation());
    }

    #[test]
    fn non_finite_payload_rejected() {
        let d = tmp();
        write_scalar(d.path(), [1, 1, 2], &[1.0, 2.0], "1/min").unwrap();
        let mut bytes = fs::read(d.path().join(DATA_FILE)).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(d.path().join(DATA_FILE), bytes).unwrap();
        assert!(read_scalar(d.path()).is_err());
        assert!(write_scalar(d.path(), [1, 1, 1], &[f64::INFINITY], "1/min").is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let d = tmp();
        write_scalar(d.path(), [1, 1, 1], &[1.0], "1/min").unwrap();
        let mut h: VolumeHeader = read_json(d.path().join(META_FILE)).unwrap();
        h.magic = "PETKIN0".into();
        write_json(d.path().join(META_FILE), &h).unwrap();
        assert!(read_volume(d.path()).is_err());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let d = tmp();
        write_scalar(d.path(), [1, 1, 1], &[1.0], "1/min").unwrap();
        assert!(read_maps(d.path()).is_err());
        assert_eq!(read_mask(d.path()).unwrap().1, vec![true]);
    }

    #[test]
    fn labels_round_trip() {
        let d = tmp();
        let labels = vec![0, 3, 1, 2, 0, 6];
        write_labels(d.path(), [1, 2, 3], &labels).unwrap();
        assert_eq!(read_labels(d.path()).unwrap(), ([1, 2, 3], labels));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dynamic_write_read_identity(vals in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let d = tmp();
            let s = FrameSchedule::from_segments(&[(2, 5.0), (1, 20.0)]).unwrap();
            let img = DynamicImage::new(s, [1, 2, 2], vals.iter().map(|&v| v as f64).collect()).unwrap();
            write_dynamic(d.path(), &img).unwrap();
            let back = read_dynamic(d.path()).unwrap();
            prop_assert_eq!(&back, &img);
            // read∘write: rewriting what was read reproduces the same bytes.
            let first = fs::read(d.path().join(DATA_FILE)).unwrap();
            let d2 = tmp();
            write_dynamic(d2.path(), &back).unwrap();
            prop_assert_eq!(first, fs::read(d2.path().join(DATA_FILE)).unwrap());
        }
    }
}
