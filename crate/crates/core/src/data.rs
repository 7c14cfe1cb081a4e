//! Bag files and dataset manifests.
//!
//! A bag file is `"MMB1" | u32 M | u32 D | M·D f32 features | M·2 f32
//! coordinates`, little-endian and row-major.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Event, InstanceBag, Target};
use crate::numerics::Tensor;

pub const BAG_MAGIC: &[u8; 4] = b"MMB1";
const HEADER_BYTES: usize = 12;

/// Serialises features (`M×D`) and coordinates (`M×2`), rounding to f32.
pub fn encode_bag(features: &Tensor, coords: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 || coords.shape() != [features.rows(), 2] {
        return Err(Error::dim("encode_bag", features.shape(), coords.shape()));
    }
    let (m, d) = (features.rows(), features.cols());
    let (m32, d32) = match (u32::try_from(m), u32::try_from(d)) {
        (Ok(m), Ok(d)) => (m, d),
        _ => return Err(Error::Validation(format!("bag of {m}×{d} is too large to encode"))),
    };
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * (features.len() + coords.len()));
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&m32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in features.data().iter().chain(coords.data()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses bag bytes into `(features, coords)`; `path` labels errors.
pub fn decode_bag(bytes: &[u8], path: &Path) -> Result<(Tensor, Tensor)> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_BYTES {
        return Err(format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != BAG_MAGIC {
        return Err(format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
    let (m, d) = (word(4), word(8));
    if m == 0 || d == 0 {
        return Err(format(format!("empty bag declared ({m}×{d})")));
    }
    let expected = m
        .checked_mul(d + 2)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_BYTES))
        .ok_or_else(|| format(format!("declared size {m}×{d} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let floats: Vec<f64> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let (feat, coord) = floats.split_at(m * d);
    Ok((
        Tensor::new(vec![m, d], feat.to_vec())?,
        Tensor::new(vec![m, 2], coord.to_vec())?,
    ))
}

pub fn write_bag(path: &Path, features: &Tensor, coords: &Tensor) -> Result<()> {
    fs::write(path, encode_bag(features, coords)?).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<(Tensor, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagRecord {
    pub id: String,
    pub file: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_bin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<Event>,
}

impl BagRecord {
    pub fn target(&self) -> Result<Target> {
        match (self.label, self.time_bin, self.event) {
            (Some(label), None, None) => Ok(Target::Class(label)),
            (None, Some(time_bin), Some(event)) => Ok(Target::Survival { time_bin, event }),
            _ => Err(Error::Validation(format!(
                "bag {} needs either a label or a time_bin with an event",
                self.id
            ))),
        }
    }
}

/// Dataset index. Relative file paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dim: usize,
    pub bags: Vec<BagRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.bags {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate bag id {}", r.id)));
            }
            r.target()?;
        }
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &BagRecord> {
        self.bags.iter().filter(move |r| r.split == split)
    }

    pub fn path_of(&self, record: &BagRecord) -> PathBuf {
        self.base_dir.join(&record.file)
    }

    pub fn load_bag(&self, record: &BagRecord) -> Result<InstanceBag> {
        let path = self.path_of(record);
        let (features, coords) = read_bag(&path)?;
        if features.cols() != self.dim {
            return Err(Error::Format {
                path,
                reason: format!(
                    "feature width {} but the manifest declares {}",
                    features.cols(),
                    self.dim
                ),
            });
        }
        InstanceBag::new(record.id.clone(), features, coords, record.target()?)
    }

    /// Loads every bag of `split`; an empty split is a validation error.
    pub fn load_split(&self, split: Split) -> Result<Vec<InstanceBag>> {
        let bags = self
            .records(split)
            .map(|r| self.load_bag(r))
            .collect::<Result<Vec<_>>>()?;
        if bags.is_empty() {
            return Err(Error::Validation(format!("split {split:?} has no bags")));
        }
        Ok(bags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem.mmb")
    }

    #[test]
    fn single_instance_round_trip() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let bytes = encode_bag(&f, &c).unwrap();
        assert_eq!(&bytes[..4], b"MMB1");
        assert_eq!(bytes.len(), 12 + 4 * 4);
        let (f2, c2) = decode_bag(&bytes, p()).unwrap();
        assert_eq!((f2, c2), (f, c));
    }

    #[test]
    fn random_bags_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = rng.random_range(1..40);
            let d = rng.random_range(1..12);
            let f32s = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF) as f64)
                    .collect()
            };
            let f = Tensor::new(vec![m, d], f32s(m * d, &mut rng)).unwrap();
            let c = Tensor::new(vec![m, 2], f32s(m * 2, &mut rng)).unwrap();
            let (f2, c2) = decode_bag(&encode_bag(&f, &c).unwrap(), p()).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&f2), bits(&f));
            assert_eq!(bits(&c2), bits(&c));
        }
    }

    #[test]
    fn short_payload_reports_byte_counts() {
        let f = Tensor::zeros(&[4, 3]);
        let c = Tensor::zeros(&[4, 2]);
        let mut bytes = encode_bag(&f, &c).unwrap();
        bytes[4..8].copy_from_slice(&5u32.to_le_bytes());
        match decode_bag(&bytes, p()) {
            Err(Error::Length { expected, actual, .. }) => {
                assert_eq!(expected, 12 + 5 * 5 * 4);
                assert_eq!(actual, 12 + 4 * 5 * 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode_bag(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 2])).unwrap();
        bytes[0] = b'X';
        let err = decode_bag(&bytes, p()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(decode_bag(b"MMB", p()), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 1.0]]).unwrap();
        write_bag(&dir.path().join("a.mmb"), &f, &c).unwrap();
        let manifest = Manifest {
            dim: 3,
            bags: vec![
                BagRecord {
                    id: "a".into(),
                    file: "a.mmb".into(),
                    split: Split::Train,
                    label: Some(1),
                    time_bin: None,
                    event: None,
                },
                BagRecord {
                    id: "b".into(),
                    file: "a.mmb".into(),
                    split: Split::Val,
                    label: None,
                    time_bin: Some(2),
                    event: Some(Event::Censored),
                },
            ],
            base_dir: PathBuf::new(),
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let loaded = Manifest::load(&mpath).unwrap();
        assert_eq!(loaded.bags, manifest.bags);
        let train = loaded.load_split(Split::Train).unwrap();
        assert_eq!(train[0].features, f);
        assert_eq!(train[0].target, Target::Class(1));
        assert!(matches!(loaded.load_split(Split::Test), Err(Error::Validation(_))));

        let mut dup = manifest.clone();
        dup.bags[1].id = "a".into();
        assert!(matches!(dup.validate(), Err(Error::Validation(_))));

        let mut wide = loaded.clone();
        wide.dim = 4;
        assert!(matches!(wide.load_split(Split::Train), Err(Error::Format { .. })));

        fs::write(&mpath, "{not json").unwrap();
        assert_eq!(Manifest::load(&mpath).unwrap_err().exit_code(), 3);
    }
}
