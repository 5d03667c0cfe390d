//! Data pipeline: NIfTI-1 volumes to normalized 2D slices, synthetic
//! phantoms, fold splits and the on-disk sample/manifest formats.

pub mod nifti;
pub mod phantom;
pub mod resample;
pub mod split;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::SegmentationMask;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};
use nifti::Volume;
use resample::{normalize_resize, resampled_spacing, resize_nearest, slice_volume, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl Phase {
    /// Phase from an `_ED` / `_ES` token in a volume id.
    pub fn from_id(id: &str) -> Option<Phase> {
        id.split(['_', '-', '.'])
            .find_map(|tok| match tok.to_ascii_uppercase().as_str() {
                "ED" => Some(Phase::ED),
                "ES" => Some(Phase::ES),
                _ => None,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume: String,
    pub slice: usize,
    pub phase: Option<Phase>,
}

impl Provenance {
    /// Stable sample id, `<volume>_s<slice>`.
    pub fn id(&self) -> String {
        format!("{}_s{:03}", self.volume, self.slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `1×H×W`, values in [0, 1].
    pub image: Tensor,
    pub mask: SegmentationMask,
    pub provenance: Provenance,
}

impl SliceSample {
    pub fn new(image: Tensor, mask: SegmentationMask, provenance: Provenance) -> Result<Self> {
        if image.shape() != [1, mask.height(), mask.width()] {
            return Err(Error::Data(format!(
                "image {:?} does not match {}×{} mask",
                image.shape(),
                mask.height(),
                mask.width()
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            image,
            mask,
            provenance,
        })
    }

    pub fn id(&self) -> String {
        self.provenance.id()
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut store = ParamStore::new();
        store.add("image", self.image.clone());
        let labels = self.mask.labels().iter().map(|&l| l as f64).collect();
        store.add(
            "mask",
            Tensor::new([self.mask.height(), self.mask.width()], labels).expect("mask extents"),
        );
        let meta = SampleMeta {
            provenance: self.provenance.clone(),
            classes: self.mask.classes(),
            spacing: self.mask.spacing(),
        };
        let mut out = Vec::new();
        store
            .write_to(&serde_json::to_string(&meta).expect("serializable"), &mut out)
            .expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = ParamStore::read_from(&mut &bytes[..])?;
        let meta: SampleMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Data(format!("sample metadata: {e}")))?;
        let get = |name: &str| {
            store
                .find(name)
                .map(|id| store.get(id).clone())
                .ok_or_else(|| Error::Data(format!("sample has no {name} tensor")))
        };
        let (image, mask) = (get("image")?, get("mask")?);
        let &[h, w] = mask.shape() else {
            return Err(Error::Data(format!("mask shape {:?}", mask.shape())));
        };
        let labels = mask_labels(mask.data(), meta.classes)?;
        let mut m = SegmentationMask::new(h, w, meta.classes, labels)?;
        if let Some((sr, sc)) = meta.spacing {
            m = m.with_spacing(sr, sc);
        }
        Self::new(image, m, meta.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    provenance: Provenance,
    classes: usize,
    spacing: Option<(f64, f64)>,
}

/// Converts stored label values to integers, rejecting anything that is
/// not an integer in `[0, classes)`.
pub fn mask_labels(values: &[f64], classes: usize) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < classes && classes <= 256 {
                Ok(v as u8)
            } else {
                Err(Error::Data(format!("mask label {v} outside 0..{classes}")))
            }
        })
        .collect()
}

/// Slices a paired image/mask volume into normalized samples of extents
/// `target`. Image planes are min-max normalized and bilinearly resampled,
/// mask planes resampled nearest-neighbour.
pub fn preprocess_pair(
    id: &str,
    image: &Volume,
    mask: &Volume,
    classes: usize,
    target: (usize, usize),
) -> Result<Vec<SliceSample>> {
    if image.dims != mask.dims {
        return Err(Error::Data(format!(
            "{id}: image dims {:?} vs mask dims {:?}",
            image.dims, mask.dims
        )));
    }
    let phase = Phase::from_id(id);
    let (nx, ny) = (image.nx(), image.ny());
    let spacing = (
        resampled_spacing(image.spacing.get(1).copied().unwrap_or(1.0), ny, target.0),
        resampled_spacing(image.spacing[0], nx, target.1),
    );
    slice_volume(image)
        .into_iter()
        .zip(slice_volume(mask))
        .map(|((k, img), (_, m)): ((usize, Plane), (usize, Plane))| {
            let labels = mask_labels(&m.data, classes).map_err(|e| Error::Data(format!("{id} mask: {e}")))?;
            let labels = resize_nearest(&labels, (ny, nx), target.0, target.1)?;
            SliceSample::new(
                normalize_resize(&img, target)?,
                SegmentationMask::new(target.0, target.1, classes, labels)?.with_spacing(spacing.0, spacing.1),
                Provenance {
                    volume: id.to_string(),
                    slice: k,
                    phase,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub provenance: Provenance,
}

/// Structured-text listing of a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<ManifestEntry>,
    /// Validation ids of each fold, when a split was recorded.
    #[serde(default)]
    pub folds: Vec<Vec<String>>,
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl DatasetManifest {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            samples: Vec::new(),
            folds: Vec::new(),
            skipped: Vec::new(),
        }
    }

    /// Writes `sample` under `dir/samples/` and records it.
    pub fn add_sample(&mut self, dir: &Path, sample: &SliceSample) -> Result<()> {
        let rel = PathBuf::from("samples").join(format!("{}.smp", sample.id()));
        std::fs::create_dir_all(dir.join("samples"))?;
        sample.save(dir.join(&rel))?;
        self.samples.push(ManifestEntry {
            id: sample.id(),
            path: rel,
            provenance: sample.provenance.clone(),
        });
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        Ok(std::fs::write(path, text + "\n")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Loads one sample; `base` is the manifest's directory.
    pub fn load_sample(&self, base: &Path, entry: &ManifestEntry) -> Result<SliceSample> {
        let s = SliceSample::load(base.join(&entry.path))?;
        if s.extents() != (self.height, self.width) {
            return Err(Error::Data(format!(
                "{}: extents {:?}, manifest says {}×{}",
                entry.id,
                s.extents(),
                self.height,
                self.width
            )));
        }
        Ok(s)
    }
}
