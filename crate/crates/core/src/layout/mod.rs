//! Semantic layouts, saliency maps, paired samples, and their on-disk form.

pub mod netpbm;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OneHotMap, Tensor};
use netpbm::{quantize, PnmImage, PnmKind};

pub const NUM_CLASSES: usize = 12;

/// Canonical class order; the index is the on-disk pixel value.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "eyes",
    "eyebrows",
    "ears",
    "glasses",
    "lips",
    "inner-mouth",
    "hair",
    "nose",
    "skin",
    "neck",
    "cloth",
    "background",
];

pub mod class {
    pub const EYES: u8 = 0;
    pub const EYEBROWS: u8 = 1;
    pub const EARS: u8 = 2;
    pub const GLASSES: u8 = 3;
    pub const LIPS: u8 = 4;
    pub const INNER_MOUTH: u8 = 5;
    pub const HAIR: u8 = 6;
    pub const NOSE: u8 = 7;
    pub const SKIN: u8 = 8;
    pub const NECK: u8 = 9;
    pub const CLOTH: u8 = 10;
    pub const BACKGROUND: u8 = 11;
}

/// Per-pixel face-part labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticLayout {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl SemanticLayout {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(format!(
                "layout {height}x{width} given {} labels",
                classes.len()
            )));
        }
        if let Some(i) = classes.iter().position(|&c| c as usize >= NUM_CLASSES) {
            return Err(Error::data(format!(
                "class index {} at pixel ({}, {}) exceeds {}",
                classes[i],
                i % width,
                i / width,
                NUM_CLASSES - 1
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn uniform(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        counts
    }

    /// `[12, H, W]` indicator tensor.
    pub fn one_hot(&self) -> Tensor {
        let t = self.as_onehot_map().to_tensor();
        t.reshape(&[NUM_CLASSES, self.height, self.width])
            .expect("same element count")
    }

    pub fn as_onehot_map(&self) -> OneHotMap<'_> {
        OneHotMap {
            classes: &self.classes,
            height: self.height,
            width: self.width,
            num_classes: NUM_CLASSES,
        }
    }

    /// Nearest-neighbour subsampling keeping the top-left pixel of each block.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "layout {}x{} not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let classes = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.class_at(y * factor, x * factor))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            classes,
        })
    }

    pub fn to_pnm(&self) -> PnmImage {
        PnmImage {
            kind: PnmKind::Gray,
            width: self.width,
            height: self.height,
            maxval: (NUM_CLASSES - 1) as u8,
            samples: self.classes.clone(),
        }
    }

    pub fn from_pnm(img: &PnmImage) -> Result<Self> {
        if img.kind != PnmKind::Gray {
            return Err(Error::data("layout must be a P5 greymap"));
        }
        Self::new(img.height, img.width, img.samples.clone())
    }
}

/// Foreground-structure prior with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    /// Values are clamped into [0, 1]; non-finite input is rejected.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "saliency {height}x{width} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("saliency contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("validated")
    }
}

/// One identity: photo, sketch, and their priors.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: String,
    /// `[3, H, W]` in [0, 1].
    pub photo: Tensor,
    /// `[1, H, W]` in [0, 1].
    pub sketch: Tensor,
    pub saliency_photo: SaliencyMap,
    pub saliency_sketch: SaliencyMap,
    pub layout_photo: SemanticLayout,
    pub layout_sketch: SemanticLayout,
}

impl PairedSample {
    pub fn size(&self) -> usize {
        self.photo.shape()[1]
    }

    /// Checks that every component shares one square spatial size.
    pub fn validate(&self) -> Result<()> {
        let size = self.photo.shape().get(1).copied().unwrap_or(0);
        let checks = [
            ("photo", self.photo.shape() == [3, size, size]),
            ("sketch", self.sketch.shape() == [1, size, size]),
            (
                "saliency_photo",
                (self.saliency_photo.height, self.saliency_photo.width) == (size, size),
            ),
            (
                "saliency_sketch",
                (self.saliency_sketch.height, self.saliency_sketch.width) == (size, size),
            ),
            (
                "layout_photo",
                (self.layout_photo.height, self.layout_photo.width) == (size, size),
            ),
            (
                "layout_sketch",
                (self.layout_sketch.height, self.layout_sketch.width) == (size, size),
            ),
        ];
        for (what, ok) in checks {
            if !ok {
                return Err(Error::data(format!(
                    "sample {}: {what} size disagrees with photo {:?}",
                    self.id,
                    self.photo.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One line of a corpus manifest; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub photo: String,
    pub sketch: String,
    pub saliency_photo: String,
    pub saliency_sketch: String,
    pub layout_photo: String,
    pub layout_sketch: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{} line {}: {e}", path.display(), n + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("manifest entry serializes");
        buf.write_all(b"\n").expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn planar_from_pnm(img: &PnmImage, kind: PnmKind) -> Result<Tensor> {
    if img.kind != kind {
        return Err(Error::data(format!("expected {kind:?} image, found {:?}", img.kind)));
    }
    let (c, plane) = (kind.channels(), img.width * img.height);
    let scale = img.maxval as f64;
    let mut data = vec![0.0; c * plane];
    for (i, &s) in img.samples.iter().enumerate() {
        data[(i % c) * plane + i / c] = s as f64 / scale;
    }
    Tensor::new(&[c, img.height, img.width], data)
}

/// Quantizes a `[C, H, W]` tensor (C = 1 or 3) to an 8-bit Netpbm image.
pub fn tensor_to_pnm(t: &Tensor) -> Result<PnmImage> {
    let (c, h, w) = match t.shape() {
        &[c @ (1 | 3), h, w] => (c, h, w),
        s => return Err(Error::shape(format!("cannot store tensor {s:?} as netpbm"))),
    };
    let plane = h * w;
    let samples = (0..plane * c)
        .map(|i| quantize(t.data()[(i % c) * plane + i / c]))
        .collect();
    Ok(PnmImage {
        kind: if c == 1 { PnmKind::Gray } else { PnmKind::Rgb },
        width: w,
        height: h,
        maxval: 255,
        samples,
    })
}

fn saliency_from_pnm(img: &PnmImage) -> Result<SaliencyMap> {
    let t = planar_from_pnm(img, PnmKind::Gray)?;
    SaliencyMap::new(img.height, img.width, t.into_data())
}

fn saliency_to_pnm(s: &SaliencyMap) -> PnmImage {
    PnmImage {
        kind: PnmKind::Gray,
        width: s.width,
        height: s.height,
        maxval: 255,
        samples: s.values.iter().map(|&v| quantize(v)).collect(),
    }
}

pub fn load_sample(entry: &ManifestEntry, base: &Path) -> Result<PairedSample> {
    let read = |rel: &str| PnmImage::read(&base.join(rel));
    let sample = PairedSample {
        id: entry.id.clone(),
        photo: planar_from_pnm(&read(&entry.photo)?, PnmKind::Rgb)?,
        sketch: planar_from_pnm(&read(&entry.sketch)?, PnmKind::Gray)?,
        saliency_photo: saliency_from_pnm(&read(&entry.saliency_photo)?)?,
        saliency_sketch: saliency_from_pnm(&read(&entry.saliency_sketch)?)?,
        layout_photo: SemanticLayout::from_pnm(&read(&entry.layout_photo)?)
            .map_err(|e| Error::data(format!("{}: {e}", entry.layout_photo)))?,
        layout_sketch: SemanticLayout::from_pnm(&read(&entry.layout_sketch)?)
            .map_err(|e| Error::data(format!("{}: {e}", entry.layout_sketch)))?,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes the six files of a sample under `dir` and returns its manifest entry.
pub fn save_sample(sample: &PairedSample, dir: &Path) -> Result<ManifestEntry> {
    sample.validate()?;
    let id = &sample.id;
    let entry = ManifestEntry {
        id: id.clone(),
        photo: format!("{id}_photo.ppm"),
        sketch: format!("{id}_sketch.pgm"),
        saliency_photo: format!("{id}_saliency_photo.pgm"),
        saliency_sketch: format!("{id}_saliency_sketch.pgm"),
        layout_photo: format!("{id}_layout_photo.pgm"),
        layout_sketch: format!("{id}_layout_sketch.pgm"),
    };
    tensor_to_pnm(&sample.photo)?.write(&dir.join(&entry.photo))?;
    tensor_to_pnm(&sample.sketch)?.write(&dir.join(&entry.sketch))?;
    saliency_to_pnm(&sample.saliency_photo).write(&dir.join(&entry.saliency_photo))?;
    saliency_to_pnm(&sample.saliency_sketch).write(&dir.join(&entry.saliency_sketch))?;
    sample.layout_photo.to_pnm().write(&dir.join(&entry.layout_photo))?;
    sample.layout_sketch.to_pnm().write(&dir.join(&entry.layout_sketch))?;
    Ok(entry)
}

/// Loads every sample listed in a manifest.
pub fn load_corpus(manifest: &Path) -> Result<Vec<PairedSample>> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .iter()
        .map(|e| load_sample(e, &base))
        .collect()
}
