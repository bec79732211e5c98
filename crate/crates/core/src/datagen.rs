//! Procedural paired face corpus with exact part layouts.
//!
//! Every sample is a set of elliptical parts painted back to front. One
//! rasterizer produces the class map; photo, sketch, and saliency are all
//! derived from that map, so the layout files are exact by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    class, read_manifest, save_sample, write_manifest, ManifestEntry, PairedSample, SaliencyMap,
    SemanticLayout, NUM_CLASSES,
};
use crate::numerics::Tensor;
use crate::workers;

pub const SUPPORTED_SIZES: [usize; 4] = [32, 64, 128, 256];
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Back-to-front paint order.
pub const PAINT_ORDER: [u8; NUM_CLASSES] = [
    class::BACKGROUND,
    class::CLOTH,
    class::NECK,
    class::SKIN,
    class::HAIR,
    class::EARS,
    class::NOSE,
    class::LIPS,
    class::INNER_MOUTH,
    class::EYEBROWS,
    class::EYES,
    class::GLASSES,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    /// Photo and sketch share one layout.
    #[default]
    Aligned,
    /// The sketch side is drawn from a smoothly warped layout.
    Deformed,
}

impl FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(GenMode::Aligned),
            "deformed" => Ok(GenMode::Deformed),
            other => Err(Error::config("mode", format!("expected aligned|deformed, got {other:?}"))),
        }
    }
}

impl fmt::Display for GenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenMode::Aligned => "aligned",
            GenMode::Deformed => "deformed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub mode: GenMode,
    pub glasses_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 32,
            size: 64,
            seed: 7,
            mode: GenMode::Aligned,
            glasses_fraction: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if !SUPPORTED_SIZES.contains(&self.size) {
            return Err(Error::config("size", format!("{} not in {SUPPORTED_SIZES:?}", self.size)));
        }
        if !(0.0..=1.0).contains(&self.glasses_fraction) {
            return Err(Error::config("glasses_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Rotated ellipse in unit canvas coordinates, optionally hollow or clipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub rotation: f64,
    /// Inner radius fraction for a ring; 0 for a solid ellipse.
    pub hollow: f64,
    /// Only points with `y <= clip_below` are covered.
    pub clip_below: f64,
}

impl Ellipse {
    fn solid(cx: f64, cy: f64, rx: f64, ry: f64, rotation: f64) -> Self {
        Self {
            cx,
            cy,
            rx,
            ry,
            rotation,
            hollow: 0.0,
            clip_below: f64::INFINITY,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        if y > self.clip_below {
            return false;
        }
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r2 = u * u + v * v;
        r2 <= 1.0 && r2 >= self.hollow * self.hollow
    }

    /// A point guaranteed to lie on the shape.
    fn anchor(&self) -> (f64, f64) {
        if self.hollow > 0.0 {
            let r = 0.5 * (1.0 + self.hollow);
            let (s, c) = self.rotation.sin_cos();
            (self.cx + c * r * self.rx, self.cy + s * r * self.rx)
        } else {
            (self.cx, self.cy.min(self.clip_below))
        }
    }
}

/// All random choices behind one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: u64,
    /// Parts in paint order.
    pub parts: Vec<(u8, Ellipse)>,
    /// RGB per class.
    pub palette: [[f64; 3]; NUM_CLASSES],
    /// Brightness slope across the canvas (direction angle, strength).
    pub lighting: (f64, f64),
    pub noise_sigma: f64,
    /// Peak warp displacement in pixels; 0 in aligned mode.
    pub deformation: f64,
    pub warp_phase: [f64; 4],
}

impl SceneSpec {
    pub fn sample(cfg: &CorpusConfig, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);
        let mut jit = |r: f64| rng.random_range(-r..=r);
        let (fx, fy) = (0.5 + jit(0.03), 0.5 + jit(0.03));
        let sc = 1.0 + jit(0.08);
        let eye_dx = 0.11 * sc + jit(0.01);
        let eye_y = fy - 0.04 * sc + jit(0.01);
        let tilt = jit(0.08);
        let brow_tilt = jit(0.15);

        let mut parts = vec![
            (class::CLOTH, Ellipse::solid(0.5 + jit(0.02), 0.99, 0.42 + jit(0.04), 0.2 + jit(0.02), 0.0)),
            (class::NECK, Ellipse::solid(fx, fy + 0.32 * sc, 0.11 * sc, 0.16 * sc, 0.0)),
            (class::SKIN, Ellipse::solid(fx, fy, 0.25 * sc + jit(0.01), 0.31 * sc + jit(0.01), tilt)),
            (
                class::HAIR,
                Ellipse {
                    clip_below: fy - 0.15 * sc + jit(0.03),
                    ..Ellipse::solid(fx, fy - 0.08 * sc, 0.3 * sc, 0.33 * sc, tilt)
                },
            ),
        ];
        for side in [-1.0, 1.0] {
            parts.push((class::EARS, Ellipse::solid(fx + side * 0.26 * sc, fy + 0.02, 0.04 * sc, 0.08 * sc, 0.0)));
        }
        parts.push((class::NOSE, Ellipse::solid(fx + jit(0.01), fy + 0.07 * sc, 0.045 * sc, 0.08 * sc, tilt)));
        let mouth_y = fy + 0.19 * sc + jit(0.01);
        parts.push((class::LIPS, Ellipse::solid(fx, mouth_y, 0.1 * sc + jit(0.01), 0.04 * sc, tilt)));
        parts.push((class::INNER_MOUTH, Ellipse::solid(fx, mouth_y, 0.06 * sc, 0.015 * sc, tilt)));
        for side in [-1.0, 1.0] {
            parts.push((
                class::EYEBROWS,
                Ellipse::solid(fx + side * eye_dx, eye_y - 0.075 * sc, 0.07 * sc, 0.022 * sc, side * brow_tilt),
            ));
        }
        for side in [-1.0, 1.0] {
            parts.push((class::EYES, Ellipse::solid(fx + side * eye_dx, eye_y, 0.055 * sc, 0.03 * sc, tilt)));
        }
        if rng.random::<f64>() < cfg.glasses_fraction {
            for side in [-1.0, 1.0] {
                parts.push((
                    class::GLASSES,
                    Ellipse {
                        hollow: 0.72,
                        ..Ellipse::solid(fx + side * eye_dx, eye_y, 0.095 * sc, 0.07 * sc, tilt)
                    },
                ));
            }
        }

        let mut palette = [[0.0; 3]; NUM_CLASSES];
        let mut tone = |base: [f64; 3], spread: f64| base.map(|v: f64| (v + rng.random_range(-spread..=spread)).clamp(0.0, 1.0));
        let skin = tone([0.85, 0.68, 0.56], 0.1);
        palette[class::SKIN as usize] = skin;
        palette[class::EARS as usize] = skin.map(|v| v * 0.93);
        palette[class::NOSE as usize] = skin.map(|v| v * 0.9);
        palette[class::NECK as usize] = skin.map(|v| v * 0.85);
        palette[class::HAIR as usize] = tone([0.2, 0.14, 0.1], 0.1);
        palette[class::EYEBROWS as usize] = palette[class::HAIR as usize].map(|v| v * 0.8);
        palette[class::EYES as usize] = tone([0.25, 0.3, 0.35], 0.1);
        palette[class::GLASSES as usize] = tone([0.1, 0.1, 0.12], 0.05);
        palette[class::LIPS as usize] = tone([0.75, 0.35, 0.35], 0.08);
        palette[class::INNER_MOUTH as usize] = tone([0.35, 0.08, 0.1], 0.05);
        palette[class::CLOTH as usize] = tone([0.3, 0.4, 0.6], 0.25);
        palette[class::BACKGROUND as usize] = tone([0.75, 0.78, 0.8], 0.15);

        let lighting = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.05..0.25));
        let noise_sigma = rng.random_range(0.01..0.03);
        let deformation = match cfg.mode {
            GenMode::Aligned => 0.0,
            GenMode::Deformed => rng.random_range(0.5..1.0) * 4.0 * cfg.size as f64 / 64.0,
        };
        let warp_phase = [(); 4].map(|_| rng.random_range(0.0..2.0 * PI));
        Self {
            seed: cfg.seed,
            index,
            parts,
            palette,
            lighting,
            noise_sigma,
            deformation,
            warp_phase,
        }
    }

    /// Warp displacement at a pixel, in pixels; magnitude per axis ≤ `deformation`.
    fn warp(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        if self.deformation == 0.0 {
            return (0.0, 0.0);
        }
        let (u, v) = (x / size as f64, y / size as f64);
        let p = self.warp_phase;
        let dx = (2.0 * PI * (0.9 * u + 0.6 * v) + p[0]).sin() * (2.0 * PI * 0.5 * v + p[1]).cos();
        let dy = (2.0 * PI * (0.7 * v - 0.5 * u) + p[2]).sin() * (2.0 * PI * 0.6 * u + p[3]).cos();
        (self.deformation * dx, self.deformation * dy)
    }

    /// Class map; `warped` samples geometry through the deformation field.
    pub fn rasterize(&self, size: usize, warped: bool) -> SemanticLayout {
        let mut classes = vec![class::BACKGROUND; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = if warped { self.warp(px, py, size) } else { (0.0, 0.0) };
                let (u, v) = ((px + dx) / size as f64, (py + dy) / size as f64);
                for &(c, ref e) in &self.parts {
                    if e.contains(u, v) {
                        classes[y * size + x] = c;
                    }
                }
            }
        }
        // Parts too thin to cover a pixel centre get their anchor pixel.
        let mut present = [false; NUM_CLASSES];
        for &c in &classes {
            present[c as usize] = true;
        }
        for &(c, ref e) in &self.parts {
            if !present[c as usize] {
                let (ax, ay) = e.anchor();
                let to_px = |t: f64| ((t * size as f64) as usize).min(size - 1);
                classes[to_px(ay) * size + to_px(ax)] = c;
                present[c as usize] = true;
            }
        }
        SemanticLayout::new(size, size, classes).expect("classes come from the fixed part list")
    }
}

fn quantized(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn render_photo(spec: &SceneSpec, layout: &SemanticLayout, rng: &mut ChaCha8Rng) -> Tensor {
    let size = layout.width();
    let plane = size * size;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
    let (angle, strength) = spec.lighting;
    let (ls, lc) = angle.sin_cos();
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64 - 0.5, (y as f64 + 0.5) / size as f64 - 0.5);
            let light = 1.0 + strength * (lc * u + ls * v) - 0.15 * (u * u + v * v);
            let color = spec.palette[layout.class_at(y, x) as usize];
            for k in 0..3 {
                data[k * plane + y * size + x] = quantized(color[k] * light + noise.sample(rng));
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("finite")
}

fn render_sketch(spec: &SceneSpec, layout: &SemanticLayout) -> Tensor {
    let size = layout.width();
    let stroke = (size / 64).max(1);
    let mut data = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = layout.class_at(y, x);
            let mut edge = false;
            for dy in -(stroke as isize)..=stroke as isize {
                for dx in -(stroke as isize)..=stroke as isize {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if (dy != 0 || dx != 0)
                        && (0..size as isize).contains(&ny)
                        && (0..size as isize).contains(&nx)
                        && dy.abs() + dx.abs() <= stroke as isize
                        && layout.class_at(ny as usize, nx as usize) != c
                    {
                        edge = true;
                    }
                }
            }
            let fill = 0.55 + 0.45 * luminance(spec.palette[c as usize]);
            let hatch = match c {
                class::HAIR if (x + y) % 3 == 0 => 0.35,
                class::EYEBROWS | class::EYES | class::GLASSES => 0.45,
                class::CLOTH if (x + 2 * y) % 5 == 0 => 0.2,
                _ => 0.0,
            };
            let v = if c == class::BACKGROUND {
                0.97
            } else if edge {
                0.12
            } else {
                fill - hatch
            };
            data[y * size + x] = quantized(v);
        }
    }
    Tensor::new(&[1, size, size], data).expect("finite")
}

/// Foreground indicator blurred by a separable box filter applied twice.
fn render_saliency(layout: &SemanticLayout) -> SaliencyMap {
    let size = layout.width();
    let radius = (size / 32).max(1);
    let mut v: Vec<f64> = layout
        .classes()
        .iter()
        .map(|&c| if c == class::BACKGROUND { 0.0 } else { 1.0 })
        .collect();
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    if (0..size as isize).contains(&yy) && (0..size as isize).contains(&xx) {
                        acc += src[yy as usize * size + xx as usize];
                    }
                }
                out[y * size + x] = acc / (2 * radius + 1) as f64;
            }
        }
        out
    };
    for _ in 0..2 {
        v = blur(&blur(&v, true), false);
    }
    SaliencyMap::new(size, size, v.into_iter().map(quantized).collect()).expect("values in [0, 1]")
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates sample `index` of the corpus described by `cfg`.
pub fn generate_sample(cfg: &CorpusConfig, index: usize) -> Result<PairedSample> {
    cfg.validate()?;
    let spec = SceneSpec::sample(cfg, index as u64);
    let layout_photo = spec.rasterize(cfg.size, false);
    let layout_sketch = match cfg.mode {
        GenMode::Aligned => layout_photo.clone(),
        GenMode::Deformed => spec.rasterize(cfg.size, true),
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    noise_rng.set_stream(index as u64);
    let sample = PairedSample {
        id: sample_id(index),
        photo: render_photo(&spec, &layout_photo, &mut noise_rng),
        sketch: render_sketch(&spec, &layout_sketch),
        saliency_photo: render_saliency(&layout_photo),
        saliency_sketch: render_saliency(&layout_sketch),
        layout_photo,
        layout_sketch,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes `cfg.n` samples and `manifest.jsonl` under `out`.
pub fn generate_corpus(cfg: &CorpusConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let indices: Vec<usize> = (0..cfg.n).collect();
    let entries = workers::map_ordered(&indices, workers::worker_count(), |_, &i| {
        generate_sample(cfg, i).and_then(|s| save_sample(&s, out))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    write_manifest(&out.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

/// Class and size counts over a manifest's photo-side layouts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    /// Fraction of all counted pixels carrying each class.
    pub class_pixel_frequency: [f64; NUM_CLASSES],
    /// Number of samples in which each class appears.
    pub class_presence: [usize; NUM_CLASSES],
    /// `"HxW"` to count.
    pub sizes: BTreeMap<String, usize>,
    /// One line per entry that could not be read.
    pub errors: Vec<String>,
}

pub fn corpus_stats(manifest: &Path) -> Result<CorpusStats> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = read_manifest(manifest)?;
    let mut stats = CorpusStats::default();
    let mut pixels = [0usize; NUM_CLASSES];
    for entry in &entries {
        let path = base.join(&entry.layout_photo);
        let layout = crate::layout::netpbm::PnmImage::read(&path).and_then(|img| SemanticLayout::from_pnm(&img));
        match layout {
            Ok(layout) => {
                stats.samples += 1;
                *stats.sizes.entry(format!("{}x{}", layout.height(), layout.width())).or_default() += 1;
                for (c, &n) in layout.counts().iter().enumerate() {
                    pixels[c] += n;
                    stats.class_presence[c] += usize::from(n > 0);
                }
            }
            Err(e) => stats.errors.push(format!("{}: {e}", entry.id)),
        }
    }
    let total: usize = pixels.iter().sum();
    if total > 0 {
        for c in 0..NUM_CLASSES {
            stats.class_pixel_frequency[c] = pixels[c] as f64 / total as f64;
        }
    }
    Ok(stats)
}
