//! Directory-per-class PNG datasets and a procedural generator for
//! desk-scale experiments.
//!
//! Layout: `root/<class name>/<file>.png`. Classes are indexed in sorted
//! name order; sample ids are `<class name>/<file name>`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{Image, ImageSample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Decoded images with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by label. Unlabeled samples are skipped.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(l) = s.label {
                if l < out.len() {
                    out[l].push(i);
                }
            }
        }
        out
    }

    /// Samples with one label, keeping the class table.
    pub fn filter_class(&self, label: usize) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| s.label == Some(label))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub path: String,
    pub reason: String,
}

/// What [`ingest`] found under a root directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
    pub rejects: Vec<Reject>,
    /// SHA-256 over every accepted file's relative path and bytes.
    pub checksum: String,
}

impl DatasetManifest {
    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Image::new(h as usize, w as usize, data).map_err(|e| e.to_string())
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            what: "png",
            detail: e.to_string(),
        })?;
    Ok(out.into_inner())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Scans `root`, decodes every PNG and validates its size against
/// `min_side`. Files that fail are reported as rejects; a class directory
/// with no usable images is a configuration error.
pub fn ingest(root: &Path, min_side: usize) -> Result<(Dataset, DatasetManifest)> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let mut hasher = Sha256::new();
    let mut class_names = Vec::new();
    let mut classes = Vec::new();
    let mut rejects = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("class directory {} is not UTF-8", dir.display())))?
            .to_string();
        let mut count = 0;
        for file in sorted_entries(dir)? {
            if !file.is_file() {
                continue;
            }
            let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let id = format!("{name}/{fname}");
            let is_png = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                rejects.push(Reject {
                    path: id,
                    reason: "unsupported format (PNG only)".into(),
                });
                continue;
            }
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            match decode_png(&bytes) {
                Err(reason) => rejects.push(Reject { path: id, reason }),
                Ok(img) if img.height() < min_side || img.width() < min_side => {
                    rejects.push(Reject {
                        path: id,
                        reason: format!(
                            "{}×{} is smaller than the {min_side}-pixel minimum",
                            img.height(),
                            img.width()
                        ),
                    });
                }
                Ok(img) => {
                    hasher.update(id.as_bytes());
                    hasher.update((bytes.len() as u64).to_le_bytes());
                    hasher.update(&bytes);
                    samples.push(ImageSample {
                        id,
                        label: Some(label),
                        image: img,
                    });
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Config(format!("class directory {name:?} has no usable images")));
        }
        class_names.push(name.clone());
        classes.push(ClassEntry { name, count });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        rejects,
        checksum: hex::encode(hasher.finalize()),
    };
    Ok((
        Dataset {
            class_names,
            samples,
        },
        manifest,
    ))
}

/// Appearance of one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub base_color: [f32; 3],
    /// Plant rows across the image width.
    pub stripe_frequency: f32,
    /// Expected blobs per 1000 pixels.
    pub blob_density: f32,
}

impl ClassTexture {
    /// Evenly spaced hues with per-class stripe and blob settings.
    pub fn for_class(index: usize, classes: usize) -> Self {
        let hue = index as f32 / classes.max(1) as f32 * 0.85;
        ClassTexture {
            base_color: hsv_to_rgb(hue, 0.75, 0.8),
            stripe_frequency: 3.0 + (index % 4) as f32 * 2.0,
            blob_density: 0.5 + (index % 3) as f32 * 0.75,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub textures: Vec<ClassTexture>,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Fraction of each class replaced by planted outliers.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            height,
            width,
            textures: (0..classes).map(|c| ClassTexture::for_class(c, classes)).collect(),
            noise: 0.03,
            outlier_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic spec needs positive sizes".into()));
        }
        if self.textures.len() != self.classes {
            return Err(Error::Config(format!(
                "{} textures for {} classes",
                self.textures.len(),
                self.classes
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config("outlier_fraction must be in [0, 1)".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn outliers_per_class(&self) -> usize {
        (self.outlier_fraction * self.per_class as f64).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierKind {
    EmptyField,
    Overexposed,
    Underexposed,
    Residue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedOutlier {
    pub id: String,
    pub class: usize,
    pub kind: OutlierKind,
}

/// Sidecar describing what the generator planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub outliers: Vec<PlantedOutlier>,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

pub fn class_dir_name(c: usize) -> String {
    format!("class_{c:02}")
}

struct Painter<'a> {
    h: usize,
    w: usize,
    px: &'a mut [f32],
}

impl Painter<'_> {
    fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.px[i..i + 3].copy_from_slice(&rgb);
    }

    fn disc(&mut self, cy: f32, cx: f32, r: f32, rgb: [f32; 3]) {
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(self.h - 1);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                if dy * dy + dx * dx <= r * r {
                    self.set(y, x, rgb);
                }
            }
        }
    }
}

fn scale_rgb(c: [f32; 3], f: f32) -> [f32; 3] {
    c.map(|v| (v * f).clamp(0.0, 1.0))
}

const SOIL: [f32; 3] = [0.45, 0.33, 0.22];

fn paint_inlier<R: Rng>(spec: &SyntheticSpec, texture: &ClassTexture, stage: usize, rng: &mut R) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    // Soil carries a tint of the class colour so that every pixel, not only
    // the plant rows, is class specific.
    let tint = std::array::from_fn(|k| 0.6 * SOIL[k] + 0.4 * texture.base_color[k]);
    let soil = scale_rgb(tint, rng.random_range(0.95..1.05));
    let mut px: Vec<f32> = (0..h * w).flat_map(|_| soil).collect();
    let mut p = Painter { h, w, px: &mut px };

    // Two growth stages: narrow young rows or wide mature rows.
    let coverage = if stage == 0 { 0.2 } else { 0.7 };
    let leaf = scale_rgb(texture.base_color, if stage == 0 { 1.1 } else { 0.75 });
    let period = w as f32 / texture.stripe_frequency;
    let phase = rng.random_range(0.0..period);
    for x in 0..w {
        let pos = ((x as f32 + phase) % period) / period;
        if pos < coverage {
            for y in 0..h {
                p.set(y, x, leaf);
            }
        }
    }
    let blobs = (texture.blob_density * (h * w) as f32 / 1000.0).round() as usize;
    let dark = scale_rgb(texture.base_color, 0.6);
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let r = rng.random_range(1.0..(h.min(w) as f32 / 12.0).max(1.5));
        p.disc(cy, cx, r, dark);
    }
    px
}

/// Degraded captures. Each kind draws its severity at random, so outliers
/// scatter widely instead of forming one tight group.
fn paint_outlier<R: Rng>(spec: &SyntheticSpec, texture: &ClassTexture, kind: OutlierKind, rng: &mut R) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let random_soil = |rng: &mut R| -> Vec<f32> {
        let tint: [f32; 3] = std::array::from_fn(|k| SOIL[k] + rng.random_range(-0.15..0.15));
        let soil = scale_rgb(tint, rng.random_range(0.6..1.4));
        (0..h * w).flat_map(|_| soil).collect()
    };
    match kind {
        OutlierKind::EmptyField => {
            let mut px = random_soil(rng);
            let mut p = Painter { h, w, px: &mut px };
            for _ in 0..rng.random_range(0..20) {
                let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
                let shade = scale_rgb(SOIL, rng.random_range(0.4..0.8));
                p.disc(cy, cx, rng.random_range(1.0..4.0), shade);
            }
            px
        }
        OutlierKind::Overexposed => {
            let f = rng.random_range(0.5..0.95);
            let stage = rng.random_range(0..2);
            paint_inlier(spec, texture, stage, rng).into_iter().map(|v| v + (1.0 - v) * f).collect()
        }
        OutlierKind::Underexposed => {
            let f = rng.random_range(0.05..0.4);
            let stage = rng.random_range(0..2);
            paint_inlier(spec, texture, stage, rng).into_iter().map(|v| v * f).collect()
        }
        OutlierKind::Residue => {
            let mut px = random_soil(rng);
            let mut p = Painter { h, w, px: &mut px };
            for _ in 0..rng.random_range(5..40) {
                let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
                let straw = [rng.random_range(0.6..1.0), rng.random_range(0.5..0.9), rng.random_range(0.2..0.6)];
                p.disc(cy, cx, rng.random_range(1.0..6.0), straw);
            }
            px
        }
    }
}

/// Generates the dataset in memory. Pixels are quantized to 8 bits so the
/// result equals what [`ingest`] reads back from [`write_synthetic`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let kinds = [
        OutlierKind::EmptyField,
        OutlierKind::Overexposed,
        OutlierKind::Underexposed,
        OutlierKind::Residue,
    ];
    let n_out = spec.outliers_per_class();
    // Outliers are spread evenly through each class: indices 0, stride, 2·stride, …
    let stride = spec.per_class.checked_div(n_out).unwrap_or(usize::MAX);
    let normal = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    let mut outliers = Vec::new();
    for c in 0..spec.classes {
        let dir = class_dir_name(c);
        for i in 0..spec.per_class {
            let mut rng = rng::stream(&[spec.seed, tag::SYNTH, c as u64, i as u64]);
            let id = format!("{dir}/img_{i:05}.png");
            let is_outlier = i % stride == 0 && i / stride < n_out;
            let mut px = if is_outlier {
                let kind = kinds[(i / stride) % kinds.len()];
                outliers.push(PlantedOutlier {
                    id: id.clone(),
                    class: c,
                    kind,
                });
                paint_outlier(spec, &spec.textures[c], kind, &mut rng)
            } else {
                paint_inlier(spec, &spec.textures[c], i % 2, &mut rng)
            };
            if spec.noise > 0.0 {
                for v in &mut px {
                    *v += normal.sample(&mut rng);
                }
            }
            for v in &mut px {
                *v = f32::from(quantize(*v)) / 255.0;
            }
            samples.push(ImageSample {
                id,
                label: Some(c),
                image: Image::new(spec.height, spec.width, px)?,
            });
        }
    }
    Ok((
        Dataset {
            class_names: (0..spec.classes).map(class_dir_name).collect(),
            samples,
        },
        GroundTruth {
            spec: spec.clone(),
            outliers,
        },
    ))
}

/// Writes PNGs and the ground-truth sidecar under `root`, then ingests it.
pub fn write_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<(DatasetManifest, GroundTruth)> {
    let (dataset, truth) = generate_synthetic(spec)?;
    for c in 0..spec.classes {
        let dir = root.join(class_dir_name(c));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in &dataset.samples {
        let path = root.join(&s.id);
        fs::write(&path, encode_png(&s.image)?).map_err(|e| Error::io(&path, e))?;
    }
    let gt_path = root.join(GROUND_TRUTH_FILE);
    let json = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    fs::write(&gt_path, json).map_err(|e| Error::io(&gt_path, e))?;
    let (_, manifest) = ingest(root, 1)?;
    Ok((manifest, truth))
}

pub fn read_ground_truth(root: &Path) -> Result<GroundTruth> {
    let path = root.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "ground truth",
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outlier_counts_are_exact() {
        let mut spec = SyntheticSpec::new(3, 100, 16, 20, 1);
        spec.outlier_fraction = 0.05;
        let (ds, gt) = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 300);
        for c in 0..3 {
            assert_eq!(gt.outliers.iter().filter(|o| o.class == c).count(), 5);
        }
        spec.outlier_fraction = 0.07;
        let (_, gt) = generate_synthetic(&spec).unwrap();
        assert_eq!(gt.outliers.len(), 3 * 7);
        spec.outlier_fraction = 0.0;
        let (_, gt) = generate_synthetic(&spec).unwrap();
        assert!(gt.outliers.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::new(2, 6, 12, 14, 9);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().0, generate_synthetic(&other).unwrap().0);
    }

    #[test]
    fn noiseless_classes_separate_by_mean_colour() {
        // Inliers only; growth stage is kept apart since it shifts coverage.
        let mut spec = SyntheticSpec::new(11, 30, 24, 38, 3);
        spec.noise = 0.0;
        spec.outlier_fraction = 0.0;
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let mean = |img: &Image| -> [f64; 3] {
            let mut m = [0.0; 3];
            for px in img.data().chunks(3) {
                for k in 0..3 {
                    m[k] += f64::from(px[k]);
                }
            }
            m.map(|v| v / (img.height() * img.width()) as f64)
        };
        let stage = |id: &str| id.trim_end_matches(".png").ends_with(['1', '3', '5', '7', '9']) as usize;
        let mut centroids = vec![[0.0f64; 3]; 22];
        for s in &ds.samples {
            let c = &mut centroids[s.label.unwrap() * 2 + stage(&s.id)];
            for (a, b) in c.iter_mut().zip(mean(&s.image)) {
                *a += b / 15.0;
            }
        }
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let m = mean(&s.image);
                let best = (0..22)
                    .min_by(|&a, &b| {
                        let d = |c: &[f64; 3]| -> f64 { c.iter().zip(&m).map(|(x, y)| (x - y).powi(2)).sum() };
                        d(&centroids[a]).total_cmp(&d(&centroids[b]))
                    })
                    .unwrap();
                best / 2 == s.label.unwrap()
            })
            .count();
        assert!(correct as f64 >= 0.95 * ds.len() as f64, "{correct}/{}", ds.len());
    }

    #[test]
    fn noiseless_inliers_are_pixel_centroid_separable() {
        let mut spec = SyntheticSpec::new(11, 30, 24, 38, 3);
        spec.noise = 0.0;
        spec.outlier_fraction = 0.0;
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let dim = 24 * 38 * 3;
        let mut centroids = vec![vec![0.0f64; dim]; 11];
        for s in &ds.samples {
            for (a, &b) in centroids[s.label.unwrap()].iter_mut().zip(s.image.data()) {
                *a += f64::from(b) / 30.0;
            }
        }
        for s in &ds.samples {
            let d = |c: &Vec<f64>| -> f64 {
                c.iter().zip(s.image.data()).map(|(x, &y)| (x - f64::from(y)).powi(2)).sum()
            };
            let best = (0..11).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            assert_eq!(Some(best), s.label, "{}", s.id);
        }
    }

    #[test]
    fn png_roundtrip_is_exact() {
        let spec = SyntheticSpec::new(1, 2, 9, 11, 5);
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let img = &ds.samples[0].image;
        let back = decode_png(&encode_png(img).unwrap()).unwrap();
        assert_eq!(&back, img);
    }
}
