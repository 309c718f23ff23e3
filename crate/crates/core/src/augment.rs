//! The two correlated views of every image: a full-size view and a small crop
//! that is never rescaled. Random crop, horizontal/vertical flips and color
//! jitter are the only augmentations; there is no blur.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB raster, row-major `H×W×3`, channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::dim(
                "image",
                format!("{height}×{width}×3 with {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = self.clone();
        let row = self.width * 3;
        for y in 0..self.height {
            let src = (self.height - 1 - y) * row;
            out.data[y * row..(y + 1) * row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }

    /// Pixel-exact sub-window.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::dim(
                "crop",
                format!(
                    "window {height}×{width} at ({top},{left}) in {}×{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        if height > self.height || width > self.width {
            return Err(Error::dim(
                "center_crop",
                format!("{height}×{width} from {}×{}", self.height, self.width),
            ));
        }
        self.crop(
            (self.height - height) / 2,
            (self.width - width) / 2,
            height,
            width,
        )
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let (a, b, c, d) = (
                    self.pixel(y0, x0),
                    self.pixel(y0, x1),
                    self.pixel(y1, x0),
                    self.pixel(y1, x1),
                );
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - wx) + b[ch] * wx;
                    let bottom = c[ch] * (1.0 - wx) + d[ch] * wx;
                    data.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Scales so the image covers `height×width` while keeping its aspect
    /// ratio, then center-crops to exactly that size.
    pub fn fit_cover(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let scale = (height as f64 / self.height as f64).max(width as f64 / self.width as f64);
        let sh = ((self.height as f64 * scale).round() as usize).max(height);
        let sw = ((self.width as f64 * scale).round() as usize).max(width);
        self.resize(sh, sw)
            .center_crop(height, width)
            .expect("scaled image covers the target")
    }

    /// Channel-first `3×H×W` copy as `f64`, appended to `out`.
    pub fn write_chw(&self, out: &mut Vec<f64>) {
        for ch in 0..3 {
            out.extend(self.data.iter().skip(ch).step_by(3).map(|&v| f64::from(v)));
        }
    }
}

/// An input image with its optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: Option<usize>,
    pub image: Image,
}

/// The full view `X_i` and crop view `X_j` derived from one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub full: Image,
    pub crop: Image,
    pub source_id: String,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub full_height: usize,
    pub full_width: usize,
    pub color_strength: f64,
    pub flip_horizontal: f64,
    pub flip_vertical: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 32,
            full_height: 120,
            full_width: 190,
            color_strength: 0.5,
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.full_height.min(self.full_width) {
            return Err(Error::Config(format!(
                "crop_size {} must be in [1, min({}, {})]",
                self.crop_size, self.full_height, self.full_width
            )));
        }
        for (name, p) in [
            ("color_strength", self.color_strength),
            ("flip_horizontal", self.flip_horizontal),
            ("flip_vertical", self.flip_vertical),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn random_flip<R: Rng + ?Sized>(img: &Image, p_h: f64, p_v: f64, rng: &mut R) -> Image {
    let mut out = if rng.random_bool(p_h) {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    if rng.random_bool(p_v) {
        out = out.flip_vertical();
    }
    out
}

/// Brightness, contrast and saturation jitter. Each factor is drawn from
/// `[1 − 0.8·s, 1 + 0.8·s]`; the result is clamped to `[0, 1]`.
pub fn color_distort<R: Rng + ?Sized>(img: &Image, strength: f64, rng: &mut R) -> Image {
    if strength <= 0.0 {
        return img.clone();
    }
    let spread = 0.8 * strength;
    let mut factor = || 1.0 + rng.random_range(-spread..=spread) as f32;
    let (brightness, contrast, saturation) = (factor(), factor(), factor());

    let mut data: Vec<f32> = img.data.iter().map(|v| (v * brightness).clamp(0.0, 1.0)).collect();

    let count = (img.height * img.width) as f32;
    let mean_gray = data.chunks(3).map(gray).sum::<f32>() / count;
    for v in &mut data {
        *v = ((*v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0);
    }

    for px in data.chunks_mut(3) {
        let g = gray(px);
        for v in px {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    Image {
        height: img.height,
        width: img.width,
        data,
    }
}

fn gray(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn check_source(sample: &ImageSample, cfg: &AugmentConfig) -> Result<()> {
    let (h, w) = (sample.image.height, sample.image.width);
    if h < cfg.crop_size || w < cfg.crop_size {
        return Err(Error::Ingestion {
            path: sample.id.clone().into(),
            reason: format!("{h}×{w} image is smaller than crop size {}", cfg.crop_size),
        });
    }
    Ok(())
}

/// Draws the crop window's top-left corner uniformly over valid offsets.
pub fn crop_offset<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    crop: usize,
    rng: &mut R,
) -> (usize, usize) {
    (
        rng.random_range(0..=height - crop),
        rng.random_range(0..=width - crop),
    )
}

pub fn make_view_pair<R: Rng + ?Sized>(
    sample: &ImageSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    check_source(sample, cfg)?;
    let src = &sample.image;

    let full = src.fit_cover(cfg.full_height, cfg.full_width);
    let full = random_flip(&full, cfg.flip_horizontal, cfg.flip_vertical, rng);
    let full = color_distort(&full, cfg.color_strength, rng);

    let (top, left) = crop_offset(src.height, src.width, cfg.crop_size, rng);
    let crop = src.crop(top, left, cfg.crop_size, cfg.crop_size)?;
    let crop = random_flip(&crop, cfg.flip_horizontal, cfg.flip_vertical, rng);
    let crop = color_distort(&crop, cfg.color_strength, rng);

    Ok(ViewPair {
        full,
        crop,
        source_id: sample.id.clone(),
        label: sample.label,
    })
}

/// Augmentation-free views used for embedding: the full-view geometry and the
/// centered crop window.
pub fn center_views(sample: &ImageSample, cfg: &AugmentConfig) -> Result<ViewPair> {
    check_source(sample, cfg)?;
    Ok(ViewPair {
        full: sample.image.fit_cover(cfg.full_height, cfg.full_width),
        crop: sample.image.center_crop(cfg.crop_size, cfg.crop_size)?,
        source_id: sample.id.clone(),
        label: sample.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        Image::new(h, w, data).unwrap()
    }

    fn sorted(img: &Image) -> Vec<u32> {
        let mut v: Vec<u32> = img.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = noise(3, 4, 0);
        assert_eq!(random_flip(&img, 0.0, 0.0, &mut rng), img);

        let a = [0.1, 0.2, 0.3];
        let b = [0.7, 0.8, 0.9];
        let pair = Image::new(1, 2, [a, b].concat()).unwrap();
        let flipped = random_flip(&pair, 1.0, 0.0, &mut rng);
        assert_eq!(flipped.pixel(0, 0), b);
        assert_eq!(flipped.pixel(0, 1), a);

        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        let both = random_flip(&img, 1.0, 1.0, &mut rng);
        assert_eq!(sorted(&both), sorted(&img));
    }

    #[test]
    fn color_distortion_contract() {
        let img = noise(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(color_distort(&img, 0.0, &mut rng), img);
        for s in [0.3, 1.0] {
            let out = color_distort(&img, s, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let a = color_distort(&img, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = color_distort(&img, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, img);
    }

    fn identity_cfg() -> AugmentConfig {
        AugmentConfig {
            color_strength: 0.0,
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn identity_pipeline_keeps_full_view_and_sub_window() {
        let cfg = identity_cfg();
        let img = noise(120, 190, 4);
        let sample = ImageSample {
            id: "s".into(),
            label: Some(2),
            image: img.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pair = make_view_pair(&sample, &cfg, &mut rng).unwrap();
            assert_eq!(pair.full, img);
            assert_eq!((pair.crop.height(), pair.crop.width()), (32, 32));
            assert_eq!(pair.label, Some(2));
            // locate the window: it must match the source exactly somewhere
            let found = (0..=88).any(|t| {
                (0..=158).any(|l| img.crop(t, l, 32, 32).unwrap() == pair.crop)
            });
            assert!(found);
        }
    }

    #[test]
    fn crop_view_is_32_square_by_default() {
        let cfg = AugmentConfig::default();
        let sample = ImageSample {
            id: "s".into(),
            label: None,
            image: noise(60, 70, 6),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = make_view_pair(&sample, &cfg, &mut rng).unwrap();
        assert_eq!((pair.crop.height(), pair.crop.width()), (32, 32));
        assert_eq!((pair.full.height(), pair.full.width()), (120, 190));
    }

    #[test]
    fn undersized_source_is_an_ingestion_error() {
        let sample = ImageSample {
            id: "tiny".into(),
            label: None,
            image: noise(16, 40, 6),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            make_view_pair(&sample, &AugmentConfig::default(), &mut rng),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 5×6 source, crop 3: 3 × 4 = 12 offsets. Chi-square with 11 dof; a
        // 5σ band on each cell count as well.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = [[0usize; 4]; 3];
        for _ in 0..draws {
            let (t, l) = crop_offset(5, 6, 3, &mut rng);
            counts[t][l] += 1;
        }
        let p = 1.0 / 12.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for row in counts {
            for c in row {
                assert!((c as f64 - expected).abs() < 5.0 * sigma);
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        // 99.9th percentile of chi-square(11) is 31.26
        assert!(chi2 < 31.26, "chi2 = {chi2}");
    }

    #[test]
    fn fit_cover_produces_target_geometry() {
        let img = noise(50, 50, 8);
        let out = img.fit_cover(120, 190);
        assert_eq!((out.height(), out.width()), (120, 190));
        let same = noise(120, 190, 8);
        assert_eq!(same.fit_cover(120, 190), same);
    }

    #[test]
    fn center_views_are_deterministic() {
        let sample = ImageSample {
            id: "c".into(),
            label: Some(0),
            image: noise(40, 48, 2),
        };
        let cfg = AugmentConfig {
            full_height: 40,
            full_width: 48,
            crop_size: 16,
            ..AugmentConfig::default()
        };
        let v = center_views(&sample, &cfg).unwrap();
        assert_eq!(v, center_views(&sample, &cfg).unwrap());
        assert_eq!(v.full, sample.image);
        assert_eq!(v.crop, sample.image.crop(12, 16, 16, 16).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            crop_size: 200,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            color_strength: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
