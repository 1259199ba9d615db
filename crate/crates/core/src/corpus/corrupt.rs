//! ImageNet-C style corruptions: additive Gaussian noise, disk-kernel
//! defocus blur and pixelation, each at five severities.

use super::{CorpusError, ImageSample, Result, MAX_SEVERITY};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    DefocusBlur,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CorpusError::InvalidParameter(format!("unknown corruption kind {s:?}")))
    }
}

/// A corruption kind at a severity in 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=MAX_SEVERITY).contains(&severity) {
            return Err(CorpusError::InvalidSeverity(severity));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

/// Per-severity corruption parameters, index 0 = severity 1.
///
/// Noise sigma is on the [0, 1] intensity scale; pixelate entries are the
/// fraction of the original resolution kept before upsampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityTable {
    pub gaussian_sigma: [f64; 5],
    pub defocus_radius: [u32; 5],
    pub pixelate_fraction: [f64; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        SeverityTable {
            gaussian_sigma: [0.08, 0.12, 0.18, 0.26, 0.38],
            defocus_radius: [3, 4, 6, 8, 10],
            pixelate_fraction: [0.6, 0.5, 0.4, 0.3, 0.25],
        }
    }
}

impl SeverityTable {
    fn check(severity: u8) -> Result<Option<usize>> {
        match severity {
            0 => Ok(None),
            s if s <= MAX_SEVERITY => Ok(Some(s as usize - 1)),
            s => Err(CorpusError::InvalidSeverity(s)),
        }
    }

    /// Sigma for a severity; severity 0 maps to 0.
    pub fn sigma(&self, severity: u8) -> Result<f64> {
        Ok(Self::check(severity)?.map_or(0.0, |i| self.gaussian_sigma[i]))
    }

    /// Disk radius for a severity; severity 0 maps to 0.
    pub fn radius(&self, severity: u8) -> Result<u32> {
        Ok(Self::check(severity)?.map_or(0, |i| self.defocus_radius[i]))
    }

    /// Resolution fraction for a severity; severity 0 maps to 1.
    pub fn pixelate(&self, severity: u8) -> Result<f64> {
        Ok(Self::check(severity)?.map_or(1.0, |i| self.pixelate_fraction[i]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussian_sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(CorpusError::InvalidParameter("gaussian sigma must be finite and >= 0".into()));
        }
        if self.pixelate_fraction.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(CorpusError::InvalidParameter("pixelate fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn ensure_nonempty(img: &RgbImage) -> Result<()> {
    if img.width() == 0 || img.height() == 0 {
        return Err(CorpusError::EmptyImage);
    }
    Ok(())
}

/// Additive zero-mean Gaussian noise with standard deviation `sigma` on the
/// [0, 1] scale, clipped to the valid range. Deterministic given `seed`.
pub fn gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    ensure_nonempty(img)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(CorpusError::InvalidParameter(format!("sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for c in out.iter_mut() {
        let v = f64::from(*c) / 255.0 + normal.sample(&mut rng);
        *c = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(out)
}

/// A square, normalized convolution kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub radius: u32,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        2 * self.radius as usize + 1
    }

    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        let r = self.radius as i64;
        let size = self.size() as i64;
        self.weights[((dy + r) * size + (dx + r)) as usize]
    }
}

/// Aliased disk of the given radius (offsets with dx^2 + dy^2 <= r^2),
/// normalized to sum 1. Radius 0 is the identity kernel.
pub fn disk_kernel(radius: u32) -> Kernel {
    let r = radius as i64;
    let size = (2 * r + 1) as usize;
    let mut weights = vec![0.0; size * size];
    let mut count = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                weights[((dy + r) as usize) * size + (dx + r) as usize] = 1.0;
                count += 1;
            }
        }
    }
    for w in &mut weights {
        *w /= count as f64;
    }
    Kernel { radius, weights }
}

fn reflect101(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i.rem_euclid(period);
    (if m >= n { period - m } else { m }) as usize
}

/// Convolves a single-channel plane with `kernel`, reflecting at the
/// borders (`dcb|abcd|cba`).
pub fn convolve_plane(plane: &[f64], width: u32, height: u32, kernel: &Kernel) -> Vec<f64> {
    let (w, h) = (width as i64, height as i64);
    assert_eq!(plane.len(), (w * h) as usize, "plane size mismatch");
    let r = kernel.radius as i64;
    let taps: Vec<(i64, i64, f64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .map(|(dx, dy)| (dx, dy, kernel.at(dx, dy)))
        .filter(|&(_, _, k)| k != 0.0)
        .collect();
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &(dx, dy, k) in &taps {
                let sx = reflect101(x + dx, w);
                let sy = reflect101(y + dy, h);
                acc += k * plane[sy * w as usize + sx];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Defocus blur: per-channel convolution with a pure disk kernel.
pub fn defocus_blur(img: &RgbImage, radius: u32) -> Result<RgbImage> {
    ensure_nonempty(img)?;
    if radius == 0 {
        return Ok(img.clone());
    }
    let kernel = disk_kernel(radius);
    let (w, h) = img.dimensions();
    let mut out = RgbImage::new(w, h);
    for ch in 0..3 {
        let plane: Vec<f64> = img.pixels().map(|p| f64::from(p[ch])).collect();
        let blurred = convolve_plane(&plane, w, h, &kernel);
        for (p, v) in out.pixels_mut().zip(blurred) {
            p[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Pixelates by averaging over the rectangular cells delimited by `xcuts`
/// and `ycuts` (each starting at 0 and ending at the image size), then
/// filling every pixel with the mean of its cell.
fn pixelate_cells(img: &RgbImage, xcuts: &[u32], ycuts: &[u32]) -> RgbImage {
    let mut out = RgbImage::new(img.width(), img.height());
    for ys in ycuts.windows(2) {
        for xs in xcuts.windows(2) {
            let mut sum = [0u64; 3];
            for y in ys[0]..ys[1] {
                for x in xs[0]..xs[1] {
                    let p = img.get_pixel(x, y);
                    for c in 0..3 {
                        sum[c] += u64::from(p[c]);
                    }
                }
            }
            let n = u64::from((xs[1] - xs[0]) * (ys[1] - ys[0]));
            let mean = Rgb(sum.map(|s| ((s as f64) / (n as f64)).round() as u8));
            for y in ys[0]..ys[1] {
                for x in xs[0]..xs[1] {
                    out.put_pixel(x, y, mean);
                }
            }
        }
    }
    out
}

fn proportional_cuts(size: u32, cells: u32) -> Vec<u32> {
    (0..=cells).map(|i| (u64::from(i) * u64::from(size) / u64::from(cells)) as u32).collect()
}

/// Box-downsamples to `target_w` x `target_h` cells and upsamples back to
/// the original size, each output pixel taking the mean of its cell.
pub fn pixelate_to(img: &RgbImage, target_w: u32, target_h: u32) -> Result<RgbImage> {
    ensure_nonempty(img)?;
    let (w, h) = img.dimensions();
    if target_w == 0 || target_h == 0 || target_w > w || target_h > h {
        return Err(CorpusError::InvalidParameter(format!(
            "pixelate target {target_w}x{target_h} for a {w}x{h} image"
        )));
    }
    if (target_w, target_h) == (w, h) {
        return Ok(img.clone());
    }
    Ok(pixelate_cells(img, &proportional_cuts(w, target_w), &proportional_cuts(h, target_h)))
}

/// Pixelates with square `factor` x `factor` blocks anchored at the top-left
/// corner; trailing blocks are truncated at the image edge.
pub fn pixelate_blocks(img: &RgbImage, factor: u32) -> Result<RgbImage> {
    ensure_nonempty(img)?;
    let (w, h) = img.dimensions();
    if factor == 0 || w < factor || h < factor {
        return Err(CorpusError::TooSmall { width: w, height: h, factor });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let cuts = |size: u32| -> Vec<u32> {
        let mut v: Vec<u32> = (0..size).step_by(factor as usize).collect();
        v.push(size);
        v
    };
    Ok(pixelate_cells(img, &cuts(w), &cuts(h)))
}

/// Pixelates keeping `fraction` of the original resolution.
pub fn pixelate_fraction(img: &RgbImage, fraction: f64) -> Result<RgbImage> {
    ensure_nonempty(img)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::InvalidParameter(format!("pixelate fraction {fraction}")));
    }
    let (w, h) = img.dimensions();
    let tw = ((f64::from(w) * fraction).round() as u32).clamp(1, w);
    let th = ((f64::from(h) * fraction).round() as u32).clamp(1, h);
    pixelate_to(img, tw, th)
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(reference: &RgbImage, test: &RgbImage) -> f64 {
    assert_eq!(reference.dimensions(), test.dimensions(), "psnr needs equal dimensions");
    let n = reference.as_raw().len() as f64;
    let mse = reference
        .as_raw()
        .iter()
        .zip(test.as_raw())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

fn corrupted(sample: &ImageSample, kind: CorruptionKind, severity: u8, pixels: RgbImage) -> ImageSample {
    ImageSample {
        pixels,
        severity,
        corruption: (severity > 0).then_some(kind),
        ..sample.clone()
    }
}

fn require_clean(sample: &ImageSample) -> Result<()> {
    if sample.severity != 0 {
        return Err(CorpusError::AlreadyCorrupted(sample.id.clone(), sample.severity));
    }
    ensure_nonempty(&sample.pixels)
}

/// Gaussian noise at a severity (0 = identity). The id is kept; callers
/// that store several severities assign distinct ids.
pub fn apply_gaussian_noise(
    sample: &ImageSample,
    severity: u8,
    seed: u64,
    table: &SeverityTable,
) -> Result<ImageSample> {
    require_clean(sample)?;
    let sigma = table.sigma(severity)?;
    let pixels = gaussian_noise(&sample.pixels, sigma, seed)?;
    Ok(corrupted(sample, CorruptionKind::GaussianNoise, severity, pixels))
}

pub fn apply_defocus_blur(sample: &ImageSample, severity: u8, table: &SeverityTable) -> Result<ImageSample> {
    require_clean(sample)?;
    let radius = table.radius(severity)?;
    let pixels = defocus_blur(&sample.pixels, radius)?;
    Ok(corrupted(sample, CorruptionKind::DefocusBlur, severity, pixels))
}

pub fn apply_pixelate(sample: &ImageSample, severity: u8, table: &SeverityTable) -> Result<ImageSample> {
    require_clean(sample)?;
    let fraction = table.pixelate(severity)?;
    let pixels = pixelate_fraction(&sample.pixels, fraction)?;
    Ok(corrupted(sample, CorruptionKind::Pixelate, severity, pixels))
}

pub fn apply_corruption(
    sample: &ImageSample,
    spec: CorruptionSpec,
    seed: u64,
    table: &SeverityTable,
) -> Result<ImageSample> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    match spec.kind {
        CorruptionKind::GaussianNoise => apply_gaussian_noise(sample, spec.severity, seed, table),
        CorruptionKind::DefocusBlur => apply_defocus_blur(sample, spec.severity, table),
        CorruptionKind::Pixelate => apply_pixelate(sample, spec.severity, table),
    }
}
