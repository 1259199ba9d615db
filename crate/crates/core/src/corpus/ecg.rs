//! Synthetic "not an ECG" images: a random polyline whose x and y
//! coordinates are each drawn from a randomly chosen distribution family,
//! drawn as a thin black anti-aliased line on a white canvas.

use super::{CorpusError, ImageSample, Result, Task, Truth};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, Gamma, Geometric, Normal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistFamily {
    Normal,
    Gamma,
    Exponential,
    Poisson,
    Uniform,
    ChiSquare,
    Geometric,
}

impl DistFamily {
    pub const ALL: [DistFamily; 7] = [
        DistFamily::Normal,
        DistFamily::Gamma,
        DistFamily::Exponential,
        DistFamily::Poisson,
        DistFamily::Uniform,
        DistFamily::ChiSquare,
        DistFamily::Geometric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistFamily::Normal => "normal",
            DistFamily::Gamma => "gamma",
            DistFamily::Exponential => "exponential",
            DistFamily::Poisson => "poisson",
            DistFamily::Uniform => "uniform",
            DistFamily::ChiSquare => "chi_square",
            DistFamily::Geometric => "geometric",
        }
    }
}

impl std::str::FromStr for DistFamily {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| CorpusError::InvalidParameter(format!("unknown distribution family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcgAnomalySpec {
    pub seed: u64,
    pub n_points: usize,
    /// Family used for both axes; `None` draws one family per axis.
    pub dist_family: Option<DistFamily>,
    pub param: f64,
    pub line_width_px: f64,
    pub canvas: (u32, u32),
    /// Fraction of the canvas left blank on every side.
    pub margin: f64,
}

impl Default for EcgAnomalySpec {
    fn default() -> Self {
        EcgAnomalySpec {
            seed: 0,
            n_points: 128,
            dist_family: None,
            param: 0.6,
            line_width_px: 0.8,
            canvas: (448, 448),
            margin: 0.1,
        }
    }
}

impl EcgAnomalySpec {
    pub fn with_seed(seed: u64) -> Self {
        EcgAnomalySpec { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidEcgSpec(m.to_string()));
        if self.n_points < 2 {
            return bad("n_points must be >= 2");
        }
        if self.canvas.0 < 2 || self.canvas.1 < 2 {
            return bad("canvas must be at least 2x2");
        }
        if !(self.line_width_px > 0.0 && self.line_width_px.is_finite()) {
            return bad("line width must be positive");
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad("margin must lie in [0, 0.5)");
        }
        if !(self.param > 0.0 && self.param.is_finite()) {
            return bad("param must be positive");
        }
        if self.dist_family == Some(DistFamily::Uniform) && self.param >= 1.0 {
            return bad("uniform low bound must be below 1.0");
        }
        if self.dist_family == Some(DistFamily::Geometric) && self.param > 1.0 {
            return bad("geometric p must be <= 1");
        }
        Ok(())
    }
}

/// Draws `n` values from `family` with its first parameter set to `param`:
/// normal(mean=param, sd=1), gamma(shape=param, scale=1),
/// exponential(scale=param), poisson(lambda=param), uniform(low=param,
/// high=1), chi-square(df=param), geometric(p=param, support 1, 2, ...).
pub fn sample_series<R: Rng + ?Sized>(family: DistFamily, param: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let bad = |e: &dyn std::fmt::Display| CorpusError::InvalidEcgSpec(format!("{family:?}({param}): {e}"));
    let v = match family {
        DistFamily::Normal => {
            let d = Normal::new(param, 1.0).map_err(|e| bad(&e))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        DistFamily::Gamma => {
            let d = Gamma::new(param, 1.0).map_err(|e| bad(&e))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        DistFamily::Exponential => {
            let d = Exp::new(1.0 / param).map_err(|e| bad(&e))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        DistFamily::Poisson => {
            let d = Poisson::new(param).map_err(|e| bad(&e))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        DistFamily::Uniform => {
            let d = Uniform::new(param, 1.0).map_err(|e| bad(&e))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        DistFamily::ChiSquare => {
            let d = ChiSquared::new(param).map_err(|e| bad(&e))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        DistFamily::Geometric => {
            let d = Geometric::new(param).map_err(|e| bad(&e))?;
            (0..n).map(|_| (d.sample(rng) + 1) as f64).collect()
        }
    };
    Ok(v)
}

/// Polyline vertices in canvas pixel coordinates (y grows downwards).
#[derive(Clone, Debug, PartialEq)]
pub struct EcgPolyline {
    pub points: Vec<(f64, f64)>,
    pub x_family: DistFamily,
    pub y_family: DistFamily,
}

fn scale_axis(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span <= 0.0 {
        return vec![(lo + hi) / 2.0; values.len()];
    }
    values.iter().map(|v| lo + (v - min) / span * (hi - lo)).collect()
}

/// Draws the series and auto-scales them into the canvas inside the margin.
pub fn ecg_polyline(spec: &EcgAnomalySpec) -> Result<EcgPolyline> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pick = |rng: &mut ChaCha8Rng| {
        spec.dist_family
            .unwrap_or_else(|| DistFamily::ALL[rng.random_range(0..DistFamily::ALL.len())])
    };
    let x_family = pick(&mut rng);
    let xs = sample_series(x_family, spec.param, spec.n_points, &mut rng)?;
    let y_family = pick(&mut rng);
    let ys = sample_series(y_family, spec.param, spec.n_points, &mut rng)?;
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(CorpusError::InvalidEcgSpec("non-finite draw".into()));
    }
    let degenerate = xs.iter().zip(&ys).all(|(x, y)| *x == xs[0] && *y == ys[0]);
    if degenerate {
        return Err(CorpusError::DegenerateSeries);
    }
    let (w, h) = (f64::from(spec.canvas.0), f64::from(spec.canvas.1));
    let px = scale_axis(&xs, spec.margin * w, (1.0 - spec.margin) * w);
    // y axis points up in the plot, down on the canvas
    let py = scale_axis(&ys, (1.0 - spec.margin) * h, spec.margin * h);
    Ok(EcgPolyline { points: px.into_iter().zip(py).collect(), x_family, y_family })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Rasterizes a polyline in black on white. Per-pixel coverage is
/// approximated from the distance between the pixel center and the nearest
/// segment; overlapping segments take the maximum coverage.
pub fn rasterize_polyline(points: &[(f64, f64)], line_width: f64, canvas: (u32, u32)) -> RgbImage {
    let (w, h) = canvas;
    let mut coverage = vec![0.0f64; (w as usize) * (h as usize)];
    let half = line_width / 2.0;
    let reach = half + 0.5;
    let peak = line_width.min(1.0);
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as u32;
        let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as u32).min(w - 1);
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as u32;
        let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as u32).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance((f64::from(x) + 0.5, f64::from(y) + 0.5), a, b);
                let c = (reach - d).clamp(0.0, peak);
                let slot = &mut coverage[(y * w + x) as usize];
                if c > *slot {
                    *slot = c;
                }
            }
        }
    }
    let mut img = RgbImage::new(w, h);
    for (p, c) in img.pixels_mut().zip(coverage) {
        let v = (255.0 * (1.0 - c)).round() as u8;
        *p = Rgb([v, v, v]);
    }
    img
}

/// Generates one anomaly sample; deterministic given `spec.seed`.
pub fn generate_ecg_anomaly(spec: &EcgAnomalySpec, id: impl Into<String>) -> Result<ImageSample> {
    let line = ecg_polyline(spec)?;
    let pixels = rasterize_polyline(&line.points, spec.line_width_px, spec.canvas);
    Ok(ImageSample::clean(
        id,
        pixels,
        Task::EcgVsNot,
        Truth::Anomaly,
        format!("ecg_anomaly:seed={}:x={:?}:y={:?}", spec.seed, line.x_family, line.y_family),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn non_white_fraction(img: &RgbImage) -> f64 {
        let n = img.pixels().filter(|p| p.0 != [255, 255, 255]).count();
        n as f64 / (img.width() * img.height()) as f64
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_ecg_anomaly(&EcgAnomalySpec::with_seed(42), "a").unwrap();
        let b = generate_ecg_anomaly(&EcgAnomalySpec::with_seed(42), "b").unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = generate_ecg_anomaly(&EcgAnomalySpec::with_seed(43), "c").unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn polyline_has_128_vertices_and_fits_canvas() {
        let spec = EcgAnomalySpec::with_seed(1);
        let line = ecg_polyline(&spec).unwrap();
        assert_eq!(line.points.len(), 128);
        for &(x, y) in &line.points {
            assert!((0.0..=448.0).contains(&x) && (0.0..=448.0).contains(&y));
        }
    }

    #[test]
    fn output_dimensions_match_canvas() {
        let spec = EcgAnomalySpec { canvas: (300, 200), ..EcgAnomalySpec::with_seed(5) };
        let s = generate_ecg_anomaly(&spec, "x").unwrap();
        assert_eq!(s.pixels.dimensions(), (300, 200));
        assert_eq!(s.truth, Truth::Anomaly);
        s.validate().unwrap();
    }

    #[test]
    fn ink_fraction_strictly_between_zero_and_half() {
        // Pixel-count oracle over 100 seeded generations.
        for seed in 0..100 {
            let s = generate_ecg_anomaly(&EcgAnomalySpec::with_seed(seed), "x").unwrap();
            let f = non_white_fraction(&s.pixels);
            assert!(f > 0.0 && f < 0.5, "seed {seed}: fraction {f}");
        }
    }

    #[test]
    fn every_family_samples_finite_values_with_expected_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for fam in DistFamily::ALL {
            let v = sample_series(fam, 0.6, 2000, &mut rng).unwrap();
            assert!(v.iter().all(|x| x.is_finite()), "{fam:?}");
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let expected = match fam {
                DistFamily::Normal => 0.6,
                DistFamily::Gamma => 0.6,
                DistFamily::Exponential => 0.6,
                DistFamily::Poisson => 0.6,
                DistFamily::Uniform => 0.8,
                DistFamily::ChiSquare => 0.6,
                DistFamily::Geometric => 1.0 / 0.6,
            };
            assert!((mean - expected).abs() < 0.1, "{fam:?}: mean {mean}");
            match fam {
                DistFamily::Uniform => assert!(v.iter().all(|x| (0.6..1.0).contains(x))),
                DistFamily::Geometric => assert!(v.iter().all(|x| *x >= 1.0 && x.fract() == 0.0)),
                DistFamily::Poisson => assert!(v.iter().all(|x| *x >= 0.0 && x.fract() == 0.0)),
                _ => {}
            }
        }
    }

    #[test]
    fn fixed_family_used_on_both_axes() {
        let spec = EcgAnomalySpec { dist_family: Some(DistFamily::Uniform), ..EcgAnomalySpec::with_seed(3) };
        let line = ecg_polyline(&spec).unwrap();
        assert_eq!((line.x_family, line.y_family), (DistFamily::Uniform, DistFamily::Uniform));
    }

    #[test]
    fn families_vary_across_seeds() {
        let fams: std::collections::HashSet<_> = (0..200)
            .map(|s| ecg_polyline(&EcgAnomalySpec::with_seed(s)).unwrap().x_family)
            .collect();
        assert_eq!(fams.len(), 7);
    }

    #[test]
    fn degenerate_series_rejected() {
        // Geometric with p = 1 always yields 1 on both axes.
        let spec = EcgAnomalySpec {
            dist_family: Some(DistFamily::Geometric),
            param: 1.0,
            ..EcgAnomalySpec::with_seed(0)
        };
        assert!(matches!(ecg_polyline(&spec), Err(CorpusError::DegenerateSeries)));
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = EcgAnomalySpec { n_points: 1, ..Default::default() };
        assert!(matches!(spec.validate(), Err(CorpusError::InvalidEcgSpec(_))));
        let spec = EcgAnomalySpec { line_width_px: 0.0, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rasterized_line_is_antialiased() {
        let img = rasterize_polyline(&[(2.0, 10.3), (30.0, 10.3)], 0.8, (32, 20));
        let column: Vec<u8> = (0..20).map(|y| img.get_pixel(15, y)[0]).collect();
        let darkest = *column.iter().min().unwrap();
        assert!(darkest < 128);
        assert!(column.iter().any(|&v| v > darkest && v < 255), "{column:?}");
    }
}
