//! Fifteen procedural corruptions at five severity levels.
//!
//! Every draw comes from a ChaCha stream keyed by `(seed, kind, severity)`,
//! so `apply` is a pure function of the image and the spec.

mod filters;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError, CHANNELS};

pub const SEVERITY_LEVELS: u8 = 5;
pub const PROBE_SET_SIZE: usize = 16;

/// Default severity table shipped with the crate.
pub const DEFAULT_SEVERITY_TOML: &str = include_str!("../../config/severity.toml");
pub const SEVERITY_TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorruptionError {
    #[error("severity must be in 1..=5, got {0}")]
    Severity(u8),
    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),
    #[error("severity table: {0}")]
    Table(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Fog,
    Frost,
    Snow,
    Brightness,
    Contrast,
    ElasticTransform,
    JpegCompression,
    Pixelate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Noise,
    Blur,
    Weather,
    Digital,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Fog,
        CorruptionKind::Frost,
        CorruptionKind::Snow,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::ElasticTransform,
        CorruptionKind::JpegCompression,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::ElasticTransform => "elastic_transform",
            CorruptionKind::JpegCompression => "jpeg_compression",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn category(self) -> Category {
        use CorruptionKind::*;
        match self {
            GaussianNoise | ShotNoise | ImpulseNoise => Category::Noise,
            DefocusBlur | GlassBlur | MotionBlur | ZoomBlur => Category::Blur,
            Fog | Frost | Snow => Category::Weather,
            Brightness | Contrast | ElasticTransform | JpegCompression | Pixelate => {
                Category::Digital
            }
        }
    }

    fn stream_id(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("kind in ALL") as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorruptionError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CorruptionError> {
        check_severity(severity)?;
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }

    /// Random stream dedicated to this `(seed, kind, severity)` triple.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.kind.stream_id() * 16 + self.severity as u64);
        rng
    }
}

fn check_severity(severity: u8) -> Result<(), CorruptionError> {
    if (1..=SEVERITY_LEVELS).contains(&severity) {
        Ok(())
    } else {
        Err(CorruptionError::Severity(severity))
    }
}

/// Per-kind parameter rows for severities 1..=5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityTable {
    pub version: u32,
    pub kinds: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_SEVERITY_TOML).expect("bundled severity table is valid")
    }
}

impl SeverityTable {
    pub fn from_toml(text: &str) -> Result<Self, CorruptionError> {
        let table: SeverityTable =
            toml::from_str(text).map_err(|e| CorruptionError::Table(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("table serializes")
    }

    pub fn validate(&self) -> Result<(), CorruptionError> {
        if self.version != SEVERITY_TABLE_VERSION {
            return Err(CorruptionError::Table(format!(
                "unsupported version {}",
                self.version
            )));
        }
        for name in self.kinds.keys() {
            name.parse::<CorruptionKind>()?;
        }
        for kind in CorruptionKind::ALL {
            let rows = self
                .kinds
                .get(kind.name())
                .ok_or_else(|| CorruptionError::Table(format!("missing kind {kind}")))?;
            if rows.len() != SEVERITY_LEVELS as usize {
                return Err(CorruptionError::Table(format!(
                    "{kind} has {} rows, expected 5",
                    rows.len()
                )));
            }
            let width = rows[0].len();
            if width == 0 || rows.iter().any(|r| r.len() != width) {
                return Err(CorruptionError::Table(format!("{kind} rows are ragged")));
            }
            for (i, a) in rows.iter().enumerate() {
                if rows[i + 1..].contains(a) {
                    return Err(CorruptionError::Table(format!("{kind} has duplicate rows")));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self, kind: CorruptionKind, severity: u8) -> Result<&[f64], CorruptionError> {
        check_severity(severity)?;
        let rows = self
            .kinds
            .get(kind.name())
            .ok_or_else(|| CorruptionError::Table(format!("missing kind {kind}")))?;
        Ok(&rows[severity as usize - 1])
    }
}

/// Parameter row from the bundled table.
pub fn severity_params(kind: CorruptionKind, severity: u8) -> Result<Vec<f64>, CorruptionError> {
    Ok(default_table().params(kind, severity)?.to_vec())
}

fn default_table() -> &'static SeverityTable {
    static TABLE: std::sync::OnceLock<SeverityTable> = std::sync::OnceLock::new();
    TABLE.get_or_init(SeverityTable::default)
}

/// Corrupts `image` using the bundled severity table.
pub fn apply(image: &Image, spec: &CorruptionSpec) -> Result<Image, CorruptionError> {
    apply_with_table(image, spec, default_table())
}

pub fn apply_with_table(
    image: &Image,
    spec: &CorruptionSpec,
    table: &SeverityTable,
) -> Result<Image, CorruptionError> {
    let params = table.params(spec.kind, spec.severity)?;
    apply_with_params(image, spec, params)
}

/// Corrupts `image` with an explicit parameter row, bypassing the table.
pub fn apply_with_params(
    image: &Image,
    spec: &CorruptionSpec,
    params: &[f64],
) -> Result<Image, CorruptionError> {
    check_severity(spec.severity)?;
    let p = |i: usize| params.get(i).copied().unwrap_or(0.0) as f32;
    let size = image.size();
    let n = size * size;
    let mut rng = spec.rng();
    let mut planes: [Vec<f32>; 3] =
        std::array::from_fn(|c| image.data()[c * n..(c + 1) * n].to_vec());

    use CorruptionKind::*;
    match spec.kind {
        GaussianNoise => {
            let normal = Normal::new(0.0f32, p(0)).map_err(|e| CorruptionError::Table(e.to_string()))?;
            for plane in &mut planes {
                for v in plane.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        ShotNoise => {
            let c = p(0).max(1e-3);
            for plane in &mut planes {
                for v in plane.iter_mut() {
                    let lambda = (*v * c) as f64;
                    *v = if lambda > 0.0 {
                        Poisson::new(lambda).expect("positive rate").sample(&mut rng) as f32 / c
                    } else {
                        0.0
                    };
                }
            }
        }
        ImpulseNoise => {
            let prob = p(0) as f64;
            for plane in &mut planes {
                for v in plane.iter_mut() {
                    if rng.gen_bool(prob) {
                        *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        DefocusBlur => {
            let (k, side) = filters::disk_kernel(p(0));
            for plane in &mut planes {
                *plane = filters::convolve(plane, size, &k, side);
            }
        }
        GlassBlur => {
            let (sigma, radius, iters) = (p(0), p(1) as isize, p(2) as usize);
            for _ in 0..iters {
                for y in (0..size).rev() {
                    for x in (0..size).rev() {
                        let dy = rng.gen_range(-radius..=radius);
                        let dx = rng.gen_range(-radius..=radius);
                        let sy = filters::reflect(y as isize + dy, size);
                        let sx = filters::reflect(x as isize + dx, size);
                        for plane in &mut planes {
                            plane.swap(y * size + x, sy * size + sx);
                        }
                    }
                }
            }
            for plane in &mut planes {
                *plane = filters::gaussian_blur(plane, size, sigma);
            }
        }
        MotionBlur => {
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let (k, side) = filters::line_kernel(p(0), angle);
            for plane in &mut planes {
                *plane = filters::convolve(plane, size, &k, side);
            }
        }
        ZoomBlur => {
            let (max_zoom, step) = (p(0), p(1).max(1e-3));
            let center = (size as f32 - 1.0) / 2.0;
            let mut zooms = vec![1.0f32];
            let mut z = 1.0 + step;
            while z <= max_zoom + 1e-6 {
                zooms.push(z);
                z += step;
            }
            for plane in &mut planes {
                let mut acc = vec![0.0; n];
                for &z in &zooms {
                    for y in 0..size {
                        for x in 0..size {
                            let sy = center + (y as f32 - center) / z;
                            let sx = center + (x as f32 - center) / z;
                            acc[y * size + x] += filters::bilinear(plane, size, sy, sx);
                        }
                    }
                }
                let count = zooms.len() as f32;
                *plane = acc.into_iter().map(|v| v / count).collect();
            }
        }
        Fog => {
            let field = filters::plasma(&mut rng, size, p(1).max(1.01));
            let strength = p(0);
            for plane in &mut planes {
                for (v, f) in plane.iter_mut().zip(&field) {
                    let w = (strength * f).min(1.0);
                    *v = *v * (1.0 - w) + w;
                }
            }
        }
        Frost => {
            let (opacity, thresh) = (p(0), p(1));
            let field = filters::plasma(&mut rng, size, 1.15);
            let crystal = [0.9f32, 0.95, 1.0];
            for (plane, &tint) in planes.iter_mut().zip(&crystal) {
                for (v, f) in plane.iter_mut().zip(&field) {
                    let m = ((f - thresh) / (1.0 - thresh).max(1e-3)).clamp(0.0, 1.0).sqrt();
                    let a = opacity * (0.35 + 0.65 * m);
                    *v += a * (tint - *v) * if m > 0.0 { 1.0 } else { 0.4 };
                }
            }
        }
        Snow => {
            let (density, lift, length) = (p(0) as f64, p(1), p(2));
            let mut flakes = vec![0.0f32; n];
            for f in flakes.iter_mut() {
                if rng.gen_bool(density) {
                    *f = rng.gen_range(0.7..1.0);
                }
            }
            let angle = std::f32::consts::FRAC_PI_2 + rng.gen_range(-0.5..0.5);
            let (k, side) = filters::line_kernel(length, angle);
            let streaks: Vec<f32> = filters::convolve(&flakes, size, &k, side)
                .into_iter()
                .map(|v| (v * length * 0.8).min(1.0))
                .collect();
            for plane in &mut planes {
                for (v, s) in plane.iter_mut().zip(&streaks) {
                    let base = (*v + lift).min(1.0);
                    *v = base + s * (1.0 - base);
                }
            }
        }
        Brightness => {
            let b = p(0);
            for plane in &mut planes {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        Contrast => {
            let c = p(0);
            for plane in &mut planes {
                let mean = plane.iter().sum::<f32>() / n as f32;
                plane.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
            }
        }
        ElasticTransform => {
            let (alpha, sigma) = (p(0), p(1));
            let noise = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                let raw: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                filters::gaussian_blur(&raw, size, sigma)
                    .into_iter()
                    .map(|v| v * alpha)
                    .collect()
            };
            let dx = noise(&mut rng);
            let dy = noise(&mut rng);
            for plane in &mut planes {
                let src = plane.clone();
                for y in 0..size {
                    for x in 0..size {
                        let i = y * size + x;
                        plane[i] = filters::bilinear(&src, size, y as f32 + dy[i], x as f32 + dx[i]);
                    }
                }
            }
        }
        JpegCompression => filters::jpeg_roundtrip(&mut planes, size, p(0)),
        Pixelate => {
            let down = ((size as f32 * p(0)).round() as usize).clamp(1, size);
            for plane in &mut planes {
                let small: Vec<f32> = (0..down * down)
                    .map(|i| {
                        let sy = ((i / down) as f32 + 0.5) * size as f32 / down as f32;
                        let sx = ((i % down) as f32 + 0.5) * size as f32 / down as f32;
                        plane[(sy as usize).min(size - 1) * size + (sx as usize).min(size - 1)]
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        let sy = (y * down / size).min(down - 1);
                        let sx = (x * down / size).min(down - 1);
                        plane[y * size + x] = small[sy * down + sx];
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(CHANNELS * n);
    for plane in planes {
        data.extend(plane);
    }
    Ok(Image::from_clamped(size, data)?)
}

/// Sixteen clean procedural scenes used to measure severity monotonicity.
pub fn probe_set(size: usize) -> Vec<Image> {
    (0..PROBE_SET_SIZE as u64)
        .map(|i| crate::tasks::render_scene(0x9e37_79b9 + i, size).image)
        .collect()
}

/// Mean MSE-to-clean per (kind, severity) over the probe set.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityReport {
    pub rows: Vec<(CorruptionKind, u8, f64)>,
}

impl MonotonicityReport {
    pub fn measure(table: &SeverityTable, size: usize) -> Result<Self, CorruptionError> {
        let probes = probe_set(size);
        let mut rows = Vec::new();
        for kind in CorruptionKind::ALL {
            for severity in 1..=SEVERITY_LEVELS {
                let mut total = 0.0;
                for (i, img) in probes.iter().enumerate() {
                    let spec = CorruptionSpec::new(kind, severity, i as u64)?;
                    total += apply_with_table(img, &spec, table)?.mse(img)?;
                }
                rows.push((kind, severity, total / probes.len() as f64));
            }
        }
        Ok(Self { rows })
    }

    /// Kinds whose measured MSE drops somewhere between adjacent severities.
    pub fn violations(&self) -> Vec<CorruptionKind> {
        CorruptionKind::ALL
            .into_iter()
            .filter(|&k| {
                let mses: Vec<f64> = self.rows.iter().filter(|r| r.0 == k).map(|r| r.2).collect();
                mses.windows(2).any(|w| w[1] < w[0])
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "kind,severity,mean_mse")?;
        for (kind, severity, mse) in &self.rows {
            writeln!(w, "{kind},{severity},{mse:.8}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Image {
        crate::tasks::render_scene(7, 32).image
    }

    #[test]
    fn category_partition_is_3_4_3_5() {
        let count = |c| CorruptionKind::ALL.iter().filter(|k| k.category() == c).count();
        assert_eq!(CorruptionKind::ALL.len(), 15);
        assert_eq!(count(Category::Noise), 3);
        assert_eq!(count(Category::Blur), 4);
        assert_eq!(count(Category::Weather), 3);
        assert_eq!(count(Category::Digital), 5);
    }

    #[test]
    fn names_round_trip() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!("rain".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = probe();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 11).unwrap();
        let out = apply_with_params(&img, &spec, &[0.0]).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn severity_out_of_range() {
        assert!(matches!(
            CorruptionSpec::new(CorruptionKind::Fog, 0, 1),
            Err(CorruptionError::Severity(0))
        ));
        assert!(severity_params(CorruptionKind::Fog, 6).is_err());
        let bad = CorruptionSpec {
            kind: CorruptionKind::Fog,
            severity: 9,
            seed: 0,
        };
        assert!(apply(&probe(), &bad).is_err());
    }

    #[test]
    fn every_kind_is_deterministic_and_in_range() {
        let img = probe();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 4, 3).unwrap();
            let a = apply(&img, &spec).unwrap();
            let b = apply(&img, &spec).unwrap();
            assert_eq!(a, b, "{kind}");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.mse(&img).unwrap() > 0.0, "{kind} left the image untouched");
        }
    }

    #[test]
    fn table_rows_are_distinct_and_stable() {
        for kind in CorruptionKind::ALL {
            assert_eq!(severity_params(kind, 3).unwrap(), severity_params(kind, 3).unwrap());
            let rows: Vec<Vec<f64>> = (1..=5).map(|s| severity_params(kind, s).unwrap()).collect();
            for i in 0..5 {
                for j in i + 1..5 {
                    assert_ne!(rows[i], rows[j], "{kind}");
                }
            }
        }
    }

    #[test]
    fn table_toml_round_trip() {
        let table = SeverityTable::default();
        let reloaded = SeverityTable::from_toml(&table.to_toml()).unwrap();
        assert_eq!(table, reloaded);
    }

    #[test]
    fn table_validation_catches_missing_rows() {
        let mut table = SeverityTable::default();
        table.kinds.get_mut("fog").unwrap().pop();
        assert!(table.validate().is_err());
        let mut table = SeverityTable::default();
        table.kinds.remove("snow");
        assert!(table.validate().is_err());
    }

    #[test]
    fn csv_report_has_75_rows() {
        let table = SeverityTable::default();
        let report = MonotonicityReport::measure(&table, 16).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 76);
        assert!(text.starts_with("kind,severity,mean_mse\n"));
    }
}

#[cfg(test)]
mod monotonicity {
    use super::*;

    #[test]
    fn measured_mse_is_nondecreasing_in_severity() {
        let report = MonotonicityReport::measure(&SeverityTable::default(), 32).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(report.violations().is_empty(), "{}", String::from_utf8(buf).unwrap());
    }
}
