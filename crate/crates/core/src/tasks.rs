//! Procedural image-to-image tasks and their metrics.
//!
//! All kinds share one scene generator: a smooth gradient background with
//! two to five anti-aliased shapes. The task decides what the input and
//! target images are.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError, CHANNELS};

pub const DENOISE_SIGMA: f32 = 0.1;
pub const LOWLIGHT_GAMMA: f32 = 2.2;
pub const LOWLIGHT_SCALE: f32 = 0.4;
pub const BACKGROUND_DEPTH: f32 = 0.05;
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DEPTH_EPS: f32 = 0.01;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("palette is empty")]
    EmptyPalette,
    #[error("no target pixels with depth above {DEPTH_EPS}")]
    NoValidDepth,
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Denoise,
    Derain,
    Lowlight,
    Segmentation,
    Depth,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Denoise,
        TaskKind::Derain,
        TaskKind::Lowlight,
        TaskKind::Segmentation,
        TaskKind::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Derain => "derain",
            TaskKind::Lowlight => "lowlight",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            TaskKind::Denoise | TaskKind::Derain | TaskKind::Lowlight => MetricKind::Psnr,
            TaskKind::Segmentation => MetricKind::Miou,
            TaskKind::Depth => MetricKind::ARel,
        }
    }

    /// Scores `pred` against `target` with this task's metric.
    pub fn evaluate(self, pred: &Image, target: &Image) -> Result<Metric, TaskError> {
        match self.metric() {
            MetricKind::Psnr => psnr(pred, target),
            MetricKind::Miou => miou(pred, target, &Palette::default()),
            MetricKind::ARel => a_rel(pred, target),
        }
    }

    fn stream_id(self) -> u64 {
        1 + Self::ALL.iter().position(|&k| k == self).expect("kind in ALL") as u64
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "PSNR")]
    Psnr,
    #[serde(rename = "mIoU")]
    Miou,
    #[serde(rename = "A.Rel")]
    ARel,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::ARel)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Psnr => "PSNR",
            MetricKind::Miou => "mIoU",
            MetricKind::ARel => "A.Rel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub kind: MetricKind,
    pub value: f64,
}

/// Class colors; index 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub colors: Vec<[f32; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
        }
    }
}

impl Palette {
    /// Index of the nearest color (L2), ties to the lower index.
    pub fn decode(&self, rgb: [f32; 3]) -> usize {
        let mut best = (0, f32::INFINITY);
        for (i, c) in self.colors.iter().enumerate() {
            let d: f32 = (0..3).map(|k| (rgb[k] - c[k]).powi(2)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn min_pairwise_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for (i, a) in self.colors.iter().enumerate() {
            for b in &self.colors[i + 1..] {
                let d: f32 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f32>().sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    color: [f32; 3],
    /// Normalized inverse distance in (0,1].
    nearness: f32,
    cx: f32,
    cy: f32,
    r: f32,
    /// Rect half-extents or triangle vertices, in pixels.
    extra: [f32; 6],
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match self.kind {
            ShapeKind::Disk => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r,
            ShapeKind::Rect => {
                (x - self.cx).abs() <= self.extra[0] && (y - self.cy).abs() <= self.extra[1]
            }
            ShapeKind::Triangle => {
                let v = self.extra;
                let edge = |ax: f32, ay: f32, bx: f32, by: f32| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let e0 = edge(v[0], v[1], v[2], v[3]);
                let e1 = edge(v[2], v[3], v[4], v[5]);
                let e2 = edge(v[4], v[5], v[0], v[1]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    fn class(&self) -> u8 {
        match self.kind {
            ShapeKind::Disk => 1,
            ShapeKind::Rect => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// A rendered scene with per-pixel labels.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    /// Palette class per pixel, row-major.
    pub classes: Vec<u8>,
    /// Normalized inverse distance per pixel.
    pub depth: Vec<f32>,
}

const SUPERSAMPLE: usize = 4;

/// Renders the shared scene for `seed`.
pub fn render_scene(seed: u64, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let c0: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());

    let count = rng.gen_range(2..=5);
    let mut shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Disk,
                1 => ShapeKind::Rect,
                _ => ShapeKind::Triangle,
            };
            let color = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
            let distance: f32 = rng.gen_range(1.0..8.0);
            let cx = rng.gen_range(0.15 * s..0.85 * s);
            let cy = rng.gen_range(0.15 * s..0.85 * s);
            let r = rng.gen_range(0.12 * s..0.3 * s);
            let mut extra = [0.0; 6];
            match kind {
                ShapeKind::Disk => {}
                ShapeKind::Rect => {
                    extra[0] = r * rng.gen_range(0.6..1.2);
                    extra[1] = r * rng.gen_range(0.6..1.2);
                }
                ShapeKind::Triangle => {
                    let rot: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                    for k in 0..3 {
                        let a = rot + k as f32 * std::f32::consts::TAU / 3.0;
                        let rr = r * rng.gen_range(0.8..1.3);
                        extra[2 * k] = cx + rr * a.cos();
                        extra[2 * k + 1] = cy + rr * a.sin();
                    }
                }
            }
            Shape {
                kind,
                color,
                nearness: 1.0 / distance,
                cx,
                cy,
                r,
                extra,
            }
        })
        .collect();
    // paint far to near
    shapes.sort_by(|a, b| a.nearness.total_cmp(&b.nearness));

    let n = size * size;
    let mut data = vec![0.0f32; CHANNELS * n];
    let mut classes = vec![0u8; n];
    let mut depth = vec![BACKGROUND_DEPTH; n];
    let sub = 1.0 / SUPERSAMPLE as f32;
    for y in 0..size {
        for x in 0..size {
            let mut rgb = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * sub;
                    let py = y as f32 + (sy as f32 + 0.5) * sub;
                    let t = (((px / s - 0.5) * gx + (py / s - 0.5) * gy) + 0.75) / 1.5;
                    let mut col: [f32; 3] = std::array::from_fn(|k| c0[k] + (c1[k] - c0[k]) * t.clamp(0.0, 1.0));
                    for shape in &shapes {
                        if shape.contains(px, py) {
                            col = shape.color;
                        }
                    }
                    for k in 0..3 {
                        rgb[k] += col[k];
                    }
                }
            }
            let norm = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for k in 0..3 {
                data[k * n + y * size + x] = (rgb[k] / norm).clamp(0.0, 1.0);
            }
            let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
            for shape in &shapes {
                if shape.contains(cx, cy) {
                    classes[y * size + x] = shape.class();
                    depth[y * size + x] = shape.nearness;
                }
            }
        }
    }
    Scene {
        image: Image::new(size, data).expect("scene colors are in range"),
        classes,
        depth,
    }
}

/// One input/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub input: Image,
    pub target: Image,
    pub task: TaskKind,
    pub seed: u64,
}

/// Deterministic sample for `(task, seed)` at cell size `size`.
pub fn generate(task: TaskKind, seed: u64, size: usize) -> TaskSample {
    let scene = render_scene(seed, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.stream_id());
    let n = size * size;
    let clean = scene.image.data();

    let (input, target) = match task {
        TaskKind::Denoise => {
            let normal = Normal::new(0.0f32, DENOISE_SIGMA).expect("valid sigma");
            let noisy = clean.iter().map(|&v| v + normal.sample(&mut rng)).collect();
            (Image::from_clamped(size, noisy).expect("sized"), scene.image.clone())
        }
        TaskKind::Derain => {
            let streaks = rain_field(&mut rng, size);
            let mut rainy = clean.to_vec();
            for c in 0..CHANNELS {
                for i in 0..n {
                    let v = rainy[c * n + i];
                    rainy[c * n + i] = v + streaks[i] * (1.0 - v);
                }
            }
            (Image::from_clamped(size, rainy).expect("sized"), scene.image.clone())
        }
        TaskKind::Lowlight => {
            let dark = clean.iter().map(|&v| v.powf(LOWLIGHT_GAMMA) * LOWLIGHT_SCALE).collect();
            (Image::from_clamped(size, dark).expect("sized"), scene.image.clone())
        }
        TaskKind::Segmentation => {
            let palette = Palette::default();
            let mut labels = vec![0.0; CHANNELS * n];
            for (i, &cls) in scene.classes.iter().enumerate() {
                let col = palette.colors[cls as usize];
                for c in 0..CHANNELS {
                    labels[c * n + i] = col[c];
                }
            }
            (scene.image.clone(), Image::new(size, labels).expect("palette in range"))
        }
        TaskKind::Depth => {
            let mut gray = vec![0.0; CHANNELS * n];
            for c in 0..CHANNELS {
                gray[c * n..(c + 1) * n].copy_from_slice(&scene.depth);
            }
            (scene.image.clone(), Image::new(size, gray).expect("depth in range"))
        }
    };
    TaskSample {
        input,
        target,
        task,
        seed,
    }
}

/// Bright diagonal streaks, intensity in `[0,1]` per pixel.
fn rain_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let n = size * size;
    let mut field = vec![0.0f32; n];
    let drops = (n as f32 * 0.02).ceil() as usize;
    let slant = rng.gen_range(0.3..0.7f32);
    for _ in 0..drops {
        let x0 = rng.gen_range(0.0..size as f32);
        let y0 = rng.gen_range(0.0..size as f32);
        let len = rng.gen_range(4.0..9.0f32);
        let strength = rng.gen_range(0.4..0.7f32);
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f32 * 0.5;
            let x = (x0 + t * slant) as isize;
            let y = (y0 + t) as isize;
            if (0..size as isize).contains(&x) && (0..size as isize).contains(&y) {
                let i = y as usize * size + x as usize;
                field[i] = field[i].max(strength);
            }
        }
    }
    field
}

/// `10·log10(1/MSE)`, capped at 99 dB.
pub fn psnr(pred: &Image, target: &Image) -> Result<Metric, TaskError> {
    let mse = pred.mse(target)?;
    let value = if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    };
    Ok(Metric {
        kind: MetricKind::Psnr,
        value,
    })
}

/// Mean IoU over the classes present in `target`, after nearest-color decoding.
pub fn miou(pred: &Image, target: &Image, palette: &Palette) -> Result<Metric, TaskError> {
    if palette.colors.is_empty() {
        return Err(TaskError::EmptyPalette);
    }
    if pred.size() != target.size() {
        return Err(ImageError::SizeMismatch(pred.size(), target.size()).into());
    }
    let k = palette.colors.len();
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    let mut present = vec![false; k];
    let size = pred.size();
    for y in 0..size {
        for x in 0..size {
            let p = palette.decode(pred.pixel(y, x));
            let t = palette.decode(target.pixel(y, x));
            present[t] = true;
            if p == t {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[t] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..k)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(Metric {
        kind: MetricKind::Miou,
        value: ious.iter().sum::<f64>() / ious.len() as f64,
    })
}

/// Mean `|d̂ − d| / d` over target pixels with `d > 0.01`, on luminance.
pub fn a_rel(pred: &Image, target: &Image) -> Result<Metric, TaskError> {
    if pred.size() != target.size() {
        return Err(ImageError::SizeMismatch(pred.size(), target.size()).into());
    }
    let p = pred.luminance();
    let t = target.luminance();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (&dp, &dt) in p.iter().zip(&t) {
        if dt > DEPTH_EPS {
            total += ((dp - dt).abs() / dt) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TaskError::NoValidDepth);
    }
    Ok(Metric {
        kind: MetricKind::ARel,
        value: total / count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(size: usize, v: f32) -> Image {
        Image::filled(size, v)
    }

    #[test]
    fn generation_is_deterministic() {
        for task in TaskKind::ALL {
            assert_eq!(generate(task, 42, 32), generate(task, 42, 32));
            let s = generate(task, 42, 32);
            assert!(s.input.data().iter().chain(s.target.data()).all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(generate(TaskKind::Denoise, 1, 32).target, generate(TaskKind::Denoise, 2, 32).target);
    }

    #[test]
    fn segmentation_targets_use_palette_colors_only() {
        let palette = Palette::default();
        for seed in 0..20 {
            let s = generate(TaskKind::Segmentation, seed, 32);
            for y in 0..32 {
                for x in 0..32 {
                    assert!(palette.colors.contains(&s.target.pixel(y, x)));
                }
            }
        }
    }

    #[test]
    fn palette_is_well_separated_and_decodes_itself() {
        let palette = Palette::default();
        assert!(palette.min_pairwise_distance() >= 0.5);
        for (i, &c) in palette.colors.iter().enumerate() {
            assert_eq!(palette.decode(c), i);
        }
    }

    #[test]
    fn denoise_inputs_are_degraded() {
        let mean: f64 = (0..100)
            .map(|seed| {
                let s = generate(TaskKind::Denoise, seed, 32);
                psnr(&s.input, &s.target).unwrap().value
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean < 30.0, "mean input PSNR {mean}");
    }

    #[test]
    fn depth_background_is_far() {
        let scene = render_scene(3, 32);
        let s = generate(TaskKind::Depth, 3, 32);
        let lum = s.target.luminance();
        for (i, &cls) in scene.classes.iter().enumerate() {
            if cls == 0 {
                assert!((lum[i] - BACKGROUND_DEPTH).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn psnr_values() {
        let t = constant(4, 0.5);
        assert_eq!(psnr(&t, &t).unwrap().value, 99.0);
        assert!((psnr(&constant(4, 0.6), &t).unwrap().value - 20.0).abs() < 1e-5);
        // 0.5 offset → MSE 0.25 → 10·log10(4)
        let v = psnr(&constant(4, 1.0), &t).unwrap().value;
        assert!((v - 6.020_599_913_279_624).abs() < 1e-6);
        assert!(psnr(&constant(4, 0.5), &constant(2, 0.5)).is_err());
    }

    #[test]
    fn miou_values() {
        let palette = Palette::default();
        let red = Image::new(2, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(miou(&red, &red, &palette).unwrap().value, 1.0);
        let green = Image::new(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(miou(&green, &red, &palette).unwrap().value, 0.0);
        // left half red (A), right half green (B); prediction all red
        let half = Image::new(2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((miou(&red, &half, &palette).unwrap().value - 0.25).abs() < 1e-12);
        assert!(matches!(
            miou(&red, &red, &Palette { colors: vec![] }),
            Err(TaskError::EmptyPalette)
        ));
    }

    #[test]
    fn a_rel_values() {
        let t = constant(4, 0.5);
        assert_eq!(a_rel(&t, &t).unwrap().value, 0.0);
        assert!((a_rel(&constant(4, 0.6), &t).unwrap().value - 0.2).abs() < 1e-6);
        // half 0.5/0.5, half 0.2 target with 0.3 prediction
        let mut td = vec![0.5f32; 3 * 4];
        let mut pd = vec![0.5f32; 3 * 4];
        for c in 0..3 {
            for i in 2..4 {
                td[c * 4 + i] = 0.2;
                pd[c * 4 + i] = 0.3;
            }
        }
        let v = a_rel(&Image::new(2, pd).unwrap(), &Image::new(2, td).unwrap()).unwrap().value;
        assert!((v - 0.25).abs() < 1e-6);
        assert!(matches!(a_rel(&t, &constant(4, 0.0)), Err(TaskError::NoValidDepth)));
    }

    #[test]
    fn perturbing_away_from_target_never_helps() {
        let s = generate(TaskKind::Denoise, 9, 16);
        let away = |amount: f32| {
            let data = s.target.data().iter().map(|&v| if v > 0.5 { v - amount } else { v + amount }).collect();
            Image::new(16, data).unwrap()
        };
        let p1 = psnr(&away(0.05), &s.target).unwrap().value;
        let p2 = psnr(&away(0.1), &s.target).unwrap().value;
        assert!(p2 < p1);

        let d = generate(TaskKind::Depth, 9, 16);
        let shift = |amount: f32| Image::from_clamped(16, d.target.data().iter().map(|&v| v + amount).collect()).unwrap();
        assert!(a_rel(&shift(0.1), &d.target).unwrap().value >= a_rel(&shift(0.05), &d.target).unwrap().value);
    }

    #[test]
    fn names_parse() {
        for t in TaskKind::ALL {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert!("colorize".parse::<TaskKind>().is_err());
    }
}
