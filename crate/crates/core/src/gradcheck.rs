//! Central finite-difference check of the cycle-loss gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::image::Image;
use crate::model::{self, ModelConfig, Params, Selector};
use crate::tasks::{self, TaskKind};
use crate::vict::{self, VictError};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Jitter added to freshly initialized weights before checking. At init
/// scale many attention gradients sit near 1e-9, where the central
/// difference is dominated by roundoff.
pub const JITTER_STD: f64 = 0.3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every scalar of every encoder tensor on the tiny configuration.
pub fn run(seed: u64) -> Result<GradCheckReport, VictError> {
    let cfg = ModelConfig::tiny();
    let params = jittered(model::init::<f64>(&cfg, seed)?, seed, JITTER_STD);
    let prompt = tasks::generate(TaskKind::Denoise, seed.wrapping_add(1), cfg.cell_size);
    let query = tasks::generate(TaskKind::Denoise, seed.wrapping_add(2), cfg.cell_size);
    check_cycle_loss(&params, (&prompt.input, &prompt.target), &query.input, Selector::Encoder)
}

/// Adds independent `N(0, std²)` noise to every weight.
pub fn jittered(mut params: Params<f64>, seed: u64, std: f64) -> Params<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let normal = Normal::new(0.0, std).expect("finite std");
    for e in params.entries_mut() {
        for v in e.tensor.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    params
}

/// Compares analytic and central-difference gradients of the cycle loss for
/// every tensor in `selector`'s group.
pub fn check_cycle_loss(
    params: &Params<f64>,
    prompt: (&Image, &Image),
    x_t: &Image,
    selector: Selector,
) -> Result<GradCheckReport, VictError> {
    let beta = 1.0;
    let (loss, grads) = vict::cycle_loss_and_grads(params, prompt, x_t, beta, selector, false)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        loss,
    };
    for (ti, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for i in 0..grad.len() {
            let original = probe.entries()[ti].tensor.data()[i];
            probe.entries_mut()[ti].tensor.data_mut()[i] = original + STEP;
            let plus = vict::cycle_loss(&probe, prompt, x_t, beta)?;
            probe.entries_mut()[ti].tensor.data_mut()[i] = original - STEP;
            let minus = vict::cycle_loss(&probe, prompt, x_t, beta)?;
            probe.entries_mut()[ti].tensor.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.entries()[ti].name.clone(), i));
            }
        }
    }
    Ok(report)
}

