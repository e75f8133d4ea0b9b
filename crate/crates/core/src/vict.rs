//! Per-sample test-time tuning through prompt/test role flipping.
//!
//! For a prompt pair `(x, y)` and test input `x_t` the model first inpaints
//! `ŷ_t` from `(x, y, x_t, ∅)`, then reconstructs `ŷ` from
//! `(x, ∅, x_t, ŷ_t)`. The smooth-L1 distance between `ŷ` and `y` is
//! minimized for a few steps, starting from the pre-trained weights every
//! time, and the adapted weights make the final prediction. Gradients flow
//! through both passes unless [`VictConfig::detach`] is set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, Real, Tape, Tensor, TensorError, Var};
use crate::canvas::{self, CellInput, CellPosition, MaskSpec};
use crate::corruptions::{self, CorruptionError, CorruptionSpec};
use crate::image::Image;
use crate::model::{self, ModelError, ParamVars, Params, Selector};
use crate::tasks::{self, TaskKind};

pub const PAPER_STEPS: usize = 60;
pub const SWEEP_STEPS: usize = 20;
pub const PAPER_LR: f64 = 1e-6;
pub const TOY_LR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum VictError {
    #[error("one-shot prompts need a corruption spec")]
    MissingCorruption,
    #[error("prompt set is empty")]
    EmptyPrompt,
    #[error("non-finite cycle loss at step {step} (params {digest})")]
    NonFinite { step: usize, digest: String },
    #[error("unknown setting `{0}`")]
    UnknownSetting(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where the task prompt comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Clean prompt from the training distribution.
    ZeroShot,
    /// Prompt corrupted like the test input.
    OneShot,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::ZeroShot => "zero_shot",
            Setting::OneShot => "one_shot",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = VictError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "zero_shot" => Ok(Setting::ZeroShot),
            "one" | "one_shot" => Ok(Setting::OneShot),
            other => Err(VictError::UnknownSetting(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Clean,
    Corrupted(CorruptionSpec),
}

/// Support pairs; only the first is used.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pairs: Vec<(Image, Image)>,
    pub provenance: Provenance,
}

impl PromptSet {
    pub fn new(pairs: Vec<(Image, Image)>, provenance: Provenance) -> Result<Self, VictError> {
        if pairs.is_empty() {
            return Err(VictError::EmptyPrompt);
        }
        Ok(Self { pairs, provenance })
    }

    pub fn single(x: Image, y: Image) -> Self {
        Self {
            pairs: vec![(x, y)],
            provenance: Provenance::Clean,
        }
    }

    pub fn input(&self) -> &Image {
        &self.pairs[0].0
    }

    pub fn output(&self) -> &Image {
        &self.pairs[0].1
    }

    pub fn pairs(&self) -> &[(Image, Image)] {
        &self.pairs
    }
}

/// A test input with its held-out label.
///
/// Adaptation only ever receives [`TestSample::input`].
#[derive(Clone, Debug, PartialEq)]
pub struct TestSample {
    x_t: Image,
    y_t: Image,
}

impl TestSample {
    pub fn new(x_t: Image, y_t: Image) -> Self {
        Self { x_t, y_t }
    }

    pub fn input(&self) -> &Image {
        &self.x_t
    }

    pub fn ground_truth(&self) -> &Image {
        &self.y_t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictConfig {
    pub steps: usize,
    pub lr: f64,
    pub selector: Selector,
    pub beta: f64,
    pub setting: Setting,
    /// Stop the gradient at `ŷ_t` between the two passes.
    pub detach: bool,
}

impl Default for VictConfig {
    fn default() -> Self {
        Self {
            steps: PAPER_STEPS,
            lr: TOY_LR,
            selector: Selector::Encoder,
            beta: 1.0,
            setting: Setting::ZeroShot,
            detach: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationResult {
    pub y_t_hat: Image,
    pub loss_trace: Vec<f64>,
    pub adapted_params_digest: String,
}

/// Seed of the prompt's corruption, decorrelated from the test draw.
fn prompt_corruption_seed(seed: u64, test_seed: u64) -> u64 {
    let mut z = seed ^ test_seed.rotate_left(29) ^ 0x6a09_e667_f3bc_c909;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws a fresh prompt pair for `task`. In the one-shot setting the input is
/// corrupted with the test corruption's kind and severity under an
/// independent seed; the output is never corrupted.
pub fn select_prompt(
    task: TaskKind,
    setting: Setting,
    corruption: Option<&CorruptionSpec>,
    seed: u64,
    cell_size: usize,
) -> Result<PromptSet, VictError> {
    let sample = tasks::generate(task, seed, cell_size);
    match setting {
        Setting::ZeroShot => Ok(PromptSet::new(vec![(sample.input, sample.target)], Provenance::Clean)?),
        Setting::OneShot => {
            let test = corruption.ok_or(VictError::MissingCorruption)?;
            let spec = CorruptionSpec::new(test.kind, test.severity, prompt_corruption_seed(seed, test.seed))?;
            let x = corruptions::apply(&sample.input, &spec)?;
            Ok(PromptSet::new(vec![(x, sample.target)], Provenance::Corrupted(spec))?)
        }
    }
}

/// Anything that can fill the masked cell of a canvas on a tape.
pub trait Inpainter<T: Real> {
    fn cell_size(&self) -> usize;
    fn patch_size(&self) -> usize;
    fn inpaint(&self, tape: &mut Tape<T>, canvas: Var, mask: &MaskSpec) -> Result<Var, ModelError>;
}

/// [`Params`] bound to their handles on one tape.
pub struct BoundModel<'a, T> {
    pub params: &'a Params<T>,
    pub vars: &'a ParamVars,
}

impl<T: Real> Inpainter<T> for BoundModel<'_, T> {
    fn cell_size(&self) -> usize {
        self.params.config().cell_size
    }

    fn patch_size(&self) -> usize {
        self.params.config().patch_size
    }

    fn inpaint(&self, tape: &mut Tape<T>, canvas: Var, mask: &MaskSpec) -> Result<Var, ModelError> {
        model::forward(self.params, self.vars, tape, canvas, mask)
    }
}

/// Records the two-pass cycle on `tape` and returns the scalar loss node.
pub fn cycle_loss_on_tape<T: Real, M: Inpainter<T>>(
    model: &M,
    tape: &mut Tape<T>,
    prompt: (&Image, &Image),
    x_t: &Image,
    beta: f64,
    detach: bool,
) -> Result<Var, VictError> {
    let (x, y) = prompt;
    let c = model.cell_size();
    let p = model.patch_size();

    let mask = MaskSpec::new(CellPosition::BottomRight, c, p).map_err(ModelError::from)?;
    let canvas = canvas::assemble_on_tape(
        tape,
        [CellInput::Image(x), CellInput::Image(y), CellInput::Image(x_t), CellInput::Empty],
        c,
    )
    .map_err(ModelError::from)?;
    let out = model.inpaint(tape, canvas, &mask)?;
    let y_t_hat = canvas::extract_on_tape(tape, out, c, CellPosition::BottomRight).map_err(ModelError::from)?;
    let mut y_t_hat = tape.clamp(y_t_hat, T::zero(), T::one())?;
    if detach {
        y_t_hat = tape.detach(y_t_hat);
    }

    let mask = MaskSpec::new(CellPosition::TopRight, c, p).map_err(ModelError::from)?;
    let flipped = canvas::assemble_on_tape(
        tape,
        [CellInput::Image(x), CellInput::Empty, CellInput::Image(x_t), CellInput::Node(y_t_hat)],
        c,
    )
    .map_err(ModelError::from)?;
    let out = model.inpaint(tape, flipped, &mask)?;
    let y_hat = canvas::extract_on_tape(tape, out, c, CellPosition::TopRight).map_err(ModelError::from)?;
    let target = tape.constant(y.to_tensor());
    Ok(tape.smooth_l1(y_hat, target, T::from_f64(beta), None)?)
}

/// Cycle loss value for fixed weights.
pub fn cycle_loss<T: Real>(
    params: &Params<T>,
    prompt: (&Image, &Image),
    x_t: &Image,
    beta: f64,
) -> Result<f64, VictError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, None);
    let bound = BoundModel { params, vars: &vars };
    let loss = cycle_loss_on_tape(&bound, &mut tape, prompt, x_t, beta, false)?;
    Ok(tape.value(loss).item()?.as_f64())
}

/// Cycle loss and its gradient for every tensor in `selector`'s group
/// (zeros for tensors the loss does not reach), in layout order.
pub fn cycle_loss_and_grads<T: Real>(
    params: &Params<T>,
    prompt: (&Image, &Image),
    x_t: &Image,
    beta: f64,
    selector: Selector,
    detach: bool,
) -> Result<(f64, Vec<Option<Tensor<T>>>), VictError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, Some(selector));
    let bound = BoundModel { params, vars: &vars };
    let loss = cycle_loss_on_tape(&bound, &mut tape, prompt, x_t, beta, detach)?;
    tape.backward(loss)?;
    let grads = params
        .entries()
        .iter()
        .zip(vars.vars())
        .map(|(e, &v)| {
            selector
                .includes(e.group)
                .then(|| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(e.tensor.shape())))
        })
        .collect();
    Ok((tape.value(loss).item()?.as_f64(), grads))
}

/// Tunes a private copy of `theta0` on the cycle loss for `config.steps`
/// steps, then predicts `x_t`'s output with the tuned copy.
pub fn adapt_and_predict<T: Real>(
    theta0: &Params<T>,
    prompt: &PromptSet,
    x_t: &Image,
    config: &VictConfig,
) -> Result<AdaptationResult, VictError> {
    let mut working = theta0.clone();
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr));
    let mut loss_trace = Vec::with_capacity(config.steps);
    let (x, y) = (prompt.input(), prompt.output());

    for step in 0..config.steps {
        let (loss, grads) =
            match cycle_loss_and_grads(&working, (x, y), x_t, config.beta, config.selector, config.detach) {
                Ok(v) => v,
                Err(VictError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(VictError::NonFinite {
                        step,
                        digest: working.digest_hex(),
                    })
                }
                Err(e) => return Err(e),
            };
        if !loss.is_finite() {
            return Err(VictError::NonFinite {
                step,
                digest: working.digest_hex(),
            });
        }
        loss_trace.push(loss);
        let grads: Vec<Tensor<T>> = grads.into_iter().flatten().collect();
        let mut selected: Vec<&mut Tensor<T>> = working
            .entries_mut()
            .iter_mut()
            .filter(|e| config.selector.includes(e.group))
            .map(|e| &mut e.tensor)
            .collect();
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        opt.step(&mut selected, &grad_refs)?;
    }

    let y_t_hat = model::predict(&working, x, y, x_t)?;
    Ok(AdaptationResult {
        y_t_hat,
        loss_trace,
        adapted_params_digest: working.digest_hex(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptions::CorruptionKind;
    use crate::model::{init, ModelConfig, ParamGroup};

    /// Fills the masked cell with a copy of the cell to its left (same row).
    struct RowCopier {
        cell: usize,
        patch: usize,
    }

    impl Inpainter<f64> for RowCopier {
        fn cell_size(&self) -> usize {
            self.cell
        }
        fn patch_size(&self) -> usize {
            self.patch
        }
        fn inpaint(&self, tape: &mut Tape<f64>, canvas: Var, mask: &MaskSpec) -> Result<Var, ModelError> {
            let c = self.cell;
            let read = |tape: &mut Tape<f64>, pos| canvas::extract_on_tape(tape, canvas, c, pos);
            let tl = read(tape, CellPosition::TopLeft)?;
            let bl = read(tape, CellPosition::BottomLeft)?;
            let tr = read(tape, CellPosition::TopRight)?;
            let br = read(tape, CellPosition::BottomRight)?;
            let cells = match mask.masked {
                CellPosition::TopRight => [tl, tl, bl, br],
                CellPosition::BottomRight => [tl, tr, bl, bl],
                _ => [tl, tr, bl, br],
            };
            Ok(canvas::assemble_on_tape(tape, cells.map(CellInput::Node), c)?)
        }
    }

    #[test]
    fn copier_oracle_has_zero_cycle_loss() {
        let x = tasks::generate(TaskKind::Segmentation, 1, 8).input;
        let x_t = tasks::generate(TaskKind::Segmentation, 2, 8).input;
        let stub = RowCopier { cell: 8, patch: 4 };
        let mut tape = Tape::new();
        // identity task: y = x
        let loss = cycle_loss_on_tape(&stub, &mut tape, (&x, &x), &x_t, 1.0, false).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn loss_is_nonnegative() {
        let p = init::<f64>(&ModelConfig::tiny(), 1).unwrap();
        for seed in 0..3 {
            let s = tasks::generate(TaskKind::Denoise, seed, 8);
            let q = tasks::generate(TaskKind::Denoise, seed + 10, 8);
            assert!(cycle_loss(&p, (&s.input, &s.target), &q.input, 1.0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn prompt_selection() {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1, 99).unwrap();
        let clean = tasks::generate(TaskKind::Denoise, 5, 32);
        let zero = select_prompt(TaskKind::Denoise, Setting::ZeroShot, None, 5, 32).unwrap();
        assert_eq!(zero.input(), &clean.input);
        assert_eq!(zero.provenance, Provenance::Clean);
        let one = select_prompt(TaskKind::Denoise, Setting::OneShot, Some(&spec), 5, 32).unwrap();
        assert!(one.input().mse(&clean.input).unwrap() > 0.0);
        assert_eq!(one.output(), &clean.target);
        match one.provenance {
            Provenance::Corrupted(s) => {
                assert_eq!((s.kind, s.severity), (spec.kind, spec.severity));
                assert_ne!(s.seed, spec.seed);
            }
            Provenance::Clean => panic!("one-shot prompt marked clean"),
        }
        assert!(matches!(
            select_prompt(TaskKind::Denoise, Setting::OneShot, None, 5, 32),
            Err(VictError::MissingCorruption)
        ));
        let other = select_prompt(TaskKind::Denoise, Setting::ZeroShot, None, 6, 32).unwrap();
        assert_ne!(other.input(), zero.input());
    }

    #[test]
    fn zero_steps_reduce_to_frozen_inference() {
        let p = init::<f32>(&ModelConfig::tiny(), 2).unwrap();
        let prompt = select_prompt(TaskKind::Denoise, Setting::ZeroShot, None, 1, 8).unwrap();
        let x_t = tasks::generate(TaskKind::Denoise, 2, 8).input;
        let cfg = VictConfig {
            steps: 0,
            ..VictConfig::default()
        };
        let r = adapt_and_predict(&p, &prompt, &x_t, &cfg).unwrap();
        assert!(r.loss_trace.is_empty());
        assert_eq!(r.y_t_hat, model::predict(&p, prompt.input(), prompt.output(), &x_t).unwrap());
        assert_eq!(r.adapted_params_digest, p.digest_hex());
    }

    #[test]
    fn encoder_selector_leaves_decoder_untouched() {
        let p = init::<f64>(&ModelConfig::tiny(), 3).unwrap();
        let prompt = select_prompt(TaskKind::Denoise, Setting::ZeroShot, None, 1, 8).unwrap();
        let x_t = tasks::generate(TaskKind::Denoise, 2, 8).input;
        let (_, grads) =
            cycle_loss_and_grads(&p, (prompt.input(), prompt.output()), &x_t, 1.0, Selector::Encoder, false).unwrap();
        for (e, g) in p.entries().iter().zip(&grads) {
            assert_eq!(g.is_some(), e.group == ParamGroup::Encoder, "{}", e.name);
        }
    }

    #[test]
    fn setting_names_parse() {
        assert_eq!("zero".parse::<Setting>().unwrap(), Setting::ZeroShot);
        assert_eq!("one_shot".parse::<Setting>().unwrap(), Setting::OneShot);
        assert!("two".parse::<Setting>().is_err());
    }
}
