//! Clean pre-training and the few-shot corrupted fine-tuning baseline.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, Real, Tape, Tensor, TensorError};
use crate::canvas::{self, CellInput, CellPosition, MaskSpec};
use crate::corruptions::{self, CorruptionError, CorruptionKind, CorruptionSpec};
use crate::image::Image;
use crate::model::{self, ModelConfig, ModelError, Params};
use crate::tasks::{self, TaskKind};

pub const FEW_SHOT_COUNTS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub task_mix: Vec<TaskKind>,
    pub held_out: Option<TaskKind>,
    pub beta: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            batch_size: 1,
            task_mix: TaskKind::ALL.to_vec(),
            held_out: None,
            beta: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Task mix with the held-out task removed.
    pub fn effective_mix(&self) -> Vec<TaskKind> {
        self.task_mix
            .iter()
            .copied()
            .filter(|t| Some(*t) != self.held_out)
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.beta > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be ≥ 0 and beta > 0".into()));
        }
        if self.effective_mix().is_empty() {
            return Err(TrainError::InvalidConfig("task mix is empty".into()));
        }
        Ok(())
    }
}

pub struct PretrainOutcome<T> {
    pub params: Params<T>,
    pub losses: Vec<f64>,
    /// How many samples of each task were drawn.
    pub task_counts: BTreeMap<TaskKind, usize>,
    /// Task of the first episode of each step.
    pub step_tasks: Vec<TaskKind>,
}

/// `step,loss` CSV.
pub fn write_loss_trace<W: Write>(mut w: W, losses: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l:.8}", i + 1)?;
    }
    Ok(())
}

/// One supervised inpainting example: prompt pair plus query pair.
struct Episode<'a> {
    x: &'a Image,
    y: &'a Image,
    x_q: &'a Image,
    y_q: &'a Image,
}

/// Accumulates mean smooth-L1 gradients of the masked query cell over a batch.
fn batch_gradients<T: Real>(
    params: &Params<T>,
    episodes: &[Episode<'_>],
    beta: f64,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let cfg = *params.config();
    let mut sums: Vec<Tensor<T>> = params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
    let mut total = 0.0;
    let scale = T::from_f64(1.0 / episodes.len() as f64);
    for ep in episodes {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, Some(model::Selector::All));
        let mask = MaskSpec::new(CellPosition::BottomRight, cfg.cell_size, cfg.patch_size).map_err(ModelError::from)?;
        let input = canvas::assemble_on_tape(
            &mut tape,
            [CellInput::Image(ep.x), CellInput::Image(ep.y), CellInput::Image(ep.x_q), CellInput::Empty],
            cfg.cell_size,
        )
        .map_err(ModelError::from)?;
        let out = model::forward(params, &vars, &mut tape, input, &mask)?;
        let pred = canvas::extract_on_tape(&mut tape, out, cfg.cell_size, CellPosition::BottomRight)
            .map_err(ModelError::from)?;
        let target = tape.constant(ep.y_q.to_tensor());
        let loss = tape.smooth_l1(pred, target, T::from_f64(beta), None)?;
        total += tape.value(loss).item()?.as_f64();
        tape.backward(loss)?;
        for (sum, &v) in sums.iter_mut().zip(vars.vars()) {
            if let Some(g) = tape.grad(v) {
                for (s, &gv) in sum.data_mut().iter_mut().zip(g.data()) {
                    *s = *s + gv * scale;
                }
            }
        }
    }
    Ok((total / episodes.len() as f64, sums))
}

fn apply_update<T: Real>(params: &mut Params<T>, opt: &mut AdamW<T>, grads: &[Tensor<T>]) -> Result<(), TrainError> {
    let mut tensors: Vec<&mut Tensor<T>> = params.entries_mut().iter_mut().map(|e| &mut e.tensor).collect();
    let refs: Vec<&Tensor<T>> = grads.iter().collect();
    opt.step(&mut tensors, &refs)?;
    Ok(())
}

fn train_step<T: Real>(
    params: &mut Params<T>,
    opt: &mut AdamW<T>,
    episodes: &[Episode<'_>],
    beta: f64,
    step: usize,
) -> Result<f64, TrainError> {
    let (loss, grads) = match batch_gradients(params, episodes, beta) {
        Err(TrainError::Tensor(TensorError::NonFinite { .. })) => return Err(TrainError::Diverged { step }),
        other => other?,
    };
    if !loss.is_finite() {
        return Err(TrainError::Diverged { step });
    }
    match apply_update(params, opt, &grads) {
        Err(TrainError::Tensor(TensorError::NonFinite { .. })) => Err(TrainError::Diverged { step }),
        other => other.map(|_| loss),
    }
}

/// Masked-inpainting pre-training on clean procedural tasks.
pub fn pretrain<T: Real>(model_config: &ModelConfig, config: &PretrainConfig) -> Result<PretrainOutcome<T>, TrainError> {
    pretrain_from(model::init(model_config, config.seed)?, config)
}

/// Pre-training continued from existing weights.
pub fn pretrain_from<T: Real>(mut params: Params<T>, config: &PretrainConfig) -> Result<PretrainOutcome<T>, TrainError> {
    config.validate()?;
    let mix = config.effective_mix();
    let c = params.config().cell_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr));
    let mut losses = Vec::with_capacity(config.steps);
    let mut task_counts = BTreeMap::new();
    let mut step_tasks = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut samples = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let task = mix[rng.gen_range(0..mix.len())];
            if samples.is_empty() {
                step_tasks.push(task);
            }
            *task_counts.entry(task).or_insert(0) += 2;
            let prompt = tasks::generate(task, rng.gen(), c);
            let query = tasks::generate(task, rng.gen(), c);
            samples.push((prompt, query));
        }
        let episodes: Vec<Episode<'_>> = samples
            .iter()
            .map(|(p, q)| Episode {
                x: &p.input,
                y: &p.target,
                x_q: &q.input,
                y_q: &q.target,
            })
            .collect();
        losses.push(train_step(&mut params, &mut opt, &episodes, config.beta, step)?);
    }
    Ok(PretrainOutcome {
        params,
        losses,
        task_counts,
        step_tasks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub shots: usize,
    pub task: TaskKind,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    pub seed: u64,
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !FEW_SHOT_COUNTS.contains(&self.shots) {
            return Err(TrainError::InvalidConfig(format!(
                "shots must be one of {FEW_SHOT_COUNTS:?}, got {}",
                self.shots
            )));
        }
        CorruptionSpec::new(self.corruption, self.severity, 0)?;
        Ok(())
    }

    /// The `shots` labeled training pairs: corrupted inputs, clean targets.
    pub fn training_pairs(&self, cell_size: usize) -> Result<Vec<(Image, Image)>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        (0..self.shots)
            .map(|_| {
                let sample = tasks::generate(self.task, rng.gen(), cell_size);
                let spec = CorruptionSpec::new(self.corruption, self.severity, rng.gen())?;
                Ok((corruptions::apply(&sample.input, &spec)?, sample.target))
            })
            .collect()
    }
}

/// Fine-tunes all of `theta0` on `shots` corrupted pairs for a fixed step
/// budget. Each step's query cycles through the pairs; its prompt is a
/// uniformly drawn pair from the same set.
pub fn fewshot_finetune<T: Real>(theta0: &Params<T>, config: &FewShotConfig) -> Result<Params<T>, TrainError> {
    config.validate()?;
    let pairs = config.training_pairs(theta0.config().cell_size)?;
    let mut params = theta0.clone();
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    for step in 0..config.steps {
        let (x_q, y_q) = &pairs[step % pairs.len()];
        let (x, y) = &pairs[rng.gen_range(0..pairs.len())];
        let episode = Episode { x, y, x_q, y_q };
        train_step(&mut params, &mut opt, &[episode], config.beta, step)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pretrain(steps: usize, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps,
            seed,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = ModelConfig::tiny();
        let out = pretrain::<f32>(&cfg, &tiny_pretrain(0, 4)).unwrap();
        assert_eq!(out.params, model::init::<f32>(&cfg, 4).unwrap());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = pretrain::<f32>(&cfg, &tiny_pretrain(5, 1)).unwrap();
        let b = pretrain::<f32>(&cfg, &tiny_pretrain(5, 1)).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn held_out_task_is_never_drawn() {
        let cfg = ModelConfig::tiny();
        let pc = PretrainConfig {
            held_out: Some(TaskKind::Depth),
            ..tiny_pretrain(30, 2)
        };
        let out = pretrain::<f32>(&cfg, &pc).unwrap();
        assert_eq!(out.task_counts.get(&TaskKind::Depth).copied().unwrap_or(0), 0);
        assert_eq!(out.task_counts.values().sum::<usize>(), 60);
    }

    #[test]
    fn config_validation() {
        let mut pc = PretrainConfig {
            task_mix: vec![TaskKind::Depth],
            held_out: Some(TaskKind::Depth),
            ..PretrainConfig::default()
        };
        assert!(pc.validate().is_err());
        pc.held_out = None;
        pc.batch_size = 0;
        assert!(pc.validate().is_err());
    }

    fn fewshot(shots: usize, steps: usize) -> FewShotConfig {
        FewShotConfig {
            shots,
            task: TaskKind::Denoise,
            corruption: CorruptionKind::GaussianNoise,
            severity: 3,
            steps,
            lr: 1e-3,
            beta: 1.0,
            seed: 8,
        }
    }

    #[test]
    fn fewshot_zero_steps_is_identity() {
        let theta0 = model::init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        assert_eq!(fewshot_finetune(&theta0, &fewshot(1, 0)).unwrap(), theta0);
    }

    #[test]
    fn fewshot_is_deterministic_and_validated() {
        let theta0 = model::init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let a = fewshot_finetune(&theta0, &fewshot(4, 3)).unwrap();
        let b = fewshot_finetune(&theta0, &fewshot(4, 3)).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), theta0.digest());
        assert!(fewshot_finetune(&theta0, &fewshot(3, 1)).is_err());
    }

    #[test]
    fn fewshot_pairs_have_clean_targets() {
        let pairs = fewshot(2, 0).training_pairs(32).unwrap();
        assert_eq!(pairs.len(), 2);
        for (x, y) in &pairs {
            assert!(x.mse(y).unwrap() > 0.0);
        }
    }

    #[test]
    fn loss_trace_csv() {
        let mut buf = Vec::new();
        write_loss_trace(&mut buf, &[0.5, 0.25]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n1,0.50000000\n2,0.25000000\n");
    }
}
