//! Patch-transformer encoder/decoder for masked canvas inpainting.
//!
//! Pipeline: patchify → linear embed → mask-token substitution → positional
//! embedding → pre-norm encoder blocks → pre-norm decoder blocks → norm →
//! per-patch pixel head → logistic squashing → un-patchify.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::canvas::{self, CanvasError, CellInput, CellPosition, MaskSpec};
use crate::image::{Image, CHANNELS};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("canvas cell size {got} does not match model cell size {expected}")]
    CellSize { expected: usize, got: usize },
    #[error("mask patch grid does not match the model geometry")]
    MaskMismatch,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cell_size: 32,
            patch_size: 8,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Configuration used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            cell_size: 8,
            patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("cell_size", self.cell_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.cell_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "patch size {} does not divide cell size {}",
                self.patch_size, self.cell_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} heads do not divide embed dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Patches per canvas side.
    pub fn grid(&self) -> usize {
        2 * self.cell_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// `key=value` lines, one per field.
    pub fn to_kv_text(&self) -> String {
        format!(
            "cell_size={}\npatch_size={}\nembed_dim={}\nencoder_depth={}\ndecoder_depth={}\nnum_heads={}\nmlp_ratio={}\n",
            self.cell_size,
            self.patch_size,
            self.embed_dim,
            self.encoder_depth,
            self.decoder_depth,
            self.num_heads,
            self.mlp_ratio
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ModelError> {
        let mut map = HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("malformed line `{line}`")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("bad value in `{line}`")))?;
            map.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing key `{k}`")))
        };
        let config = Self {
            cell_size: get("cell_size")?,
            patch_size: get("patch_size")?,
            embed_dim: get("embed_dim")?,
            encoder_depth: get("encoder_depth")?,
            decoder_depth: get("decoder_depth")?,
            num_heads: get("num_heads")?,
            mlp_ratio: get("mlp_ratio")?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

impl ParamGroup {
    pub fn label(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Decoder => 1,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(ParamGroup::Encoder),
            1 => Some(ParamGroup::Decoder),
            _ => None,
        }
    }
}

/// Which parameters test-time updates may touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Encoder,
    All,
}

impl Selector {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            Selector::Encoder => group == ParamGroup::Encoder,
            Selector::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Model weights, in a fixed order determined by the config.
#[derive(Clone, Debug)]
pub struct Params<T> {
    config: ModelConfig,
    entries: Vec<NamedTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> PartialEq for Params<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.entries == other.entries
    }
}

/// Names, groups and shapes of every tensor for `config`.
pub fn layout(config: &ModelConfig) -> Vec<(String, ParamGroup, Vec<usize>)> {
    let d = config.embed_dim;
    let h = d * config.mlp_ratio;
    let pd = config.patch_dim();
    let mut out = vec![
        ("patch_embed.weight".to_string(), ParamGroup::Encoder, vec![pd, d]),
        ("patch_embed.bias".to_string(), ParamGroup::Encoder, vec![d]),
        ("mask_token".to_string(), ParamGroup::Encoder, vec![d]),
        ("pos_embed".to_string(), ParamGroup::Encoder, vec![config.num_patches(), d]),
    ];
    let block = |prefix: String, group: ParamGroup, out: &mut Vec<(String, ParamGroup, Vec<usize>)>| {
        for (suffix, shape) in [
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("attn.qkv.weight", vec![d, 3 * d]),
            ("attn.q_bias", vec![d]),
            ("attn.v_bias", vec![d]),
            ("attn.proj.weight", vec![d, d]),
            ("attn.proj.bias", vec![d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
            ("mlp.fc1.weight", vec![d, h]),
            ("mlp.fc1.bias", vec![h]),
            ("mlp.fc2.weight", vec![h, d]),
            ("mlp.fc2.bias", vec![d]),
        ] {
            out.push((format!("{prefix}.{suffix}"), group, shape));
        }
    };
    for i in 0..config.encoder_depth {
        block(format!("encoder.{i}"), ParamGroup::Encoder, &mut out);
    }
    for i in 0..config.decoder_depth {
        block(format!("decoder.{i}"), ParamGroup::Decoder, &mut out);
    }
    out.extend([
        ("head.norm.gain".to_string(), ParamGroup::Decoder, vec![d]),
        ("head.norm.bias".to_string(), ParamGroup::Decoder, vec![d]),
        ("head.weight".to_string(), ParamGroup::Decoder, vec![d, pd]),
        ("head.bias".to_string(), ParamGroup::Decoder, vec![pd]),
    ]);
    out
}

/// 2D sine-cosine table over the whole canvas, one row per patch.
fn sincos_pos<T: Real>(grid: usize, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            out.extend(sincos_2d::<T>(r, c, dim));
        }
    }
    out
}

fn sincos_2d<T: Real>(r: usize, c: usize, dim: usize) -> Vec<T> {
    let row = dim / 2;
    let mut out = sincos_1d::<T>(r, row);
    out.extend(sincos_1d::<T>(c, dim - row));
    out
}

fn sincos_1d<T: Real>(pos: usize, dim: usize) -> Vec<T> {
    let freqs = (dim / 2).max(1);
    (0..dim)
        .map(|k| {
            let angle = pos as f64 / 10000f64.powf((k % freqs) as f64 / freqs as f64);
            T::from_f64(if k < freqs { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Truncated normal (±2σ) weights, zero biases, unit layer-norm gains.
/// Positional embeddings start from a sine-cosine table.
pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<Params<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = layout(config)
        .into_iter()
        .map(|(name, group, shape)| {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gain") {
                vec![T::one(); numel]
            } else if name.ends_with("bias") {
                vec![T::zero(); numel]
            } else if name == "pos_embed" {
                sincos_pos(config.grid(), config.embed_dim)
            } else {
                (0..numel)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break T::from_f64(z * INIT_STD);
                        }
                    })
                    .collect()
            };
            NamedTensor {
                name,
                group,
                tensor: Tensor::new(shape, data).expect("layout shapes are valid"),
            }
        })
        .collect();
    Params::from_entries(*config, entries)
}

impl<T: Real> Params<T> {
    /// Validates names and shapes against the config's layout.
    pub fn from_entries(config: ModelConfig, entries: Vec<NamedTensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != entries.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, group, shape), e) in expected.iter().zip(&entries) {
            if &e.name != name || e.group != *group || e.tensor.shape() != shape.as_slice() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor `{}` does not match layout entry `{name}` {shape:?}",
                    e.name
                )));
            }
        }
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Ok(Self {
            config,
            entries,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[NamedTensor<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config,
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, group labels, shapes and values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            h.update([e.group.label()]);
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every tensor on `tape`; tensors in `trainable` groups get grads.
    pub fn register(&self, tape: &mut Tape<T>, trainable: Option<Selector>) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let grad = trainable.is_some_and(|s| s.includes(e.group));
                tape.leaf(e.tensor.clone(), grad)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tensors selected by `selector`, in layout order.
pub fn param_group<T: Real>(params: &Params<T>, selector: Selector) -> Vec<&NamedTensor<T>> {
    params.entries.iter().filter(|e| selector.includes(e.group)).collect()
}

/// Tape handles for a registered [`Params`], in layout order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Index maps between the canvas array and the patch-token matrix.
fn patchify_index(config: &ModelConfig) -> Arc<[usize]> {
    let (p, g) = (config.patch_size, config.grid());
    let side = g * p;
    let mut index = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for c in 0..CHANNELS {
                for py in 0..p {
                    for px in 0..p {
                        index.push((c * side + pr * p + py) * side + pc * p + px);
                    }
                }
            }
        }
    }
    index.into()
}

fn unpatchify_index(config: &ModelConfig) -> Arc<[usize]> {
    let forward = patchify_index(config);
    let mut inverse = vec![0; forward.len()];
    for (token_pos, &canvas_pos) in forward.iter().enumerate() {
        inverse[canvas_pos] = token_pos;
    }
    inverse.into()
}

struct Ctx<'a, T> {
    params: &'a Params<T>,
    vars: &'a ParamVars,
}

impl<T: Real> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = self.var(&format!("{prefix}.gain"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        Ok(tape.layer_norm(x, g, b, T::from_f64(LN_EPS))?)
    }

    fn attention(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let d = self.params.config.embed_dim;
        let heads = self.params.config.num_heads;
        let dh = d / heads;
        // No key bias: softmax is invariant to it.
        let w = self.var(&format!("{prefix}.qkv.weight"))?;
        let qkv = tape.matmul(x, w)?;
        let q_all = tape.slice_cols(qkv, 0, d)?;
        let q_all = tape.add_row(q_all, self.var(&format!("{prefix}.q_bias"))?)?;
        let k_all = tape.slice_cols(qkv, d, d)?;
        let v_all = tape.slice_cols(qkv, 2 * d, d)?;
        let v_all = tape.add_row(v_all, self.var(&format!("{prefix}.v_bias"))?)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(q_all, h * dh, dh)?;
            let k = tape.slice_cols(k_all, h * dh, dh)?;
            let v = tape.slice_cols(v_all, h * dh, dh)?;
            let scores = tape.matmul_bt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.linear(tape, merged, &format!("{prefix}.proj"))
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let h = self.norm(tape, x, &format!("{prefix}.ln1"))?;
        let h = self.attention(tape, h, &format!("{prefix}.attn"))?;
        let x = tape.add(x, h)?;
        let h = self.norm(tape, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(tape, h, &format!("{prefix}.mlp.fc1"))?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, h, &format!("{prefix}.mlp.fc2"))?;
        Ok(tape.add(x, h)?)
    }
}

/// Reconstructs a `[3, 2C, 2C]` canvas node in `(0,1)`.
pub fn forward<T: Real>(
    params: &Params<T>,
    vars: &ParamVars,
    tape: &mut Tape<T>,
    canvas: Var,
    mask: &MaskSpec,
) -> Result<Var, ModelError> {
    let cfg = params.config;
    let side = 2 * cfg.cell_size;
    if tape.shape(canvas) != [CHANNELS, side, side] {
        let got = tape.shape(canvas).last().copied().unwrap_or(0) / 2;
        return Err(ModelError::CellSize {
            expected: cfg.cell_size,
            got,
        });
    }
    if mask.grid != cfg.grid() || mask.patch_size != cfg.patch_size {
        return Err(ModelError::MaskMismatch);
    }
    let ctx = Ctx { params, vars };
    let (n, pd) = (cfg.num_patches(), cfg.patch_dim());

    let patches = tape.gather(canvas, patchify_index(&cfg), &[n, pd])?;
    let tokens = ctx.linear(tape, patches, "patch_embed")?;
    let tokens = tape.replace_rows(tokens, ctx.var("mask_token")?, mask.patches().clone())?;
    let mut h = tape.add(tokens, ctx.var("pos_embed")?)?;
    for i in 0..cfg.encoder_depth {
        h = ctx.block(tape, h, &format!("encoder.{i}"))?;
    }
    for i in 0..cfg.decoder_depth {
        h = ctx.block(tape, h, &format!("decoder.{i}"))?;
    }
    let h = ctx.norm(tape, h, "head.norm")?;
    let logits = ctx.linear(tape, h, "head")?;
    let pixels = tape.sigmoid(logits)?;
    Ok(tape.gather(pixels, unpatchify_index(&cfg), &[CHANNELS, side, side])?)
}

/// Frozen inference on `(x, y, x_t, ∅)`; returns the bottom-right cell.
pub fn predict<T: Real>(params: &Params<T>, x: &Image, y: &Image, x_t: &Image) -> Result<Image, ModelError> {
    let cfg = params.config;
    for img in [x, y, x_t] {
        if img.size() != cfg.cell_size {
            return Err(ModelError::CellSize {
                expected: cfg.cell_size,
                got: img.size(),
            });
        }
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, None);
    let (_, mask) = canvas::assemble_inference(x, y, x_t, cfg.patch_size)?;
    let input = canvas::assemble_on_tape(
        &mut tape,
        [CellInput::Image(x), CellInput::Image(y), CellInput::Image(x_t), CellInput::Empty],
        cfg.cell_size,
    )?;
    let out = forward(params, &vars, &mut tape, input, &mask)?;
    let cell = canvas::extract_on_tape(&mut tape, out, cfg.cell_size, CellPosition::BottomRight)?;
    Ok(Image::from_tensor(tape.value(cell)).map_err(CanvasError::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate, TaskKind};

    #[test]
    fn init_is_deterministic_and_grouped() {
        let cfg = ModelConfig::default();
        let a = init::<f32>(&cfg, 5).unwrap();
        let b = init::<f32>(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), init::<f32>(&cfg, 6).unwrap().digest());
        assert_eq!(a.get("pos_embed").unwrap().tensor.shape(), &[64, 64]);
        assert!(a.entries().iter().any(|e| e.group == ParamGroup::Encoder));
        assert!(a.entries().iter().any(|e| e.group == ParamGroup::Decoder));
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = ModelConfig::tiny();
        let a = init::<f64>(&cfg, 1).unwrap().num_scalars();
        let b = init::<f64>(&cfg, 2).unwrap().num_scalars();
        assert_eq!(a, b);
        let expected: usize = layout(&cfg).iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        assert_eq!(a, expected);
    }

    #[test]
    fn group_labels() {
        let p = init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let enc: Vec<&str> = param_group(&p, Selector::Encoder).iter().map(|e| e.name.as_str()).collect();
        let all = param_group(&p, Selector::All);
        assert!(enc.contains(&"mask_token"));
        assert!(enc.contains(&"patch_embed.weight"));
        assert!(enc.contains(&"pos_embed"));
        assert!(!enc.contains(&"head.weight"));
        let dec = all.iter().filter(|e| e.group == ParamGroup::Decoder).count();
        assert_eq!(all.len(), enc.len() + dec);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.patch_size = 7;
        assert!(init::<f32>(&cfg, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.num_heads = 3;
        assert!(init::<f32>(&cfg, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_text_round_trip() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
        assert!(ModelConfig::from_kv_text("cell_size=32").is_err());
    }

    #[test]
    fn patch_maps_are_inverse() {
        let cfg = ModelConfig::default();
        let f = patchify_index(&cfg);
        let inv = unpatchify_index(&cfg);
        for (i, &j) in inv.iter().enumerate() {
            assert_eq!(f[j], i);
        }
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = ModelConfig::tiny();
        let p = init::<f32>(&cfg, 3).unwrap();
        let s = generate(TaskKind::Denoise, 1, 8);
        let q = generate(TaskKind::Denoise, 2, 8);
        let pred = predict(&p, &s.input, &s.target, &q.input).unwrap();
        assert_eq!(pred.size(), 8);
        assert!(pred.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(pred, predict(&p, &s.input, &s.target, &q.input).unwrap());
    }

    #[test]
    fn swapping_cells_changes_output() {
        let cfg = ModelConfig::tiny();
        let p = init::<f64>(&cfg, 4).unwrap();
        let a = generate(TaskKind::Denoise, 1, 8);
        let b = generate(TaskKind::Denoise, 2, 8);
        let run = |tr: &Image, br: &Image| {
            let mut tape = Tape::<f64>::new();
            let vars = p.register(&mut tape, None);
            let mask = MaskSpec::new(CellPosition::BottomLeft, 8, 4).unwrap();
            let c = canvas::assemble_on_tape(
                &mut tape,
                [CellInput::Image(&a.input), CellInput::Image(tr), CellInput::Empty, CellInput::Image(br)],
                8,
            )
            .unwrap();
            let out = forward(&p, &vars, &mut tape, c, &mask).unwrap();
            tape.value(out).clone()
        };
        assert_ne!(run(&a.target, &b.target), run(&b.target, &a.target));
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let p = init::<f32>(&ModelConfig::tiny(), 0).unwrap();
        let img = Image::filled(16, 0.5);
        assert!(matches!(predict(&p, &img, &img, &img), Err(ModelError::CellSize { .. })));
    }
}
