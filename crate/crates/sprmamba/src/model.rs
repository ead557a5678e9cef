//! The full multi-stage network: dimension reduction, stacks of LSTContext
//! blocks, per-stage classification heads, and refinement stages driven by
//! the previous stage's probabilities.
//!
//! An LSTContext block is: dilated temporal convolution + GELU, an SRTM
//! applied per window, a second SRTM applied per long-range subsequence, and
//! a linear map with a residual connection to the block input. Stage 1 runs
//! on projected input features with dilations 2^0..2^(N-1); each refinement
//! stage restarts the dilation schedule at 1 and re-predicts from the
//! previous stage's probabilities, using them as the attention query/key
//! source (cross-attention) inside its SRTMs.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding, ParamStore};
use crate::layers::{zero_masked_rows, Conv1dLayer, Linear, Mode};
use crate::sampling::{longrange_plan, num_windows};
use crate::srtm::{BranchMode, SrtmBlock, SrtmConfig};
use crate::tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Temporal convolution variant at the front of each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvMode {
    /// Kernel 3, dilation doubling per layer.
    #[default]
    Dilated,
    /// Kernel 3, dilation fixed at 1.
    Fixed,
    /// No convolution.
    None,
}

impl std::str::FromStr for ConvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dilated" => Ok(ConvMode::Dilated),
            "fixed" => Ok(ConvMode::Fixed),
            "none" => Ok(ConvMode::None),
            other => Err(Error::Config(format!("unknown conv mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for ConvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvMode::Dilated => "dilated",
            ConvMode::Fixed => "fixed",
            ConvMode::None => "none",
        })
    }
}

/// Every architectural hyperparameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub stage1_dim: usize,
    pub refine_dim: usize,
    pub layers_per_stage: usize,
    pub stages: usize,
    pub num_classes: usize,
    pub window_size: usize,
    pub longrange_stride: usize,
    pub dropout: f64,
    pub causal: bool,
    pub state_dim: usize,
    pub lambda_expand: usize,
    pub conv_mode: ConvMode,
    pub branch_mode: BranchMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 2048,
            stage1_dim: 64,
            refine_dim: 32,
            layers_per_stage: 10,
            stages: 4,
            num_classes: 8,
            window_size: 64,
            longrange_stride: 64,
            dropout: 0.1,
            causal: false,
            state_dim: 16,
            lambda_expand: 2,
            conv_mode: ConvMode::Dilated,
            branch_mode: BranchMode::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let div = match self.branch_mode {
            BranchMode::Full => 4,
            _ => 2,
        };
        if self.stage1_dim == 0 || self.stage1_dim % div != 0 {
            return Err(Error::Config(format!(
                "stage1_dim must be a positive multiple of {div}, got {}",
                self.stage1_dim
            )));
        }
        if self.refine_dim == 0 || self.refine_dim % div != 0 {
            return Err(Error::Config(format!(
                "refine_dim must be a positive multiple of {div}, got {}",
                self.refine_dim
            )));
        }
        if self.layers_per_stage == 0 {
            return Err(Error::Config("layers_per_stage must be >= 1".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if self.window_size == 0 || self.longrange_stride == 0 {
            return Err(Error::Config("window_size and longrange_stride must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be >= 1".into()));
        }
        if self.lambda_expand == 0 {
            return Err(Error::Config("lambda_expand must be >= 1".into()));
        }
        Ok(())
    }

    fn srtm_config(&self, channels: usize) -> SrtmConfig {
        SrtmConfig {
            channels,
            lambda_expand: self.lambda_expand,
            dropout: self.dropout,
            state_dim: self.state_dim,
            causal: self.causal,
            branch_mode: self.branch_mode,
            eps: 1e-3,
        }
    }

    /// Fixed-order key=value serialization (used by checkpoints).
    pub fn to_kv(&self) -> String {
        format!(
            "input_dim = {}\nstage1_dim = {}\nrefine_dim = {}\nlayers_per_stage = {}\nstages = {}\nnum_classes = {}\nwindow_size = {}\nlongrange_stride = {}\ndropout = {}\ncausal = {}\nstate_dim = {}\nlambda_expand = {}\nconv_mode = {}\nbranch_mode = {}\nseed = {}\n",
            self.input_dim,
            self.stage1_dim,
            self.refine_dim,
            self.layers_per_stage,
            self.stages,
            self.num_classes,
            self.window_size,
            self.longrange_stride,
            self.dropout,
            self.causal,
            self.state_dim,
            self.lambda_expand,
            self.conv_mode,
            self.branch_mode,
            self.seed
        )
    }

    /// Parses the key=value form written by [`ModelConfig::to_kv`]. Unknown
    /// keys are rejected; missing keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "input_dim" => self.input_dim = num(key, value)?,
            "stage1_dim" => self.stage1_dim = num(key, value)?,
            "refine_dim" => self.refine_dim = num(key, value)?,
            "layers_per_stage" => self.layers_per_stage = num(key, value)?,
            "stages" => self.stages = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "window_size" => self.window_size = num(key, value)?,
            "longrange_stride" => self.longrange_stride = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "causal" => self.causal = num(key, value)?,
            "state_dim" => self.state_dim = num(key, value)?,
            "lambda_expand" => self.lambda_expand = num(key, value)?,
            "conv_mode" => self.conv_mode = value.parse()?,
            "branch_mode" => self.branch_mode = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown model config key '{other}'"))),
        }
        Ok(())
    }
}

/// Frame-level logits and probabilities of one stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub logits: NdArray,
    pub probs: NdArray,
}

/// Graph handles for one stage's outputs during training.
#[derive(Clone, Copy, Debug)]
pub struct StageNodes {
    pub logits: NodeId,
    pub probs: NodeId,
}

#[derive(Debug)]
struct LstContextBlock {
    conv: Option<Conv1dLayer>,
    window_srtm: SrtmBlock,
    longrange_srtm: SrtmBlock,
    out_lin: Linear,
}

impl LstContextBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        layer_index: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let padding = if cfg.causal { Padding::Causal } else { Padding::Same };
        let conv = match cfg.conv_mode {
            ConvMode::Dilated => Some(Conv1dLayer::new(
                store,
                rng,
                &format!("{name}.conv"),
                3,
                channels,
                channels,
                1usize << layer_index,
                padding,
            )),
            ConvMode::Fixed => Some(Conv1dLayer::new(
                store,
                rng,
                &format!("{name}.conv"),
                3,
                channels,
                channels,
                1,
                padding,
            )),
            ConvMode::None => None,
        };
        let window_srtm = SrtmBlock::new(store, rng, &format!("{name}.window_srtm"), cfg.srtm_config(channels))?;
        let longrange_srtm = SrtmBlock::new(store, rng, &format!("{name}.longrange_srtm"), cfg.srtm_config(channels))?;
        let out_lin = Linear::new(store, rng, &format!("{name}.out"), channels, channels, true);
        Ok(LstContextBlock {
            conv,
            window_srtm,
            longrange_srtm,
            out_lin,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: NodeId,
        cross: Option<NodeId>,
        mask: &[bool],
        cfg: &ModelConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut h = match &self.conv {
            Some(conv) => {
                let y = conv.forward(g, store, f)?;
                g.gelu(y)?
            }
            None => f,
        };
        h = apply_windowed(g, &self.window_srtm, store, h, cross, mask, cfg.window_size, mode, rng)?;
        h = apply_longrange(g, &self.longrange_srtm, store, h, cross, mask, cfg.longrange_stride, mode, rng)?;
        let o = self.out_lin.forward(g, store, h)?;
        g.add(o, f)
    }
}

/// Runs `srtm` over non-overlapping windows of `x` (one batched call with
/// window spans), sharing weights across windows.
#[allow(clippy::too_many_arguments)]
fn apply_windowed(
    g: &mut Graph,
    srtm: &SrtmBlock,
    store: &ParamStore,
    x: NodeId,
    cross: Option<NodeId>,
    mask: &[bool],
    w: usize,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let (l, _) = g.value(x).dims2()?;
    let n = num_windows(l, w);
    let padded = n * w;
    let xp = if padded > l { g.pad_rows(x, padded)? } else { x };
    let crossp = match cross {
        Some(p) if padded > l => Some(g.pad_rows(p, padded)?),
        other => other,
    };
    let padded_mask: Vec<bool> = (0..padded).map(|t| t < l && mask[t]).collect();
    let spans: Vec<(usize, usize)> = (0..n).map(|i| (i * w, (i + 1) * w)).collect();
    let out = srtm.forward(g, store, xp, crossp, &padded_mask, &spans, mode, rng)?;
    if padded > l {
        g.slice_rows(out, 0, l)
    } else {
        Ok(out)
    }
}

/// Runs `srtm` over the stride-G subsequences of `x` and restores frame order.
#[allow(clippy::too_many_arguments)]
fn apply_longrange(
    g: &mut Graph,
    srtm: &SrtmBlock,
    store: &ParamStore,
    x: NodeId,
    cross: Option<NodeId>,
    mask: &[bool],
    stride: usize,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let (l, _) = g.value(x).dims2()?;
    let plan = longrange_plan(l, stride)?;
    let xp = if plan.padded_len > l { g.pad_rows(x, plan.padded_len)? } else { x };
    let xr = g.gather_rows(xp, &plan.perm)?;
    let crossr = match cross {
        Some(p) => {
            let pp = if plan.padded_len > l { g.pad_rows(p, plan.padded_len)? } else { p };
            Some(g.gather_rows(pp, &plan.perm)?)
        }
        None => None,
    };
    let reordered_mask: Vec<bool> = plan
        .perm
        .iter()
        .map(|&orig| orig < l && mask[orig])
        .collect();
    let spans: Vec<(usize, usize)> = (0..plan.num_subsequences)
        .map(|s| (s * plan.sub_len, (s + 1) * plan.sub_len))
        .collect();
    let out = srtm.forward(g, store, xr, crossr, &reordered_mask, &spans, mode, rng)?;
    let restored = g.gather_rows(out, &plan.inverse)?;
    if plan.padded_len > l {
        g.slice_rows(restored, 0, l)
    } else {
        Ok(restored)
    }
}

#[derive(Debug)]
struct RefineStage {
    embed: Linear,
    blocks: Vec<LstContextBlock>,
    head: Linear,
}

/// The assembled network.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub(crate) params: ParamStore,
    input_proj: Linear,
    stage1_blocks: Vec<LstContextBlock>,
    reduce: Linear,
    stage1_head: Linear,
    refine_stages: Vec<RefineStage>,
}

impl Model {
    /// Builds the network with seeded initialization; identical configs yield
    /// bit-identical initial parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input_proj = Linear::new(&mut store, &mut rng, "input_proj", config.input_dim, config.stage1_dim, true);
        let mut stage1_blocks = Vec::with_capacity(config.layers_per_stage);
        for i in 0..config.layers_per_stage {
            stage1_blocks.push(LstContextBlock::new(
                &mut store,
                &mut rng,
                &format!("stage1.block{i}"),
                config.stage1_dim,
                i,
                &config,
            )?);
        }
        let reduce = Linear::new(&mut store, &mut rng, "reduce", config.stage1_dim, config.refine_dim, true);
        // Head is a kernel-1 convolution over frames, i.e. a linear map.
        let stage1_head = Linear::new(&mut store, &mut rng, "stage1.head", config.refine_dim, config.num_classes, true);
        let mut refine_stages = Vec::with_capacity(config.stages.saturating_sub(1));
        for s in 1..config.stages {
            let embed = Linear::new(
                &mut store,
                &mut rng,
                &format!("stage{}.embed", s + 1),
                config.num_classes,
                config.refine_dim,
                true,
            );
            let mut blocks = Vec::with_capacity(config.layers_per_stage);
            for i in 0..config.layers_per_stage {
                blocks.push(LstContextBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("stage{}.block{i}", s + 1),
                    config.refine_dim,
                    i,
                    &config,
                )?);
            }
            let head = Linear::new(
                &mut store,
                &mut rng,
                &format!("stage{}.head", s + 1),
                config.refine_dim,
                config.num_classes,
                true,
            );
            refine_stages.push(RefineStage { embed, blocks, head });
        }
        Ok(Model {
            config,
            params: store,
            input_proj,
            stage1_blocks,
            reduce,
            stage1_head,
            refine_stages,
        })
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Builds the forward graph from an already-entered feature node.
    /// Returns one `(logits, probs)` pair per stage.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        features: NodeId,
        mask: Option<&[bool]>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StageNodes>> {
        let (l, d) = g.value(features).dims2()?;
        if d != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "model expects input_dim {}, features have {d}",
                self.config.input_dim
            )));
        }
        if !g.value(features).all_finite() {
            return Err(Error::Data("non-finite values in input features".into()));
        }
        let all_valid = vec![true; l];
        let mask: &[bool] = match mask {
            Some(m) => {
                if m.len() != l {
                    return Err(Error::Dimension(format!(
                        "mask length {} != sequence length {l}",
                        m.len()
                    )));
                }
                m
            }
            None => &all_valid,
        };
        let cfg = &self.config;
        let x = zero_masked_rows(g, features, mask)?;
        let mut h = self.input_proj.forward(g, &self.params, x)?;
        for block in &self.stage1_blocks {
            h = block.forward(g, &self.params, h, None, mask, cfg, mode, rng)?;
        }
        let reduced = self.reduce.forward(g, &self.params, h)?;
        let logits = self.stage1_head.forward(g, &self.params, reduced)?;
        let probs = g.softmax(logits, 1)?;
        let mut outputs = vec![StageNodes { logits, probs }];
        for stage in &self.refine_stages {
            let prev_probs = outputs.last().unwrap().probs;
            let emb = stage.embed.forward(g, &self.params, prev_probs)?;
            let mut h = emb;
            for block in &stage.blocks {
                h = block.forward(g, &self.params, h, Some(emb), mask, cfg, mode, rng)?;
            }
            let logits = stage.head.forward(g, &self.params, h)?;
            let probs = g.softmax(logits, 1)?;
            outputs.push(StageNodes { logits, probs });
        }
        Ok(outputs)
    }

    /// Deterministic eval-mode forward pass.
    pub fn forward_eval(&self, features: &NdArray, mask: Option<&[bool]>) -> Result<Vec<StageOutput>> {
        let mut g = Graph::new();
        let node = g.constant(features.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stages = self.forward_graph(&mut g, node, mask, Mode::Eval, &mut rng)?;
        Ok(stages
            .into_iter()
            .map(|s| StageOutput {
                logits: g.value(s.logits).clone(),
                probs: g.value(s.probs).clone(),
            })
            .collect())
    }

    /// Argmax labels of the chosen stage (1-based; 0 or out-of-range selects
    /// the final stage).
    pub fn predict(&self, features: &NdArray, stage: usize) -> Result<Vec<usize>> {
        let outputs = self.forward_eval(features, None)?;
        let idx = if stage >= 1 && stage <= outputs.len() {
            stage - 1
        } else {
            outputs.len() - 1
        };
        Ok(argmax_rows(&outputs[idx].probs))
    }
}

/// Per-row argmax of a `[L x C]` array.
pub fn argmax_rows(probs: &NdArray) -> Vec<usize> {
    let (l, c) = probs.dims2().expect("2-D probabilities");
    (0..l)
        .map(|t| {
            let row = probs.row(t);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            stage1_dim: 16,
            refine_dim: 8,
            layers_per_stage: 2,
            stages: 2,
            num_classes: 4,
            window_size: 5,
            longrange_stride: 3,
            dropout: 0.0,
            causal: false,
            state_dim: 4,
            lambda_expand: 2,
            conv_mode: ConvMode::Dilated,
            branch_mode: BranchMode::Full,
            seed: 7,
        }
    }

    fn rand_features(rng: &mut ChaCha8Rng, l: usize, d: usize) -> NdArray {
        NdArray::new(vec![l, d], (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stage_count_and_output_shapes() {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = rand_features(&mut rng, 37, 6);
        let out = model.forward_eval(&f, None).unwrap();
        assert_eq!(out.len(), 2);
        for stage in &out {
            assert_eq!(stage.probs.shape(), &[37, 4]);
            for t in 0..37 {
                let s: f64 = stage.probs.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_stage_config_yields_one_output() {
        let mut cfg = tiny_config();
        cfg.stages = 1;
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_features(&mut rng, 11, 6);
        assert_eq!(model.forward_eval(&f, None).unwrap().len(), 1);
    }

    #[test]
    fn default_config_has_forty_blocks_and_four_heads() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let blocks = model.stage1_blocks.len()
            + model.refine_stages.iter().map(|s| s.blocks.len()).sum::<usize>();
        assert_eq!(blocks, 40);
        let heads = 1 + model.refine_stages.len();
        assert_eq!(heads, 4);
    }

    #[test]
    fn non_finite_input_is_data_error() {
        let model = Model::new(tiny_config()).unwrap();
        let mut f = NdArray::zeros(&[5, 6]);
        f.data_mut()[7] = f64::NAN;
        assert!(matches!(model.forward_eval(&f, None), Err(Error::Data(_))));
    }

    #[test]
    fn rebuild_from_same_config_is_bit_identical() {
        let m1 = Model::new(tiny_config()).unwrap();
        let m2 = Model::new(tiny_config()).unwrap();
        assert_eq!(m1.param_count(), m2.param_count());
        for (a, b) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn dilation_schedule_doubles_and_resets() {
        let model = Model::new(tiny_config()).unwrap();
        let d1: Vec<usize> = model.stage1_blocks.iter().map(|b| b.conv.as_ref().unwrap().dilation).collect();
        assert_eq!(d1, vec![1, 2]);
        let d2: Vec<usize> = model.refine_stages[0]
            .blocks
            .iter()
            .map(|b| b.conv.as_ref().unwrap().dilation)
            .collect();
        assert_eq!(d2, vec![1, 2]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_features(&mut rng, 23, 6);
        let a = model.forward_eval(&f, None).unwrap();
        let b = model.forward_eval(&f, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.probs.data(), y.probs.data());
        }
    }

    #[test]
    fn block_impulse_spreads_over_receptive_field_and_stride() {
        // One block, dilation 2^1 = 2: a perturbation must reach +-2 frames
        // through the conv and frames a stride away through the long-range
        // branch.
        let mut cfg = tiny_config();
        cfg.layers_per_stage = 2;
        cfg.stages = 1;
        cfg.window_size = 4;
        cfg.longrange_stride = 8;
        let model = Model::new(cfg).unwrap();
        let block = &model.stage1_blocks[1];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = 32;
        let x = rand_features(&mut rng, l, 16);
        let mask = vec![true; l];
        let run = |x: &NdArray| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let y = block
                .forward(&mut g, &model.params, xn, None, &mask, &model.config, Mode::Eval, &mut r)
                .unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        let t = 16;
        let mut poked = x.clone();
        for ch in 0..16 {
            poked.set(t, ch, poked.at(t, ch) + 3.0);
        }
        let out = run(&poked);
        let changed: Vec<usize> = (0..l)
            .filter(|&s| base.row(s).iter().zip(out.row(s)).any(|(a, b)| a != b))
            .collect();
        assert!(changed.contains(&(t - 2)) && changed.contains(&(t + 2)), "{changed:?}");
        assert!(
            changed.iter().any(|&s| (s as isize - t as isize).unsigned_abs() >= 8),
            "no long-range effect: {changed:?}"
        );
    }

    #[test]
    fn zeroed_output_linear_makes_block_identity() {
        let mut cfg = tiny_config();
        cfg.stages = 1;
        let mut model = Model::new(cfg).unwrap();
        let (w, b) = {
            let blk = &model.stage1_blocks[0];
            (blk.out_lin.w, blk.out_lin.b.unwrap())
        };
        let shape_w = model.params.value(w).shape().to_vec();
        model.params.entry_mut(w).value = NdArray::zeros(&shape_w);
        let shape_b = model.params.value(b).shape().to_vec();
        model.params.entry_mut(b).value = NdArray::zeros(&shape_b);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_features(&mut rng, 13, 16);
        let mask = vec![true; 13];
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let y = model.stage1_blocks[0]
            .forward(&mut g, &model.params, xn, None, &mask, &model.config, Mode::Eval, &mut r)
            .unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn param_count_matches_analytic_formula() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone()).unwrap();

        let linear = |i: usize, o: usize| i * o + o;
        let linear_nb = |i: usize, o: usize| i * o;
        let srtm = |c: usize| {
            let inner = cfg.lambda_expand * c;
            let n = cfg.state_dim;
            2 * c                       // input norm affine
                + linear(c / 4, inner)  // gate
                + linear(c / 4, inner)  // scan expand
                + (3 * inner + inner)   // depthwise conv kernel + bias
                + inner * n             // a_log
                + linear(inner, inner)  // delta projection
                + linear_nb(inner, n) * 2 // b/c projections
                + 2 * inner             // scan layer norm
                + 3 * linear(c / 2, c / 2) // q, k, v
                + linear(c / 2, inner)  // attention out
                + linear(inner, c)      // fuse
                + 1                     // beta
                + 2 * c                 // mid norm affine
                + linear(c, 2 * c)      // mlp in
                + linear(2 * c, c)      // mlp out
        };
        let block = |c: usize| (3 * c * c + c) + 2 * srtm(c) + linear(c, c);
        let expected = linear(cfg.input_dim, cfg.stage1_dim)
            + cfg.layers_per_stage * block(cfg.stage1_dim)
            + linear(cfg.stage1_dim, cfg.refine_dim)
            + linear(cfg.refine_dim, cfg.num_classes)
            + (cfg.stages - 1)
                * (linear(cfg.num_classes, cfg.refine_dim)
                    + cfg.layers_per_stage * block(cfg.refine_dim)
                    + linear(cfg.refine_dim, cfg.num_classes));
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn single_linear_param_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = Linear::new(&mut store, &mut rng, "l", 64, 32, true);
        assert_eq!(store.total_params(), 2080);
    }

    #[test]
    fn dimension_reduction_cuts_params_below_60_percent() {
        let reduced = Model::new(ModelConfig::default()).unwrap();
        let unreduced = Model::new(ModelConfig {
            refine_dim: 64,
            ..ModelConfig::default()
        })
        .unwrap();
        let ratio = reduced.param_count() as f64 / unreduced.param_count() as f64;
        assert!(ratio <= 0.6, "ratio {ratio:.3}");
    }

    #[test]
    fn causal_mode_has_exact_prefix_property() {
        let mut cfg = tiny_config();
        cfg.causal = true;
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = 23;
        let f = rand_features(&mut rng, l, 6);
        let full = model.forward_eval(&f, None).unwrap();
        for &t in &[1usize, 7, 16, l] {
            let prefix = NdArray::new(vec![t, 6], f.data()[..t * 6].to_vec()).unwrap();
            let out = model.forward_eval(&prefix, None).unwrap();
            for (s, stage) in out.iter().enumerate() {
                assert_eq!(
                    stage.probs.data(),
                    &full[s].probs.data()[..t * 4],
                    "stage {s} prefix {t} diverged"
                );
            }
        }
    }

    #[test]
    fn bidirectional_mode_violates_prefix_property() {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 23;
        let f = rand_features(&mut rng, l, 6);
        let full = model.forward_eval(&f, None).unwrap();
        let t = 9;
        let prefix = NdArray::new(vec![t, 6], f.data()[..t * 6].to_vec()).unwrap();
        let out = model.forward_eval(&prefix, None).unwrap();
        let last = out.len() - 1;
        assert_ne!(out[last].probs.data(), &full[last].probs.data()[..t * 4]);
    }

    #[test]
    fn masked_tail_content_cannot_change_valid_outputs() {
        let model = Model::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = 19;
        let valid = 14;
        let f = rand_features(&mut rng, l, 6);
        let mask: Vec<bool> = (0..l).map(|t| t < valid).collect();
        let base = model.forward_eval(&f, Some(&mask)).unwrap();
        let mut poked = f.clone();
        for t in valid..l {
            for ch in 0..6 {
                poked.set(t, ch, 1e5);
            }
        }
        let out = model.forward_eval(&poked, Some(&mask)).unwrap();
        for (s, stage) in out.iter().enumerate() {
            assert_eq!(
                &stage.probs.data()[..valid * 4],
                &base[s].probs.data()[..valid * 4],
                "stage {s} leaked pad content"
            );
        }
    }
}
