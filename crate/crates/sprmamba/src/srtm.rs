//! The Scale Residual TranMamba block.
//!
//! TranMamba fuses three channel-split branches of its input `[L x C]`:
//! the first quarter is gated through an expanded linear + SiLU, the second
//! quarter runs through linear + depthwise conv + selective state-space scan
//! + layer norm (long-range context), and the last half goes through scaled
//! dot-product attention + GELU (local context). The gate and scan branches
//! combine by Hadamard product, the attention branch is added, and a linear
//! map brings the fused feature back to `C` channels.
//!
//! The wrapper applies instance norm, a learnable scalar residual weight,
//! a second instance norm, and a two-layer MLP.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding, ParamId, ParamStore};
use crate::layers::{dropout, zero_masked_rows, DepthwiseConv1d, InstanceNorm, LayerNorm, Linear, Mode};
use crate::tensor::NdArray;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Additive logit mask value; large enough that exp underflows to exactly 0
/// after max-subtraction, small enough to stay within f64 range.
const NEG_MASK: f64 = -1e30;

/// Which branches of TranMamba are active. The reduced modes exist for
/// controlled comparisons: `AttentionOnly` keeps only the attention path,
/// `SsmOnly` keeps the gate and scan paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BranchMode {
    #[default]
    Full,
    AttentionOnly,
    SsmOnly,
}

impl std::str::FromStr for BranchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BranchMode::Full),
            "attention" => Ok(BranchMode::AttentionOnly),
            "ssm" => Ok(BranchMode::SsmOnly),
            other => Err(Error::Config(format!("unknown branch mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for BranchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BranchMode::Full => "full",
            BranchMode::AttentionOnly => "attention",
            BranchMode::SsmOnly => "ssm",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SrtmConfig {
    pub channels: usize,
    pub lambda_expand: usize,
    pub dropout: f64,
    pub state_dim: usize,
    pub causal: bool,
    pub branch_mode: BranchMode,
    pub eps: f64,
}

impl SrtmConfig {
    pub fn new(channels: usize, state_dim: usize) -> Self {
        SrtmConfig {
            channels,
            lambda_expand: 2,
            dropout: 0.1,
            state_dim,
            causal: false,
            branch_mode: BranchMode::Full,
            eps: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = match self.branch_mode {
            BranchMode::Full => 4,
            _ => 2,
        };
        if self.channels == 0 || self.channels % need != 0 {
            return Err(Error::Config(format!(
                "srtm channels must be a positive multiple of {need}, got {}",
                self.channels
            )));
        }
        if self.lambda_expand < 1 {
            return Err(Error::Config("expansion factor must be >= 1".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.lambda_expand * self.channels
    }
}

/// Input-dependent projections plus diagonal state matrix for the scan.
#[derive(Clone, Debug)]
struct SelectiveSsm {
    a_log: ParamId,
    delta_proj: Linear,
    b_proj: Linear,
    c_proj: Linear,
}

impl SelectiveSsm {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, n: usize) -> Self {
        // Diagonal A = -exp(a_log); rows initialized to -(1..=n).
        let mut a_log = Vec::with_capacity(c * n);
        for _ in 0..c {
            for ni in 0..n {
                a_log.push(((ni + 1) as f64).ln());
            }
        }
        let a_log = store.add(
            format!("{name}.a_log"),
            NdArray::new(vec![c, n], a_log).expect("consistent"),
        );
        let delta_proj = Linear::new(store, rng, &format!("{name}.delta_proj"), c, c, true);
        // Bias so that softplus(bias) lands in ~[0.01, 0.1] at initialization.
        {
            let b = delta_proj.b.expect("delta projection has bias");
            let bias = store.entry_mut(b);
            for v in bias.value.data_mut() {
                let dt = (rng.gen_range(0.01f64.ln()..0.1f64.ln())).exp();
                *v = (dt.exp() - 1.0).ln();
            }
        }
        let b_proj = Linear::new(store, rng, &format!("{name}.b_proj"), c, n, false);
        let c_proj = Linear::new(store, rng, &format!("{name}.c_proj"), c, n, false);
        SelectiveSsm { a_log, delta_proj, b_proj, c_proj }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, spans: &[(usize, usize)]) -> Result<NodeId> {
        let pre = self.delta_proj.forward(g, store, x)?;
        let delta = g.softplus(pre)?;
        let b = self.b_proj.forward(g, store, x)?;
        let c = self.c_proj.forward(g, store, x)?;
        let a_log = g.param(store, self.a_log);
        let a_exp = g.exp(a_log)?;
        let a = g.scale(a_exp, -1.0)?;
        g.selective_scan_spans(x, delta, b, c, a, Some(spans))
    }
}

/// One SRTM block; weights are shared across every window or subsequence the
/// block is applied to.
#[derive(Clone, Debug)]
pub struct SrtmBlock {
    pub config: SrtmConfig,
    in_norm: InstanceNorm,
    gate_lin: Option<Linear>,
    scan_lin: Option<Linear>,
    scan_conv: Option<DepthwiseConv1d>,
    scan_ssm: Option<SelectiveSsm>,
    scan_norm: Option<LayerNorm>,
    wq: Option<Linear>,
    wk: Option<Linear>,
    wv: Option<Linear>,
    attn_out: Option<Linear>,
    fuse: Linear,
    beta_scale: ParamId,
    mid_norm: InstanceNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl SrtmBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: SrtmConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let inner = config.inner_dim();
        let in_norm = InstanceNorm::new(store, &format!("{name}.in_norm"), c, config.eps);

        let (gate_in, scan_in, attn_in) = match config.branch_mode {
            BranchMode::Full => (c / 4, c / 4, c / 2),
            BranchMode::SsmOnly => (c / 2, c / 2, 0),
            BranchMode::AttentionOnly => (0, 0, c),
        };

        let mut gate_lin = None;
        let mut scan_lin = None;
        let mut scan_conv = None;
        let mut scan_ssm = None;
        let mut scan_norm = None;
        if scan_in > 0 {
            gate_lin = Some(Linear::new(store, rng, &format!("{name}.gate_lin"), gate_in, inner, true));
            scan_lin = Some(Linear::new(store, rng, &format!("{name}.scan_lin"), scan_in, inner, true));
            scan_conv = Some(DepthwiseConv1d::new(
                store,
                rng,
                &format!("{name}.scan_conv"),
                3,
                inner,
                Padding::Causal,
            ));
            scan_ssm = Some(SelectiveSsm::new(store, rng, &format!("{name}.scan_ssm"), inner, config.state_dim));
            scan_norm = Some(LayerNorm::new(store, &format!("{name}.scan_norm"), inner, config.eps));
        }

        let mut wq = None;
        let mut wk = None;
        let mut wv = None;
        let mut attn_out = None;
        if attn_in > 0 {
            wq = Some(Linear::new(store, rng, &format!("{name}.wq"), attn_in, attn_in, true));
            wk = Some(Linear::new(store, rng, &format!("{name}.wk"), attn_in, attn_in, true));
            wv = Some(Linear::new(store, rng, &format!("{name}.wv"), attn_in, attn_in, true));
            attn_out = Some(Linear::new(store, rng, &format!("{name}.attn_out"), attn_in, inner, true));
        }

        let fuse = Linear::new(store, rng, &format!("{name}.fuse"), inner, c, true);
        let beta_scale = store.add(format!("{name}.beta_scale"), NdArray::scalar(1.0));
        let mid_norm = InstanceNorm::new(store, &format!("{name}.mid_norm"), c, config.eps);
        let mlp_in = Linear::new(store, rng, &format!("{name}.mlp_in"), c, 2 * c, true);
        let mlp_out = Linear::new(store, rng, &format!("{name}.mlp_out"), 2 * c, c, true);

        Ok(SrtmBlock {
            config,
            in_norm,
            gate_lin,
            scan_lin,
            scan_conv,
            scan_ssm,
            scan_norm,
            wq,
            wk,
            wv,
            attn_out,
            fuse,
            beta_scale,
            mid_norm,
            mlp_in,
            mlp_out,
        })
    }

    pub fn beta_scale_id(&self) -> ParamId {
        self.beta_scale
    }

    /// The three-branch fusion on an already-normalized input. Per-frame maps
    /// run batched over the whole sequence; the sequence mixers (scan, conv,
    /// attention) treat each span as an independent window.
    /// `cross` supplies the attention query/key source (same shape as the
    /// input); when absent the branch self-attends.
    #[allow(clippy::too_many_arguments)]
    pub fn tranmamba(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        cross: Option<NodeId>,
        mask: &[bool],
        spans: &[(usize, usize)],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let c = self.config.channels;
        let (l, xc) = g.value(x).dims2()?;
        if xc != c {
            return Err(Error::Config(format!(
                "srtm built for {c} channels, input has {xc}"
            )));
        }
        if mask.len() != l {
            return Err(Error::Dimension(format!(
                "mask length {} != sequence length {l}",
                mask.len()
            )));
        }

        let long_term = match (&self.gate_lin, &self.scan_lin) {
            (Some(gate_lin), Some(scan_lin)) => {
                let (gate_slice, scan_slice) = match self.config.branch_mode {
                    BranchMode::Full => {
                        let b1 = g.slice_cols(x, 0, c / 4)?;
                        let b2 = g.slice_cols(x, c / 4, c / 2)?;
                        (b1, b2)
                    }
                    _ => {
                        let b1 = g.slice_cols(x, 0, c / 2)?;
                        let b2 = g.slice_cols(x, c / 2, c)?;
                        (b1, b2)
                    }
                };
                let gate = gate_lin.forward(g, store, gate_slice)?;
                let gate = g.silu(gate)?;

                let expanded = scan_lin.forward(g, store, scan_slice)?;
                let conved = self.scan_conv.as_ref().unwrap().forward_spans(g, store, expanded, spans)?;
                let scanned = self.scan_ssm.as_ref().unwrap().forward(g, store, conved, spans)?;
                let normed = self.scan_norm.as_ref().unwrap().forward(g, store, scanned)?;
                Some(g.mul(gate, normed)?)
            }
            _ => None,
        };

        let short_term = match (&self.wq, &self.wk, &self.wv, &self.attn_out) {
            (Some(wq), Some(wk), Some(wv), Some(attn_out)) => {
                let (v_src, qk_src) = match self.config.branch_mode {
                    BranchMode::Full => {
                        let v = g.slice_cols(x, c / 2, c)?;
                        let qk = match cross {
                            Some(p) => g.slice_cols(p, c / 2, c)?,
                            None => v,
                        };
                        (v, qk)
                    }
                    _ => (x, cross.unwrap_or(x)),
                };
                let q = wq.forward(g, store, qk_src)?;
                let k = wk.forward(g, store, qk_src)?;
                let v = wv.forward(g, store, v_src)?;
                let attended = if spans.len() == 1 {
                    attention(g, q, k, v, Some(mask), self.config.causal)?
                } else {
                    let mut parts = Vec::with_capacity(spans.len());
                    for &(start, end) in spans {
                        let qs = g.slice_rows(q, start, end)?;
                        let ks = g.slice_rows(k, start, end)?;
                        let vs = g.slice_rows(v, start, end)?;
                        parts.push(attention(g, qs, ks, vs, Some(&mask[start..end]), self.config.causal)?);
                    }
                    g.concat_rows(&parts)?
                };
                let act = g.gelu(attended)?;
                let projected = attn_out.forward(g, store, act)?;
                Some(dropout(g, projected, self.config.dropout, mode, rng)?)
            }
            _ => None,
        };

        let fused = match (long_term, short_term) {
            (Some(lt), Some(st)) => g.add(lt, st)?,
            (Some(lt), None) => lt,
            (None, Some(st)) => st,
            (None, None) => unreachable!("validate() guarantees at least one branch"),
        };
        self.fuse.forward(g, store, fused)
    }

    /// Full block: scaled residual around TranMamba, then norm + MLP. Each
    /// `[start, end)` span is treated as an independent window sharing the
    /// block's weights.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_in: NodeId,
        cross: Option<NodeId>,
        mask: &[bool],
        spans: &[(usize, usize)],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let causal = self.config.causal;
        let f_in = zero_masked_rows(g, f_in, mask)?;
        let cross = match cross {
            Some(p) => Some(zero_masked_rows(g, p, mask)?),
            None => None,
        };
        let normed = self
            .in_norm
            .forward_spans(g, store, f_in, Some(mask), causal, spans)?;
        let mixed = self.tranmamba(g, store, normed, cross, mask, spans, mode, rng)?;
        let beta = g.param(store, self.beta_scale);
        let scaled = g.mul_scalar(f_in, beta)?;
        let f = g.add(scaled, mixed)?;
        let f = self
            .mid_norm
            .forward_spans(g, store, f, Some(mask), causal, spans)?;
        let hidden = self.mlp_in.forward(g, store, f)?;
        let hidden = g.gelu(hidden)?;
        self.mlp_out.forward(g, store, hidden)
    }
}

/// Scaled dot-product attention with optional key masking and causal masking.
/// Masked keys receive exactly zero weight; each output row is a convex
/// combination of the valid value rows.
pub fn attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<NodeId> {
    let (lq, d) = g.value(q).dims2()?;
    let (lk, dk) = g.value(k).dims2()?;
    let (lv, _) = g.value(v).dims2()?;
    if d == 0 {
        return Err(Error::Config("attention head dimension is zero".into()));
    }
    if d != dk || lk != lv {
        return Err(Error::Dimension(format!(
            "attention shapes: q [{lq}x{d}], k [{lk}x{dk}], v rows {lv}"
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != lk {
            return Err(Error::Dimension(format!(
                "key mask length {} != {lk} keys",
                m.len()
            )));
        }
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let any_masked = key_mask.map_or(false, |m| m.iter().any(|&x| !x));
    let logits = if causal || any_masked {
        let mut off = vec![0.0; lq * lk];
        for i in 0..lq {
            for j in 0..lk {
                let dead = (causal && j > i) || key_mask.map_or(false, |m| !m[j]);
                if dead {
                    off[i * lk + j] = NEG_MASK;
                }
            }
        }
        let offc = NdArray::new(vec![lq, lk], off)?;
        g.add_const(scaled, &offc)?
    } else {
        scaled
    };
    let weights = g.softmax(logits, 1)?;
    g.matmul(weights, v)
}
