//! Reverse-mode automatic differentiation over [`NdArray`] values.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! its output value and enough context to run the backward step. Nodes are in
//! topological order by construction, so one reverse sweep from a scalar loss
//! populates the gradients of every tracked leaf.
//!
//! Model parameters live outside the graph in a [`ParamStore`]; each forward
//! pass enters them as leaves (memoized per graph), and [`Graph::write_grads`]
//! copies the accumulated gradients back after the sweep.

use crate::error::{Error, Result};
use crate::ssm::{scan_backward, scan_forward, ScanCache};
use crate::tensor::NdArray;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// A named learnable array together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: NdArray,
    pub grad: Vec<f64>,
}

/// Flat registry of model parameters. Creation order is the canonical
/// ordering used by serialization and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        let id = ParamId(self.entries.len());
        let grad = vec![0.0; value.numel()];
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Padding behavior for temporal convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output frame t sees a symmetric neighborhood; (k-1)*dilation/2 zeros each side.
    Same,
    /// Output frame t sees only frames <= t; (k-1)*dilation zeros on the left.
    Causal,
}

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

// Saved normalization statistics for the backward pass.
#[derive(Debug)]
struct NormCache {
    mu: Vec<f64>,
    r: Vec<f64>,
    // Valid-frame count per timestep (causal) or a single global count.
    counts: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    MulConst { x: NodeId, c: NdArray },
    MulScalar { x: NodeId, s: NodeId },
    Conv1d { x: NodeId, kernel: NodeId, dilation: usize, padding: Padding },
    ConvDepthwise { x: NodeId, kernel: NodeId, dilation: usize, padding: Padding, spans: Vec<(usize, usize)> },
    Softmax { x: NodeId, axis: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, mask: Option<Vec<bool>>, causal: bool, spans: Vec<(usize, usize)>, cache: NormCache },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: NormCache },
    Unary { x: NodeId, kind: UnaryKind },
    SumAll { x: NodeId },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    PadRows { x: NodeId },
    SelectiveScan { u: NodeId, delta: NodeId, b: NodeId, c: NodeId, a: NodeId, spans: Vec<(usize, usize)>, cache: ScanCache },
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    LogClamped { min: f64 },
    Clamp { lo: f64, hi: f64 },
}

struct Node {
    value: NdArray,
    requires_grad: bool,
    op: Op,
}

/// The computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_map: Vec<Option<NodeId>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_map: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. this node, if any was produced.
    pub fn grad(&self, id: NodeId) -> Option<NdArray> {
        self.grads[id.0].as_ref().map(|g| {
            NdArray::new(self.nodes[id.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    /// Enters a constant (not tracked for gradients).
    pub fn constant(&mut self, value: NdArray) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Enters a tracked leaf; its gradient is available after backward.
    pub fn leaf(&mut self, value: NdArray) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Enters a parameter as a tracked leaf, memoized per graph so that reuse
    /// across calls accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if self.param_map.len() < store.len() {
            self.param_map.resize(store.len(), None);
        }
        if let Some(nid) = self.param_map[id.0] {
            return nid;
        }
        let nid = self.leaf(store.value(id).clone());
        self.param_map[id.0] = Some(nid);
        nid
    }

    /// Re-enters a node's current value as an untracked constant (detach).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    /// Accumulates gradients of all entered parameters back into the store.
    pub fn write_grads(&self, store: &mut ParamStore) {
        for (pid, nid) in self.param_map.iter().enumerate() {
            if let Some(nid) = nid {
                if let Some(g) = &self.grads[nid.0] {
                    let dst = &mut store.entries[pid].grad;
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
        }
    }

    pub fn assert_finite(&self, id: NodeId, what: &str) -> Result<()> {
        if self.nodes[id.0].value.all_finite() {
            Ok(())
        } else {
            Err(Error::Internal(format!("non-finite values in {what}")))
        }
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: [{m}x{k}] vs [{k2}x{n}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(NdArray::new(vec![m, n], out)?, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(vec![c, r], out)?, rg, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn elementwise_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(NdArray::new(shape, data)?, rg, op(a, b)))
    }

    /// Adds a `[C]` bias to every row of a `[L x C]` array.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "bias length {} does not match {} columns",
                self.value(bias).numel(),
                c
            )));
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(l * c);
        for t in 0..l {
            for j in 0..c {
                out.push(xd[t * c + j] + bd[j]);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(NdArray::new(vec![l, c], out)?, rg, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).map(|t| t * c);
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::Scale { x, c }))
    }

    /// Elementwise addition of a constant array (e.g. additive attention masks).
    pub fn add_const(&mut self, x: NodeId, c: &NdArray) -> Result<NodeId> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::Dimension(format!(
                "add_const shape mismatch {:?} vs {:?}",
                self.value(x).shape(),
                c.shape()
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(shape, data)?, rg, Op::AddConst { x }))
    }

    /// Elementwise product with a constant array (dropout masks, loss weights).
    pub fn mul_const(&mut self, x: NodeId, c: &NdArray) -> Result<NodeId> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::Dimension(format!(
                "mul_const shape mismatch {:?} vs {:?}",
                self.value(x).shape(),
                c.shape()
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(shape, data)?, rg, Op::MulConst { x, c: c.clone() }))
    }

    /// Multiplies every element by a tracked single-element node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Dimension(format!(
                "mul_scalar expects a single-element scale, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|t| t * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, rg, Op::MulScalar { x, s }))
    }

    /// 1-D convolution over time. `x` is `[L x Cin]`, `kernel` is `[k x Cin x Cout]`.
    /// Output length equals input length under both padding modes.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, dilation: usize, padding: Padding) -> Result<NodeId> {
        let (l, cin) = self.value(x).dims2()?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 3 || kshape[1] != cin {
            return Err(Error::Dimension(format!(
                "conv1d kernel must be [k x {cin} x Cout], got {kshape:?}"
            )));
        }
        let k = kshape[0];
        let cout = kshape[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be >= 1".into()));
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; l * cout];
        for t in 0..l {
            for j in 0..k {
                let Some(s) = conv_src(t, j, k, dilation, padding, l) else { continue };
                for ci in 0..cin {
                    let xv = xd[s * cin + ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kd[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    let orow = &mut out[t * cout..(t + 1) * cout];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += kv * xv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            NdArray::new(vec![l, cout], out)?,
            rg,
            Op::Conv1d { x, kernel, dilation, padding },
        ))
    }

    /// Depthwise 1-D convolution; `kernel` is `[k x C]`, one filter per channel.
    pub fn conv1d_depthwise(&mut self, x: NodeId, kernel: NodeId, dilation: usize, padding: Padding) -> Result<NodeId> {
        self.conv1d_depthwise_spans(x, kernel, dilation, padding, None)
    }

    /// Depthwise convolution over independent `[start, end)` spans; padding
    /// applies at each span edge, so spans behave as separate sequences.
    pub fn conv1d_depthwise_spans(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        dilation: usize,
        padding: Padding,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        let spans = resolve_spans(l, spans)?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 2 || kshape[1] != c {
            return Err(Error::Dimension(format!(
                "depthwise kernel must be [k x {c}], got {kshape:?}"
            )));
        }
        let k = kshape[0];
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be >= 1".into()));
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; l * c];
        for &(start, end) in &spans {
            for t in start..end {
                for j in 0..k {
                    let Some(s) = conv_src_span(t, j, k, dilation, padding, start, end) else { continue };
                    let xrow = &xd[s * c..(s + 1) * c];
                    let krow = &kd[j * c..(j + 1) * c];
                    let orow = &mut out[t * c..(t + 1) * c];
                    for ((o, &kv), &xv) in orow.iter_mut().zip(krow).zip(xrow) {
                        *o += kv * xv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            NdArray::new(vec![l, c], out)?,
            rg,
            Op::ConvDepthwise { x, kernel, dilation, padding, spans },
        ))
    }

    /// Numerically stabilized softmax along `axis` (0 or 1) of a 1-D or 2-D array.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let (rows, cols) = match shape.as_slice() {
            [n] => {
                if axis != 0 {
                    return Err(Error::Dimension(format!("softmax axis {axis} on 1-D array")));
                }
                (1, *n)
            }
            [r, c] => match axis {
                1 => (*r, *c),
                0 => (*c, *r),
                _ => return Err(Error::Dimension(format!("softmax axis {axis} on 2-D array"))),
            },
            other => return Err(Error::Dimension(format!("softmax on shape {other:?}"))),
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        // Lane layout: axis 1 normalizes rows in place; axis 0 walks columns strided.
        let (lane_count, lane_len, stride, base_step) = if axis == 1 || shape.len() == 1 {
            (rows, cols, 1usize, cols)
        } else {
            (rows, cols, rows, 1usize)
        };
        for lane in 0..lane_count {
            let base = lane * base_step;
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(xd[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (xd[base + i * stride] - max).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..lane_len {
                out[base + i * stride] /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(shape, out)?, rg, Op::Softmax { x, axis }))
    }

    /// Instance normalization of `[L x C]`: per channel, statistics over the
    /// temporal axis. `mask` restricts the statistics to valid frames; in
    /// `causal` mode the statistics at frame t cover valid frames <= t only.
    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<NodeId> {
        self.instance_norm_spans(x, gamma, beta, eps, mask, causal, None)
    }

    /// Instance normalization over independent `[start, end)` spans: each
    /// span is normalized as its own sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn instance_norm_spans(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mask: Option<&[bool]>,
        causal: bool,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        let spans = resolve_spans(l, spans)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!(
                "instance_norm affine params must have length {c}"
            )));
        }
        if let Some(m) = mask {
            if m.len() != l {
                return Err(Error::Dimension(format!(
                    "instance_norm mask length {} != {} frames",
                    m.len(),
                    l
                )));
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let valid = |t: usize| mask.map_or(true, |m| m[t]);
        let mut out = vec![0.0; l * c];
        let cache = if !causal {
            // Layout: mu/r hold [span][channel]; counts hold one entry per span.
            let mut mu = vec![0.0; spans.len() * c];
            let mut r = vec![0.0; spans.len() * c];
            let mut counts = vec![0.0; spans.len()];
            let mut s1 = vec![0.0; c];
            let mut s2 = vec![0.0; c];
            for (si, &(start, end)) in spans.iter().enumerate() {
                s1.iter_mut().for_each(|v| *v = 0.0);
                s2.iter_mut().for_each(|v| *v = 0.0);
                let mut n = 0.0;
                for t in start..end {
                    if valid(t) {
                        n += 1.0;
                        let xrow = &xd[t * c..(t + 1) * c];
                        for ((a, b), &v) in s1.iter_mut().zip(s2.iter_mut()).zip(xrow) {
                            *a += v;
                            *b += v * v;
                        }
                    }
                }
                counts[si] = n;
                for ch in 0..c {
                    let m = if n > 0.0 { s1[ch] / n } else { 0.0 };
                    let var = if n > 0.0 { (s2[ch] / n - m * m).max(0.0) } else { 0.0 };
                    mu[si * c + ch] = m;
                    r[si * c + ch] = 1.0 / (var + eps).sqrt();
                }
                for t in start..end {
                    for ch in 0..c {
                        out[t * c + ch] =
                            (xd[t * c + ch] - mu[si * c + ch]) * r[si * c + ch] * gd[ch] + bd[ch];
                    }
                }
            }
            NormCache { mu, r, counts }
        } else {
            // Running statistics over valid frames <= t (within the span)
            // keep the op prefix-causal. Layout: mu/r are [L x C].
            let mut mu = vec![0.0; l * c];
            let mut r = vec![0.0; l * c];
            let mut counts = vec![0.0; l];
            let mut s1 = vec![0.0; c];
            let mut s2 = vec![0.0; c];
            for &(start, end) in &spans {
                s1.iter_mut().for_each(|v| *v = 0.0);
                s2.iter_mut().for_each(|v| *v = 0.0);
                let mut n = 0.0;
                for t in start..end {
                    if valid(t) {
                        n += 1.0;
                        for ch in 0..c {
                            let v = xd[t * c + ch];
                            s1[ch] += v;
                            s2[ch] += v * v;
                        }
                    }
                    counts[t] = n;
                    for ch in 0..c {
                        let m = if n > 0.0 { s1[ch] / n } else { 0.0 };
                        let var = if n > 0.0 { (s2[ch] / n - m * m).max(0.0) } else { 0.0 };
                        let rv = 1.0 / (var + eps).sqrt();
                        mu[t * c + ch] = m;
                        r[t * c + ch] = rv;
                        out[t * c + ch] = (xd[t * c + ch] - m) * rv * gd[ch] + bd[ch];
                    }
                }
            }
            NormCache { mu, r, counts }
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            NdArray::new(vec![l, c], out)?,
            rg,
            Op::InstanceNorm { x, gamma, beta, mask: mask.map(|m| m.to_vec()), causal, spans, cache },
        ))
    }

    /// Layer normalization of `[L x C]`: per frame, statistics over channels.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!("layer_norm affine params must have length {c}")));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; l * c];
        let mut mu = vec![0.0; l];
        let mut r = vec![0.0; l];
        for t in 0..l {
            let row = &xd[t * c..(t + 1) * c];
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            let rv = 1.0 / (var + eps).sqrt();
            mu[t] = m;
            r[t] = rv;
            for ch in 0..c {
                out[t * c + ch] = (row[ch] - m) * rv * gd[ch] + bd[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            NdArray::new(vec![l, c], out)?,
            rg,
            Op::LayerNorm { x, gamma, beta, cache: NormCache { mu, r, counts: vec![c as f64] } },
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Silu => self.silu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Exp)
    }

    /// Natural log with the argument clamped from below.
    pub fn log_clamped(&mut self, x: NodeId, min: f64) -> Result<NodeId> {
        self.unary(x, UnaryKind::LogClamped { min })
    }

    /// Elementwise clamp into `[lo, hi]`; gradient is 1 strictly inside.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, UnaryKind::Clamp { lo, hi })
    }

    fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let v = self.value(x).map(|t| unary_forward(t, kind));
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::Unary { x, kind }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(NdArray::scalar(s), rg, Op::SumAll { x }))
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        if start > end || end > l {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {end}) out of bounds for {l} rows"
            )));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(vec![end - start, c], data)?, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        if start > end || end > c {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {end}) out of bounds for {c} columns"
            )));
        }
        let xd = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(l * w);
        for t in 0..l {
            data.extend_from_slice(&xd[t * c + start..t * c + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(vec![l, w], data)?, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_rows on empty list".into()));
        }
        let (_, c) = self.value(xs[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (li, ci) = self.value(x).dims2()?;
            if ci != c {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {ci} vs {c}"
                )));
            }
            rows += li;
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(NdArray::new(vec![rows, c], data)?, rg, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_cols on empty list".into()));
        }
        let (l, _) = self.value(xs[0]).dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &x in xs {
            let (li, ci) = self.value(x).dims2()?;
            if li != l {
                return Err(Error::Dimension(format!("concat_cols row mismatch: {li} vs {l}")));
            }
            widths.push(ci);
            total += ci;
        }
        let mut data = Vec::with_capacity(l * total);
        for t in 0..l {
            for (i, &x) in xs.iter().enumerate() {
                let w = widths[i];
                let xd = self.value(x).data();
                data.extend_from_slice(&xd[t * w..(t + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(NdArray::new(vec![l, total], data)?, rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Reorders rows: output row i is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
            return Err(Error::Dimension(format!("gather index {bad} out of bounds for {l} rows")));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            NdArray::new(vec![idx.len(), c], data)?,
            rg,
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    /// Appends zero rows until the array has `total_rows` rows.
    pub fn pad_rows(&mut self, x: NodeId, total_rows: usize) -> Result<NodeId> {
        let (l, c) = self.value(x).dims2()?;
        if total_rows < l {
            return Err(Error::Dimension(format!(
                "pad_rows target {total_rows} smaller than current {l}"
            )));
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(total_rows * c, 0.0);
        let rg = self.rg(x);
        Ok(self.push(NdArray::new(vec![total_rows, c], data)?, rg, Op::PadRows { x }))
    }

    /// Input-dependent state-space scan. Per channel the state evolves with
    /// per-timestep zero-order-hold discretization of the diagonal system.
    ///
    /// - `u`: `[L x C]` input sequence
    /// - `delta`: `[L x C]` positive timescales
    /// - `b`, `c`: `[L x N]` input/output projections per timestep
    /// - `a`: `[C x N]` diagonal state matrix entries (negative for stability)
    pub fn selective_scan(&mut self, u: NodeId, delta: NodeId, b: NodeId, c: NodeId, a: NodeId) -> Result<NodeId> {
        self.selective_scan_spans(u, delta, b, c, a, None)
    }

    /// Selective scan over independent `[start, end)` spans; the state resets
    /// to zero at each span start.
    pub fn selective_scan_spans(
        &mut self,
        u: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        a: NodeId,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<NodeId> {
        let (l, ch) = self.value(u).dims2()?;
        let spans = resolve_spans(l, spans)?;
        let (ld, cd) = self.value(delta).dims2()?;
        let (lb, n) = self.value(b).dims2()?;
        let (lc, nc) = self.value(c).dims2()?;
        let (ca, na) = self.value(a).dims2()?;
        if (ld, cd) != (l, ch) || lb != l || lc != l || nc != n || ca != ch || na != n {
            return Err(Error::Dimension(format!(
                "selective_scan shapes: u [{l}x{ch}], delta [{ld}x{cd}], b [{lb}x{n}], c [{lc}x{nc}], a [{ca}x{na}]"
            )));
        }
        let (y, cache) = scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(a).data(),
            l,
            ch,
            n,
            &spans,
        );
        let rg = self.rg(u) || self.rg(delta) || self.rg(b) || self.rg(c) || self.rg(a);
        Ok(self.push(
            NdArray::new(vec![l, ch], y)?,
            rg,
            Op::SelectiveScan { u, delta, b, c, a, spans, cache },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients of every tracked
    /// node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, gout: &[f64]) {
    let rg = |id: NodeId| nodes[id.0].requires_grad;
    let val = |id: NodeId| &nodes[id.0].value;
    // Every branch accumulates (+=) so fan-out sums correctly.
    macro_rules! grad_buf {
        ($id:expr) => {{
            let id: NodeId = $id;
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; nodes[id.0].value.numel()]);
            }
            grads[id.0].as_mut().unwrap()
        }};
    }

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            if rg(*a) {
                // ga += gout * b^T; b is transposed up front so the inner
                // accumulation runs over contiguous rows.
                let bd = val(*b).data();
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bd[p * n + j];
                    }
                }
                let ga = grad_buf!(*a);
                for r in 0..m {
                    let grow = &gout[r * n..(r + 1) * n];
                    let garow = &mut ga[r * k..(r + 1) * k];
                    for (j, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let btrow = &bt[j * k..(j + 1) * k];
                        for (ga_v, &bv) in garow.iter_mut().zip(btrow) {
                            *ga_v += gv * bv;
                        }
                    }
                }
            }
            if rg(*b) {
                let ad = val(*a).data();
                let gb = grad_buf!(*b);
                for r in 0..m {
                    let grow = &gout[r * n..(r + 1) * n];
                    let arow = &ad[r * k..(r + 1) * k];
                    for p in 0..k {
                        let av = arow[p];
                        if av == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for (gb_v, &gv) in gbrow.iter_mut().zip(grow) {
                            *gb_v += av * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose { x } => {
            let (r, c) = val(*x).dims2().unwrap();
            let gx = grad_buf!(*x);
            for i2 in 0..r {
                for j in 0..c {
                    gx[i2 * c + j] += gout[j * r + i2];
                }
            }
        }
        Op::Add { a, b } => {
            if rg(*a) {
                let ga = grad_buf!(*a);
                for (g, &o) in ga.iter_mut().zip(gout) {
                    *g += o;
                }
            }
            if rg(*b) {
                let gb = grad_buf!(*b);
                for (g, &o) in gb.iter_mut().zip(gout) {
                    *g += o;
                }
            }
        }
        Op::Sub { a, b } => {
            if rg(*a) {
                let ga = grad_buf!(*a);
                for (g, &o) in ga.iter_mut().zip(gout) {
                    *g += o;
                }
            }
            if rg(*b) {
                let gb = grad_buf!(*b);
                for (g, &o) in gb.iter_mut().zip(gout) {
                    *g -= o;
                }
            }
        }
        Op::Mul { a, b } => {
            if rg(*a) {
                let bd = val(*b).data();
                let ga = grad_buf!(*a);
                for idx in 0..gout.len() {
                    ga[idx] += gout[idx] * bd[idx];
                }
            }
            if rg(*b) {
                let ad = val(*a).data();
                let gb = grad_buf!(*b);
                for idx in 0..gout.len() {
                    gb[idx] += gout[idx] * ad[idx];
                }
            }
        }
        Op::AddRow { x, bias } => {
            let (l, c) = val(*x).dims2().unwrap();
            if rg(*x) {
                let gx = grad_buf!(*x);
                for (g, &o) in gx.iter_mut().zip(gout) {
                    *g += o;
                }
            }
            if rg(*bias) {
                let gb = grad_buf!(*bias);
                for t in 0..l {
                    for j in 0..c {
                        gb[j] += gout[t * c + j];
                    }
                }
            }
        }
        Op::Scale { x, c } => {
            let cv = *c;
            let gx = grad_buf!(*x);
            for (g, &o) in gx.iter_mut().zip(gout) {
                *g += o * cv;
            }
        }
        Op::AddConst { x } => {
            let gx = grad_buf!(*x);
            for (g, &o) in gx.iter_mut().zip(gout) {
                *g += o;
            }
        }
        Op::MulConst { x, c } => {
            let cd = c.data();
            let gx = grad_buf!(*x);
            for idx in 0..gout.len() {
                gx[idx] += gout[idx] * cd[idx];
            }
        }
        Op::MulScalar { x, s } => {
            let sv = val(*s).data()[0];
            if rg(*x) {
                let gx = grad_buf!(*x);
                for (g, &o) in gx.iter_mut().zip(gout) {
                    *g += o * sv;
                }
            }
            if rg(*s) {
                let xd = val(*x).data();
                let acc: f64 = xd.iter().zip(gout).map(|(&x, &o)| x * o).sum();
                let gs = grad_buf!(*s);
                gs[0] += acc;
            }
        }
        Op::Conv1d { x, kernel, dilation, padding } => {
            let (l, cin) = val(*x).dims2().unwrap();
            let kshape = val(*kernel).shape();
            let (k, cout) = (kshape[0], kshape[2]);
            let (dilation, padding) = (*dilation, *padding);
            if rg(*x) {
                // Kernel transposed to [k][cout][cin] so gx rows accumulate
                // contiguously.
                let kd = val(*kernel).data();
                let mut kt = vec![0.0; k * cout * cin];
                for j in 0..k {
                    for ci in 0..cin {
                        for co in 0..cout {
                            kt[(j * cout + co) * cin + ci] = kd[(j * cin + ci) * cout + co];
                        }
                    }
                }
                let gx = grad_buf!(*x);
                for t in 0..l {
                    let grow = &gout[t * cout..(t + 1) * cout];
                    for j in 0..k {
                        let Some(s) = conv_src(t, j, k, dilation, padding, l) else { continue };
                        let gxrow = &mut gx[s * cin..(s + 1) * cin];
                        for (co, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let ktrow = &kt[(j * cout + co) * cin..(j * cout + co + 1) * cin];
                            for (gx_v, &kv) in gxrow.iter_mut().zip(ktrow) {
                                *gx_v += gv * kv;
                            }
                        }
                    }
                }
            }
            if rg(*kernel) {
                let xd = val(*x).data();
                let gk = grad_buf!(*kernel);
                for t in 0..l {
                    for j in 0..k {
                        let Some(s) = conv_src(t, j, k, dilation, padding, l) else { continue };
                        for ci in 0..cin {
                            let xv = xd[s * cin + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let grow = &mut gk[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                            for co in 0..cout {
                                grow[co] += xv * gout[t * cout + co];
                            }
                        }
                    }
                }
            }
        }
        Op::ConvDepthwise { x, kernel, dilation, padding, spans } => {
            let (_, c) = val(*x).dims2().unwrap();
            let k = val(*kernel).shape()[0];
            let (dilation, padding) = (*dilation, *padding);
            if rg(*x) {
                let kd = val(*kernel).data();
                let gx = grad_buf!(*x);
                for &(start, end) in spans {
                    for t in start..end {
                        for j in 0..k {
                            let Some(s) = conv_src_span(t, j, k, dilation, padding, start, end) else { continue };
                            let grow = &gout[t * c..(t + 1) * c];
                            let krow = &kd[j * c..(j + 1) * c];
                            let gxrow = &mut gx[s * c..(s + 1) * c];
                            for ((g, &kv), &gv) in gxrow.iter_mut().zip(krow).zip(grow) {
                                *g += kv * gv;
                            }
                        }
                    }
                }
            }
            if rg(*kernel) {
                let xd = val(*x).data();
                let gk = grad_buf!(*kernel);
                for &(start, end) in spans {
                    for t in start..end {
                        for j in 0..k {
                            let Some(s) = conv_src_span(t, j, k, dilation, padding, start, end) else { continue };
                            let grow = &gout[t * c..(t + 1) * c];
                            let xrow = &xd[s * c..(s + 1) * c];
                            let gkrow = &mut gk[j * c..(j + 1) * c];
                            for ((g, &xv), &gv) in gkrow.iter_mut().zip(xrow).zip(grow) {
                                *g += xv * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = nodes[i].value.data();
            let shape = val(*x).shape();
            let (lane_count, lane_len, stride, base_step) = match shape {
                [n] => (1, *n, 1, *n),
                [r, c] => {
                    if *axis == 1 {
                        (*r, *c, 1usize, *c)
                    } else {
                        (*c, *r, *c, 1usize)
                    }
                }
                _ => unreachable!(),
            };
            let gx = grad_buf!(*x);
            for lane in 0..lane_count {
                let base = lane * base_step;
                let mut dot = 0.0;
                for idx in 0..lane_len {
                    let p = base + idx * stride;
                    dot += gout[p] * y[p];
                }
                for idx in 0..lane_len {
                    let p = base + idx * stride;
                    gx[p] += y[p] * (gout[p] - dot);
                }
            }
        }
        Op::InstanceNorm { x, gamma, beta, mask, causal, spans, cache } => {
            let (l, c) = val(*x).dims2().unwrap();
            let xd = val(*x).data();
            let gd = val(*gamma).data();
            let causal = *causal;
            let valid = |t: usize| mask.as_ref().map_or(true, |m| m[t]);
            let stats = |si: usize, t: usize, ch: usize| {
                if causal {
                    (cache.mu[t * c + ch], cache.r[t * c + ch])
                } else {
                    (cache.mu[si * c + ch], cache.r[si * c + ch])
                }
            };
            if rg(*gamma) || rg(*beta) {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (si, &(start, end)) in spans.iter().enumerate() {
                    for t in start..end {
                        for ch in 0..c {
                            let (mu, r) = stats(si, t, ch);
                            let xhat = (xd[t * c + ch] - mu) * r;
                            dgamma[ch] += gout[t * c + ch] * xhat;
                            dbeta[ch] += gout[t * c + ch];
                        }
                    }
                }
                if rg(*gamma) {
                    let gg = grad_buf!(*gamma);
                    for ch in 0..c {
                        gg[ch] += dgamma[ch];
                    }
                }
                if rg(*beta) {
                    let gb = grad_buf!(*beta);
                    for ch in 0..c {
                        gb[ch] += dbeta[ch];
                    }
                }
            }
            if rg(*x) {
                let mut dx = vec![0.0; l * c];
                if !causal {
                    for (si, &(start, end)) in spans.iter().enumerate() {
                        let n = cache.counts[si];
                        for ch in 0..c {
                            let mu = cache.mu[si * c + ch];
                            let r = cache.r[si * c + ch];
                            let mut sum_h = 0.0;
                            let mut sum_hx = 0.0;
                            for t in start..end {
                                let h = gout[t * c + ch] * gd[ch];
                                let xhat = (xd[t * c + ch] - mu) * r;
                                sum_h += h;
                                sum_hx += h * xhat;
                            }
                            for t in start..end {
                                let h = gout[t * c + ch] * gd[ch];
                                let xhat = (xd[t * c + ch] - mu) * r;
                                dx[t * c + ch] = if valid(t) && n > 0.0 {
                                    r * h - (r / n) * (sum_h + xhat * sum_hx)
                                } else {
                                    r * h
                                };
                            }
                        }
                    }
                } else {
                    // Suffix accumulation: x_s enters the statistics of every
                    // later frame in its span, so sweep t from the span end.
                    for &(start, end) in spans.iter() {
                        for ch in 0..c {
                            let mut acc_a = 0.0; // sum h_t r_t^3 (x_t - mu_t) / n_t
                            let mut acc_b = 0.0; // sum h_t r_t / n_t
                            let mut acc_d = 0.0; // sum h_t r_t^3 (x_t - mu_t) mu_t / n_t
                            for t in (start..end).rev() {
                                let h = gout[t * c + ch] * gd[ch];
                                let mu = cache.mu[t * c + ch];
                                let r = cache.r[t * c + ch];
                                let n = cache.counts[t];
                                if n > 0.0 {
                                    let w = h * r * r * r * (xd[t * c + ch] - mu) / n;
                                    acc_a += w;
                                    acc_b += h * r / n;
                                    acc_d += w * mu;
                                }
                                let direct = r * h;
                                dx[t * c + ch] = if valid(t) {
                                    direct - xd[t * c + ch] * acc_a + acc_d - acc_b
                                } else {
                                    direct
                                };
                            }
                        }
                    }
                }
                let gx = grad_buf!(*x);
                for idx in 0..l * c {
                    gx[idx] += dx[idx];
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, cache } => {
            let (l, c) = val(*x).dims2().unwrap();
            let xd = val(*x).data();
            let gd = val(*gamma).data();
            if rg(*gamma) || rg(*beta) {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for t in 0..l {
                    let (mu, r) = (cache.mu[t], cache.r[t]);
                    for ch in 0..c {
                        let xhat = (xd[t * c + ch] - mu) * r;
                        dgamma[ch] += gout[t * c + ch] * xhat;
                        dbeta[ch] += gout[t * c + ch];
                    }
                }
                if rg(*gamma) {
                    let gg = grad_buf!(*gamma);
                    for ch in 0..c {
                        gg[ch] += dgamma[ch];
                    }
                }
                if rg(*beta) {
                    let gb = grad_buf!(*beta);
                    for ch in 0..c {
                        gb[ch] += dbeta[ch];
                    }
                }
            }
            if rg(*x) {
                let n = c as f64;
                let gx = grad_buf!(*x);
                for t in 0..l {
                    let (mu, r) = (cache.mu[t], cache.r[t]);
                    let mut sum_h = 0.0;
                    let mut sum_hx = 0.0;
                    for ch in 0..c {
                        let h = gout[t * c + ch] * gd[ch];
                        let xhat = (xd[t * c + ch] - mu) * r;
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                    for ch in 0..c {
                        let h = gout[t * c + ch] * gd[ch];
                        let xhat = (xd[t * c + ch] - mu) * r;
                        gx[t * c + ch] += r * (h - (sum_h + xhat * sum_hx) / n);
                    }
                }
            }
        }
        Op::Unary { x, kind } => {
            let xd = val(*x).data();
            let yd = nodes[i].value.data();
            let kind = *kind;
            let gx = grad_buf!(*x);
            for idx in 0..gout.len() {
                gx[idx] += gout[idx] * unary_backward(xd[idx], yd[idx], kind);
            }
        }
        Op::SumAll { x } => {
            let g = gout[0];
            let gx = grad_buf!(*x);
            for v in gx.iter_mut() {
                *v += g;
            }
        }
        Op::SliceRows { x, start } => {
            let c = val(*x).shape()[1];
            let start = *start;
            let gx = grad_buf!(*x);
            for (idx, &o) in gout.iter().enumerate() {
                gx[start * c + idx] += o;
            }
        }
        Op::SliceCols { x, start } => {
            let (l, c) = val(*x).dims2().unwrap();
            let w = gout.len() / l;
            let start = *start;
            let gx = grad_buf!(*x);
            for t in 0..l {
                for j in 0..w {
                    gx[t * c + start + j] += gout[t * w + j];
                }
            }
        }
        Op::ConcatRows { xs } => {
            let mut offset = 0;
            for &x in xs {
                let numel = val(x).numel();
                if rg(x) {
                    let gx = grad_buf!(x);
                    for idx in 0..numel {
                        gx[idx] += gout[offset + idx];
                    }
                }
                offset += numel;
            }
        }
        Op::ConcatCols { xs } => {
            let l = val(xs[0]).shape()[0];
            let total: usize = xs.iter().map(|&x| val(x).shape()[1]).sum();
            let mut col = 0;
            for &x in xs {
                let w = val(x).shape()[1];
                if rg(x) {
                    let gx = grad_buf!(x);
                    for t in 0..l {
                        for j in 0..w {
                            gx[t * w + j] += gout[t * total + col + j];
                        }
                    }
                }
                col += w;
            }
        }
        Op::GatherRows { x, idx } => {
            let c = val(*x).shape()[1];
            let gx = grad_buf!(*x);
            for (row, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[src * c + j] += gout[row * c + j];
                }
            }
        }
        Op::PadRows { x } => {
            let numel = val(*x).numel();
            let gx = grad_buf!(*x);
            for idx in 0..numel {
                gx[idx] += gout[idx];
            }
        }
        Op::SelectiveScan { u, delta, b, c, a, spans, cache } => {
            let (l, ch) = val(*u).dims2().unwrap();
            let n = val(*b).shape()[1];
            let scan_grads = scan_backward(
                gout,
                val(*u).data(),
                val(*delta).data(),
                val(*b).data(),
                val(*c).data(),
                val(*a).data(),
                cache,
                l,
                ch,
                n,
                spans,
            );
            if rg(*u) {
                let gu = grad_buf!(*u);
                for (g, s) in gu.iter_mut().zip(&scan_grads.du) {
                    *g += s;
                }
            }
            if rg(*delta) {
                let gd = grad_buf!(*delta);
                for (g, s) in gd.iter_mut().zip(&scan_grads.ddelta) {
                    *g += s;
                }
            }
            if rg(*b) {
                let gb = grad_buf!(*b);
                for (g, s) in gb.iter_mut().zip(&scan_grads.db) {
                    *g += s;
                }
            }
            if rg(*c) {
                let gc = grad_buf!(*c);
                for (g, s) in gc.iter_mut().zip(&scan_grads.dc) {
                    *g += s;
                }
            }
            if rg(*a) {
                let ga = grad_buf!(*a);
                for (g, s) in ga.iter_mut().zip(&scan_grads.da) {
                    *g += s;
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Source frame index for kernel tap `j` at output frame `t`, or `None` when
/// the tap falls into padding.
#[inline]
fn conv_src(t: usize, j: usize, k: usize, dilation: usize, padding: Padding, l: usize) -> Option<usize> {
    conv_src_span(t, j, k, dilation, padding, 0, l)
}

/// Span-aware variant: taps outside `[start, end)` fall into padding.
#[inline]
fn conv_src_span(
    t: usize,
    j: usize,
    k: usize,
    dilation: usize,
    padding: Padding,
    start: usize,
    end: usize,
) -> Option<usize> {
    let offset = match padding {
        Padding::Same => (j as isize - (k as isize - 1) / 2) * dilation as isize,
        Padding::Causal => (j as isize - (k as isize - 1)) * dilation as isize,
    };
    let s = t as isize + offset;
    if s >= start as isize && s < end as isize {
        Some(s as usize)
    } else {
        None
    }
}

/// Validates that spans tile `[0, l)` contiguously; `None` means one span.
fn resolve_spans(l: usize, spans: Option<&[(usize, usize)]>) -> Result<Vec<(usize, usize)>> {
    match spans {
        None => Ok(vec![(0, l)]),
        Some(s) => {
            let mut expect = 0;
            for &(a, b) in s {
                if a != expect || b <= a {
                    return Err(Error::Dimension(format!(
                        "spans must tile the sequence; got {s:?} for {l} rows"
                    )));
                }
                expect = b;
            }
            if expect != l {
                return Err(Error::Dimension(format!(
                    "spans cover {expect} of {l} rows"
                )));
            }
            Ok(s.to_vec())
        }
    }
}

/// Row-major matrix product with i-k-j loop order. The first inner pass
/// writes instead of accumulating, so the output needs no zero fill.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; m * n];
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let av0 = arow[0];
        let brow0 = &b[0..n];
        out.extend(brow0.iter().map(|&bv| av0 * bv));
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate().skip(1) {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn unary_forward(x: f64, kind: UnaryKind) -> f64 {
    match kind {
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Gelu => {
            let u = GELU_K * (x + GELU_C * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::LogClamped { min } => x.max(min).ln(),
        UnaryKind::Clamp { lo, hi } => x.clamp(lo, hi),
    }
}

fn unary_backward(x: f64, y: f64, kind: UnaryKind) -> f64 {
    match kind {
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Gelu => {
            let u = GELU_K * (x + GELU_C * x * x * x);
            let t = u.tanh();
            let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Exp => y,
        UnaryKind::LogClamped { min } => {
            if x > min {
                1.0 / x
            } else {
                0.0
            }
        }
        UnaryKind::Clamp { lo, hi } => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
        let n: usize = shape.iter().product();
        NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Central finite differences against the recorded gradients. `build`
    /// must construct the same scalar loss from the given leaves every call.
    fn fd_check(
        inputs: &[NdArray],
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
        rtol: f64,
        atol: f64,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        let grads: Vec<NdArray> = ids
            .iter()
            .map(|&id| g.grad(id).unwrap_or_else(|| NdArray::zeros(g.value(id).shape())))
            .collect();

        let eval = |xs: &[NdArray]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|a| g.leaf(a.clone())).collect();
            let loss = build(&mut g, &ids);
            g.value(loss).data()[0]
        };

        let eps = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            for k in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ad = grads[i].data()[k];
                let err = (ad - fd).abs();
                let bound = atol + rtol * fd.abs().max(ad.abs());
                assert!(
                    err <= bound,
                    "input {i} coord {k}: autodiff {ad} vs fd {fd} (err {err:.3e})"
                );
            }
        }
    }

    // ── forward oracles ─────────────────────────────────────────────────

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(NdArray::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(NdArray::new(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap());
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(y).data(), g.value(m).data());
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(NdArray::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::zeros(&[2, 3]));
        let b = g.constant(NdArray::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn conv1d_center_tap_identity_for_all_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, c) = (17, 3);
        let x = rand_array(&mut rng, &[l, c], -2.0, 2.0);
        // kernel [3 x C x C]: middle tap holds the identity channel map.
        let mut kd = vec![0.0; 3 * c * c];
        for ch in 0..c {
            kd[(c + ch) * c + ch] = 1.0;
        }
        let kernel = NdArray::new(vec![3, c, c], kd).unwrap();
        for dilation in [1, 2, 5, 16] {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let kn = g.constant(kernel.clone());
            let y = g.conv1d(xn, kn, dilation, Padding::Same).unwrap();
            assert_eq!(g.value(y).data(), x.data(), "dilation {dilation}");
        }
    }

    #[test]
    fn conv1d_impulse_dilation_offsets() {
        // Unit impulse at frame 8; k=3, dilation=2: taps land at 6, 8, 10.
        let (l, imp) = (16, 8);
        let mut xd = vec![0.0; l];
        xd[imp] = 1.0;
        let x = NdArray::new(vec![l, 1], xd).unwrap();
        let kernel = NdArray::new(vec![3, 1, 1], vec![0.3, 0.5, 0.7]).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let kn = g.constant(kernel);
        let y = g.conv1d(xn, kn, 2, Padding::Same).unwrap();
        for t in 0..l {
            let v = g.value(y).data()[t];
            match t as isize - imp as isize {
                // Kernel tap j reads x[t + (j-1)*2]: the impulse response is
                // the reversed kernel around the impulse.
                -2 => assert!((v - 0.7).abs() < 1e-15),
                0 => assert!((v - 0.5).abs() < 1e-15),
                2 => assert!((v - 0.3).abs() < 1e-15),
                _ => assert_eq!(v, 0.0, "unexpected response at offset {}", t as isize - 8),
            }
        }
    }

    #[test]
    fn conv1d_causal_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, c) = (12, 2);
        let x = rand_array(&mut rng, &[l, c], -1.0, 1.0);
        let kernel = rand_array(&mut rng, &[3, c, c], -1.0, 1.0);
        let run = |x: &NdArray| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let kn = g.constant(kernel.clone());
            let y = g.conv1d(xn, kn, 2, Padding::Causal).unwrap();
            g.value(y).clone()
        };
        let y0 = run(&x);
        let t = 7;
        let mut x2 = x.clone();
        x2.set(t + 1, 0, 99.0);
        let y1 = run(&x2);
        for s in 0..=t {
            assert_eq!(y0.row(s), y1.row(s), "frame {s} saw the future");
        }
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::zeros(&[4, 1]));
        let k = g.constant(NdArray::zeros(&[2, 1, 1]));
        assert!(matches!(g.conv1d(x, k, 1, Padding::Same), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(NdArray::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stabilized() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for axis in [0usize, 1] {
            let x = rand_array(&mut rng, &[7, 5], -10.0, 10.0);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let y = g.softmax(xn, axis).unwrap();
            let v = g.value(y);
            let (r, c) = v.dims2().unwrap();
            let lanes: Vec<f64> = if axis == 1 {
                (0..r).map(|i| v.row(i).iter().sum()).collect()
            } else {
                (0..c).map(|j| (0..r).map(|i| v.at(i, j)).sum()).collect()
            };
            for s in lanes {
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::filled(&[5, 2], 3.3));
        let gamma = g.constant(NdArray::filled(&[2], 1.0));
        let beta = g.constant(NdArray::zeros(&[2]));
        let y = g.instance_norm(x, gamma, beta, 1e-5, None, false).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_two_point_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::new(vec![2, 1], vec![-1.0, 1.0]).unwrap());
        let gamma = g.constant(NdArray::filled(&[1], 1.0));
        let beta = g.constant(NdArray::zeros(&[1]));
        let eps = 1e-5;
        let y = g.instance_norm(x, gamma, beta, eps, None, false).unwrap();
        let expected = 1.0 / (1.0 + eps).sqrt();
        assert!((g.value(y).data()[0] + expected).abs() < 1e-12);
        assert!((g.value(y).data()[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_standardizes_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, c) = (64, 3);
        let x = rand_array(&mut rng, &[l, c], -4.0, 4.0);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let gamma = g.constant(NdArray::filled(&[c], 1.0));
        let beta = g.constant(NdArray::zeros(&[c]));
        let y = g.instance_norm(xn, gamma, beta, 1e-8, None, false).unwrap();
        let v = g.value(y);
        for ch in 0..c {
            let mean: f64 = (0..l).map(|t| v.at(t, ch)).sum::<f64>() / l as f64;
            let var: f64 = (0..l).map(|t| (v.at(t, ch) - mean).powi(2)).sum::<f64>() / l as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn activations_at_origin_and_tails() {
        let mut g = Graph::new();
        let x = g.constant(NdArray::new(vec![3], vec![0.0, 10.0, -10.0]).unwrap());
        let s = g.silu(x).unwrap();
        let e = g.gelu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.0);
        assert_eq!(g.value(e).data()[0], 0.0);
        assert!((g.value(s).data()[1] - 9.999546).abs() < 1e-5);
    }

    #[test]
    fn gelu_shape_on_grid() {
        // Grid scan: gelu dips to a single minimum near -0.75 and is monotone
        // non-decreasing to the right of it; far-left values approach 0 from
        // below, so it is not monotone over all of [-5, 5].
        let mut g = Graph::new();
        let pts: Vec<f64> = (0..=1000).map(|i| -5.0 + i as f64 * 0.01).collect();
        let x = g.constant(NdArray::new(vec![pts.len()], pts.clone()).unwrap());
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        let (argmin, min) = v
            .iter()
            .enumerate()
            .fold((0, f64::MAX), |(ai, m), (i, &x)| if x < m { (i, x) } else { (ai, m) });
        assert!((pts[argmin] + 0.75).abs() < 0.05, "minimum at {}", pts[argmin]);
        assert!((min + 0.17).abs() < 0.01, "minimum value {min}");
        for w in v[argmin..].windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        // The dip means the first grid value exceeds the minimum region.
        assert!(v[0] > min);
    }

    #[test]
    fn unknown_activation_kind_is_config_error() {
        let err = "swish".parse::<Activation>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!("silu".parse::<Activation>().unwrap(), Activation::Silu);
    }

    // ── backward ────────────────────────────────────────────────────────

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(NdArray::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_softmax_sum_is_conserved() {
        let mut g = Graph::new();
        let x = g.leaf(NdArray::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(NdArray::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn backward_composite_matches_finite_differences() {
        // matmul -> instance_norm -> gelu -> weighted sum, against central
        // finite differences with eps = 1e-5.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (l, d, c) = (6, 4, 3);
        let weights = rand_array(&mut rng, &[l, c], -1.0, 1.0);
        let inputs = vec![
            rand_array(&mut rng, &[l, d], -1.0, 1.0),
            rand_array(&mut rng, &[d, c], -1.0, 1.0),
            rand_array(&mut rng, &[c], 0.5, 1.5),
            rand_array(&mut rng, &[c], -0.5, 0.5),
        ];
        fd_check(
            &inputs,
            |g, ids| {
                let mm = g.matmul(ids[0], ids[1]).unwrap();
                let norm = g.instance_norm(mm, ids[2], ids[3], 1e-5, None, false).unwrap();
                let act = g.gelu(norm).unwrap();
                let w = g.mul_const(act, &weights).unwrap();
                g.sum_all(w).unwrap()
            },
            1e-4,
            1e-7,
        );
    }

    #[test]
    fn every_op_passes_gradient_checks_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, c) = (5, 4);
            let weights = rand_array(&mut rng, &[l, c], -1.0, 1.0);
            let wcol = rand_array(&mut rng, &[l, 2], -1.0, 1.0);
            let wrow = rand_array(&mut rng, &[2, 2], -1.0, 1.0);
            let mask = vec![true, true, true, false, true];

            // Elementwise / reduction / norm chain.
            let inputs = vec![
                rand_array(&mut rng, &[l, c], -1.5, 1.5),
                rand_array(&mut rng, &[l, c], -1.5, 1.5),
                rand_array(&mut rng, &[c], 0.5, 1.5),
                rand_array(&mut rng, &[c], -0.5, 0.5),
                rand_array(&mut rng, &[1], 0.5, 1.5),
            ];
            let m = mask.clone();
            fd_check(
                &inputs,
                move |g, ids| {
                    let a = g.add(ids[0], ids[1]).unwrap();
                    let s = g.silu(a).unwrap();
                    let sp = g.softplus(s).unwrap();
                    let sg = g.sigmoid(sp).unwrap();
                    let ln = g.layer_norm(sg, ids[2], ids[3], 1e-5).unwrap();
                    let inorm = g.instance_norm(ln, ids[2], ids[3], 1e-5, Some(&m), false).unwrap();
                    let sc = g.mul_scalar(inorm, ids[4]).unwrap();
                    let sm = g.softmax(sc, 1).unwrap();
                    let lg = g.log_clamped(sm, 1e-12).unwrap();
                    let cl = g.clamp(lg, -3.0, 3.0).unwrap();
                    let w = g.mul_const(cl, &weights).unwrap();
                    g.sum_all(w).unwrap()
                },
                1e-4,
                1e-7,
            );

            // Structural ops: transpose, slices, concats, gather, pad.
            let inputs2 = vec![rand_array(&mut rng, &[l, c], -1.0, 1.0)];
            let wc = wcol.clone();
            fd_check(
                &inputs2,
                move |g, ids| {
                    let t = g.transpose(ids[0]).unwrap();
                    let back = g.transpose(t).unwrap();
                    let left = g.slice_cols(back, 0, 2).unwrap();
                    let right = g.slice_cols(back, 2, c).unwrap();
                    let glued = g.concat_cols(&[left, right]).unwrap();
                    let top = g.slice_rows(glued, 0, 3).unwrap();
                    let bottom = g.slice_rows(glued, 3, l).unwrap();
                    let rows = g.concat_rows(&[top, bottom]).unwrap();
                    let gathered = g.gather_rows(rows, &[4, 2, 0, 1, 3]).unwrap();
                    let padded = g.pad_rows(gathered, l + 2).unwrap();
                    let cut = g.slice_rows(padded, 0, l).unwrap();
                    let kept = g.slice_cols(cut, 0, 2).unwrap();
                    let w = g.mul_const(kept, &wc).unwrap();
                    g.sum_all(w).unwrap()
                },
                1e-4,
                1e-7,
            );

            // Convolutions and matmul with bias.
            let inputs3 = vec![
                rand_array(&mut rng, &[l, 2], -1.0, 1.0),
                rand_array(&mut rng, &[3, 2, 2], -1.0, 1.0),
                rand_array(&mut rng, &[3, 2], -1.0, 1.0),
                rand_array(&mut rng, &[2], -0.5, 0.5),
            ];
            let wr = wrow.clone();
            fd_check(
                &inputs3,
                move |g, ids| {
                    let conv = g.conv1d(ids[0], ids[1], 2, Padding::Same).unwrap();
                    let dw = g.conv1d_depthwise(conv, ids[2], 1, Padding::Causal).unwrap();
                    let biased = g.add_row(dw, ids[3]).unwrap();
                    let e = g.exp(biased).unwrap();
                    let t = g.transpose(e).unwrap();
                    let mm = g.matmul(t, ids[0]).unwrap();
                    let sub = g.sub(mm, mm).unwrap();
                    let add = g.add(mm, sub).unwrap();
                    let w = g.mul_const(add, &wr).unwrap();
                    g.sum_all(w).unwrap()
                },
                1e-4,
                1e-7,
            );
        }
    }

    #[test]
    fn selective_scan_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (l, ch, n) = (6, 2, 3);
            let weights = rand_array(&mut rng, &[l, ch], -1.0, 1.0);
            let inputs = vec![
                rand_array(&mut rng, &[l, ch], -1.0, 1.0),
                rand_array(&mut rng, &[l, ch], 0.05, 0.5),
                rand_array(&mut rng, &[l, n], -1.0, 1.0),
                rand_array(&mut rng, &[l, n], -1.0, 1.0),
                rand_array(&mut rng, &[ch, n], -2.0, -0.1),
            ];
            fd_check(
                &inputs,
                move |g, ids| {
                    let y = g.selective_scan(ids[0], ids[1], ids[2], ids[3], ids[4]).unwrap();
                    let w = g.mul_const(y, &weights).unwrap();
                    g.sum_all(w).unwrap()
                },
                1e-3,
                1e-7,
            );
        }
    }

    #[test]
    fn causal_instance_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (l, c) = (7, 3);
        let weights = rand_array(&mut rng, &[l, c], -1.0, 1.0);
        let mask = vec![true, true, false, true, true, true, false];
        let inputs = vec![
            rand_array(&mut rng, &[l, c], -1.5, 1.5),
            rand_array(&mut rng, &[c], 0.5, 1.5),
            rand_array(&mut rng, &[c], -0.5, 0.5),
        ];
        fd_check(
            &inputs,
            move |g, ids| {
                let y = g.instance_norm(ids[0], ids[1], ids[2], 1e-5, Some(&mask), true).unwrap();
                let w = g.mul_const(y, &weights).unwrap();
                g.sum_all(w).unwrap()
            },
            1e-4,
            1e-7,
        );
    }

    #[test]
    fn params_are_memoized_and_grads_accumulate() {
        let mut store = ParamStore::new();
        let p = store.add("w", NdArray::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let n1 = g.param(&store, p);
        let n2 = g.param(&store, p);
        assert_eq!(n1, n2);
        // loss = sum(w * w) + sum(w) -> grad = 2w + 1
        let sq = g.mul(n1, n2).unwrap();
        let s1 = g.sum_all(sq).unwrap();
        let s2 = g.sum_all(n1).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        g.write_grads(&mut store);
        assert_eq!(store.entry(p).grad, vec![3.0, 5.0]);
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            let x = rand_array(&mut rng, &[8, 4], -1.0, 1.0);
            let k = rand_array(&mut rng, &[3, 4, 4], -1.0, 1.0);
            let mut g = Graph::new();
            let xn = g.leaf(x);
            let kn = g.constant(k);
            let conv = g.conv1d(xn, kn, 1, Padding::Same).unwrap();
            let act = g.gelu(conv).unwrap();
            let loss = g.sum_all(act).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).data().to_vec(), g.grad(xn).unwrap().data().to_vec())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
