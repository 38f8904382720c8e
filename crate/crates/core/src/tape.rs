//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A `Tape` is a single computation graph: ops append nodes in topological
//! order, `backward` replays them in exact reverse order and accumulates
//! gradients into registered parameters. Tapes are single-threaded; separate
//! tapes are independent and may live on different threads.
//!
//! Two details matter for the rest of the crate:
//!
//! * the straight-through node uses sampled hard values in the forward pass
//!   and routes the incoming gradient unchanged to its soft input, and
//! * node values are freed eagerly during the reverse sweep, so the byte
//!   counters report exactly what is retained for backward at any moment.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::loss::ctc_dp::{self, CtcItemSaved};
use crate::scalar::Scalar;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

/// Stable identifier of a parameter in a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Region label for per-candidate execution counters: (block index, candidate index).
pub type Region = (u32, u32);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    /// Intermediate computed outside the tape (no gradient path), but charged
    /// to the activation accountant because backward rules read its value.
    ConstActivation,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: T },
    Exp { a: TensorId },
    Ln { a: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    /// Frame-wise matmul: `a` is treated as `[rows, k]` over its trailing axis.
    Matmul { a: TensorId, b: TensorId, rows: usize, k: usize, n: usize },
    Conv1d { x: TensorId, w: TensorId, bias: TensorId, geom: ConvGeom },
    Softmax { a: TensorId, width: usize },
    LogSoftmax { a: TensorId, width: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Detach,
    StraightThrough { soft: TensorId },
    WeightedSum { weights: TensorId, terms: Vec<TensorId> },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, width: usize, stats: Vec<T> },
    /// Mean negative log-likelihood over rows of log-probabilities.
    /// A target of `u32::MAX` marks a padded row that does not contribute.
    NllMean { log_probs: TensorId, targets: Vec<u32>, width: usize, n_valid: usize },
    /// Mean per-item CTC negative log-probability over a batch.
    Ctc { log_probs: TensorId, saved: Vec<CtcItemSaved<T>>, vocab: usize, max_t: usize },
}

/// Value + gradient holder forming one node of the computation graph.
#[derive(Debug)]
pub struct Tensor<T: Scalar> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Option<Vec<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    region: Option<Region>,
    counted_bytes: usize,
}

/// Gradients accumulated by one backward pass, keyed by parameter id.
///
/// Parameters registered on the tape but unreachable from the root get an
/// explicit zero gradient; parameters never registered are absent.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    entries: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, pid: ParamId) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == pid)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Output of a consumed tape.
#[derive(Debug)]
pub struct BackwardReport<T: Scalar> {
    pub grads: Gradients<T>,
    /// Regions whose backward rules actually fired (per-candidate counters).
    pub fired_regions: BTreeSet<Region>,
    /// Peak retained-activation bytes observed over forward + backward.
    pub peak_activation_bytes: usize,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    param_nodes: Vec<(ParamId, TensorId)>,
    region: Option<Region>,
    parallel: bool,
    cur_bytes: usize,
    peak_bytes: usize,
    backward_fault: Option<&'static str>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            region: None,
            parallel: kernels::DEFAULT_PARALLEL,
            cur_bytes: 0,
            peak_bytes: 0,
            backward_fault: None,
        }
    }

    /// Tag subsequently created nodes with a (block, candidate) region.
    pub fn set_region(&mut self, region: Option<Region>) {
        self.region = region;
    }

    /// Test fixture: corrupt the backward rule of the named op ("mul") so the
    /// gradcheck negative control has a real defect to catch.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.backward_fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].shape.iter().product()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Current and peak retained-activation bytes.
    pub fn activation_bytes(&self) -> (usize, usize) {
        (self.cur_bytes, self.peak_bytes)
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        self.nodes[id.0]
            .value
            .as_deref()
            .expect("tensor value already freed by backward")
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        v[0]
    }

    fn push(
        &mut self,
        op: Op<T>,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        param: Option<ParamId>,
        counted: bool,
    ) -> TensorId {
        #[cfg(debug_assertions)]
        {
            if !matches!(op, Op::Ctc { .. }) {
                debug_assert!(
                    value.iter().all(|v| v.is_finite()),
                    "non-finite value produced by forward op"
                );
            }
        }
        let counted_bytes = if counted { value.len() * T::BYTES } else { 0 };
        self.cur_bytes += counted_bytes;
        self.peak_bytes = self.peak_bytes.max(self.cur_bytes);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            op,
            shape,
            value: Some(value),
            grad: None,
            requires_grad,
            param,
            region: self.region,
            counted_bytes,
        });
        id
    }

    /// External input (data or parameter copy); not charged to the accountant.
    pub fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        self.push(Op::Leaf, shape.to_vec(), values, requires_grad, None, false)
    }

    /// Register a parameter leaf. Repeat registrations of the same id return
    /// the existing node so gradient accumulation stays merged.
    pub fn param(&mut self, pid: ParamId, values: &[T], shape: &[usize], requires_grad: bool) -> TensorId {
        if let Some(&(_, id)) = self.param_nodes.iter().find(|(p, _)| *p == pid) {
            return id;
        }
        let id = self.push(
            Op::Leaf,
            shape.to_vec(),
            values.to_vec(),
            requires_grad,
            Some(pid),
            false,
        );
        self.param_nodes.push((pid, id));
        id
    }

    /// Intermediate computed outside the tape (e.g. an unsampled candidate
    /// output). Retained for backward rules that read it, hence counted.
    pub fn const_activation(&mut self, values: Vec<T>, shape: &[usize]) -> TensorId {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        self.push(Op::ConstActivation, shape.to_vec(), values, false, None, true)
    }

    fn binary_shapes_equal(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shapes_equal("add", a, b)?;
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::add_into(self.parallel, self.value(a), self.value(b), &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add { a, b }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shapes_equal("sub", a, b)?;
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::sub_into(self.parallel, self.value(a), self.value(b), &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Sub { a, b }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shapes_equal("mul", a, b)?;
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::mul_into(self.parallel, self.value(a), self.value(b), &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Mul { a, b }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::scale_into(self.parallel, self.value(a), c, &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Scale { a, c }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::exp_into(self.parallel, self.value(a), &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Exp { a }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::ln_into(self.parallel, self.value(a), &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Ln { a }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    /// Trailing-dimension broadcast add: `a[..., n] + bias[n]`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let n = *self.shape(a).last().ok_or_else(|| Error::shape("add_bias", "scalar input"))?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs trailing dim {}", self.shape(bias), n),
            ));
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut out = vec![T::ZERO; av.len()];
        for (row_o, row_a) in out.chunks_mut(n).zip(av.chunks(n)) {
            for j in 0..n {
                row_o[j] = row_a[j] + bv[j];
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(Op::AddBias { a, bias }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    /// Frame-wise matmul: `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let k = *self.shape(a).last().ok_or_else(|| Error::shape("matmul", "scalar lhs"))?;
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("lhs trailing {} vs rhs {:?}", k, bs),
            ));
        }
        let n = bs[1];
        let rows = self.numel(a) / k;
        let mut out = vec![T::ZERO; rows * n];
        kernels::mm_nn_into(self.parallel, self.value(a), self.value(b), &mut out, rows, k, n);
        let mut shape = self.nodes[a.0].shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Matmul { a, b, rows, k, n }, shape, out, rg, None, true))
    }

    /// Dilated temporal convolution: `x[b, t, ci]` with `w[2h+1, ci, co]`.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        half_context: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<TensorId> {
        if dilation < 1 || stride < 1 {
            return Err(Error::contract(
                "conv1d",
                format!("dilation {} and stride {} must be >= 1", dilation, stride),
            ));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv1d", format!("input {:?}, want [b, t, c]", xs)));
        }
        let taps = 2 * half_context + 1;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != taps || ws[1] != xs[2] {
            return Err(Error::shape(
                "conv1d",
                format!("weights {:?}, want [{}, {}, co]", ws, taps, xs[2]),
            ));
        }
        let co = ws[2];
        if self.shape(bias) != [co] {
            return Err(Error::shape("conv1d", format!("bias {:?}, want [{}]", self.shape(bias), co)));
        }
        let geom = ConvGeom {
            batch: xs[0],
            t_in: xs[1],
            c_in: xs[2],
            c_out: co,
            half_context,
            dilation,
            stride,
        };
        let mut out = vec![T::ZERO; geom.batch * geom.t_out() * co];
        kernels::conv1d_forward_into(
            self.parallel,
            self.value(x),
            self.value(w),
            self.value(bias),
            geom,
            &mut out,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(bias);
        Ok(self.push(
            Op::Conv1d { x, w, bias, geom },
            vec![geom.batch, geom.t_out(), co],
            out,
            rg,
            None,
            true,
        ))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let width = *self.shape(a).last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::softmax_rows_into(self.parallel, self.value(a), width, &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Softmax { a, width }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let width = *self.shape(a).last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let mut out = vec![T::ZERO; self.numel(a)];
        kernels::log_softmax_rows_into(self.parallel, self.value(a), width, &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::LogSoftmax { a, width }, self.nodes[a.0].shape.clone(), out, rg, None, true))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s = kernels::sum_all(self.parallel, self.value(a));
        let rg = self.requires_grad(a);
        Ok(self.push(Op::SumAll { a }, vec![], vec![s], rg, None, true))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.numel(a);
        if n == 0 {
            return Err(Error::contract("mean_all", "empty tensor"));
        }
        let s = kernels::sum_all(self.parallel, self.value(a)) / T::from_f64(n as f64);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::MeanAll { a }, vec![], vec![s], rg, None, true))
    }

    /// Forward copy with the gradient path severed.
    pub fn detach(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).to_vec();
        Ok(self.push(Op::Detach, self.nodes[a.0].shape.clone(), v, false, None, true))
    }

    /// Forward takes `hard`'s values; backward passes the incoming gradient
    /// unchanged to `soft` (equivalently `soft + detach(hard - soft)`).
    /// `hard` must not carry a gradient path of its own.
    pub fn straight_through(&mut self, hard: TensorId, soft: TensorId) -> Result<TensorId> {
        self.binary_shapes_equal("straight_through", hard, soft)?;
        if self.requires_grad(hard) {
            return Err(Error::contract(
                "straight_through",
                "hard input must not carry a gradient path",
            ));
        }
        let v = self.value(hard).to_vec();
        let rg = self.requires_grad(soft);
        Ok(self.push(
            Op::StraightThrough { soft },
            self.nodes[soft.0].shape.clone(),
            v,
            rg,
            None,
            true,
        ))
    }

    /// `out = sum_k weights[k] * terms[k]`, the mixture carrier for every
    /// block operation (continuous, soft-sampled or gated).
    pub fn weighted_sum(&mut self, weights: TensorId, terms: &[TensorId]) -> Result<TensorId> {
        let k = terms.len();
        if self.shape(weights) != [k] {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {:?} vs {} terms", self.shape(weights), k),
            ));
        }
        if k == 0 {
            return Err(Error::contract("weighted_sum", "no terms"));
        }
        for &t in terms {
            self.binary_shapes_equal("weighted_sum", terms[0], t)?;
        }
        let n = self.numel(terms[0]);
        let wv = self.value(weights).to_vec();
        let mut out = vec![T::ZERO; n];
        for (kk, &t) in terms.iter().enumerate() {
            let tv = self.value(t);
            let w = wv[kk];
            for (o, &x) in out.iter_mut().zip(tv.iter()) {
                *o += w * x;
            }
        }
        let rg = self.requires_grad(weights) || terms.iter().any(|&t| self.requires_grad(t));
        Ok(self.push(
            Op::WeightedSum { weights, terms: terms.to_vec() },
            self.nodes[terms[0].0].shape.clone(),
            out,
            rg,
            None,
            true,
        ))
    }

    /// Layer normalization over the trailing axis, epsilon 1e-5.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let width = *self.shape(x).last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs width {}",
                    self.shape(gain),
                    self.shape(bias),
                    width
                ),
            ));
        }
        let rows = self.numel(x) / width;
        let mut out = vec![T::ZERO; rows * width];
        let mut stats = vec![T::ZERO; rows * 2];
        kernels::layer_norm_forward_into(
            self.parallel,
            self.value(x),
            self.value(gain),
            self.value(bias),
            width,
            T::from_f64(1e-5),
            &mut out,
            &mut stats,
        );
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, width, stats },
            self.nodes[x.0].shape.clone(),
            out,
            rg,
            None,
            true,
        ))
    }

    /// Mean negative log-likelihood of `targets` under rows of
    /// log-probabilities. `u32::MAX` marks padded rows.
    pub fn nll_mean(&mut self, log_probs: TensorId, targets: &[u32]) -> Result<TensorId> {
        let width = *self
            .shape(log_probs)
            .last()
            .ok_or_else(|| Error::shape("nll_mean", "scalar input"))?;
        let rows = self.numel(log_probs) / width;
        if targets.len() != rows {
            return Err(Error::shape(
                "nll_mean",
                format!("{} targets vs {} rows", targets.len(), rows),
            ));
        }
        let mut n_valid = 0usize;
        let mut acc = 0.0f64;
        let lp = self.value(log_probs);
        for (r, &t) in targets.iter().enumerate() {
            if t == u32::MAX {
                continue;
            }
            if t as usize >= width {
                return Err(Error::contract(
                    "nll_mean",
                    format!("target {} out of range 0..{}", t, width),
                ));
            }
            acc -= lp[r * width + t as usize].to_f64();
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(Error::contract("nll_mean", "no valid target rows"));
        }
        let loss = T::from_f64(acc / n_valid as f64);
        let rg = self.requires_grad(log_probs);
        Ok(self.push(
            Op::NllMean { log_probs, targets: targets.to_vec(), width, n_valid },
            vec![],
            vec![loss],
            rg,
            None,
            true,
        ))
    }

    /// Mean CTC negative log-probability over a batch. `log_probs` is
    /// `[batch, max_t, vocab]` with blank at index 0; each item runs the
    /// forward-backward recursion over its own `input_len` frames.
    pub fn ctc(
        &mut self,
        log_probs: TensorId,
        labels: &[Vec<u32>],
        input_lens: &[usize],
    ) -> Result<TensorId> {
        let xs = self.shape(log_probs).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("ctc", format!("log_probs {:?}, want [b, t, v]", xs)));
        }
        let (batch, max_t, vocab) = (xs[0], xs[1], xs[2]);
        if labels.len() != batch || input_lens.len() != batch {
            return Err(Error::shape(
                "ctc",
                format!("{} labels / {} lens vs batch {}", labels.len(), input_lens.len(), batch),
            ));
        }
        let lp = self.value(log_probs);
        let mut saved = Vec::with_capacity(batch);
        let mut total = 0.0f64;
        for b in 0..batch {
            let t_len = input_lens[b];
            if t_len == 0 || t_len > max_t {
                return Err(Error::contract(
                    "ctc",
                    format!("input_len {} out of range 1..={}", t_len, max_t),
                ));
            }
            let item = ctc_dp::forward_item(
                &lp[b * max_t * vocab..(b + 1) * max_t * vocab],
                vocab,
                t_len,
                &labels[b],
            )?;
            total += -item.log_p.to_f64();
            saved.push(item);
        }
        let loss = T::from_f64(total / batch as f64);
        let rg = self.requires_grad(log_probs);
        Ok(self.push(
            Op::Ctc { log_probs, saved, vocab, max_t },
            vec![],
            vec![loss],
            rg,
            None,
            true,
        ))
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<T> {
        if self.nodes[id.0].grad.is_none() {
            let n = self.numel(id);
            self.nodes[id.0].grad = Some(vec![T::ZERO; n]);
        }
        self.nodes[id.0].grad.as_mut().unwrap()
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = self.grad_buf(id);
        for (slot, &c) in g.iter_mut().zip(contrib.iter()) {
            *slot += c;
        }
    }

    /// Reverse sweep from a scalar root. Consumes the tape: values are freed
    /// eagerly as the sweep passes them.
    pub fn backward(mut self, root: TensorId) -> Result<BackwardReport<T>> {
        if self.numel(root) != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut fired: BTreeSet<Region> = BTreeSet::new();
        if self.nodes[root.0].requires_grad {
            self.nodes[root.0].grad = Some(vec![T::ONE]);
        }
        for i in (0..=root.0).rev() {
            let has_grad = self.nodes[i].requires_grad && self.nodes[i].grad.is_some();
            if has_grad {
                if let Some(region) = self.nodes[i].region {
                    if !matches!(self.nodes[i].op, Op::Leaf | Op::ConstActivation) {
                        fired.insert(region);
                    }
                }
                self.backward_node(TensorId(i));
            }
            // Value no longer needed: all consumers sit at higher indices.
            let node = &mut self.nodes[i];
            if node.param.is_none() {
                node.value = None;
                self.cur_bytes -= node.counted_bytes;
                node.counted_bytes = 0;
                if i != root.0 && node.param.is_none() {
                    node.grad = None;
                }
            }
        }
        // Trainable parameters always get an entry (zeros when unreachable);
        // parameters registered frozen stay out of the map entirely.
        let mut entries = Vec::with_capacity(self.param_nodes.len());
        for &(pid, id) in &self.param_nodes {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let g = match &self.nodes[id.0].grad {
                Some(g) => g.clone(),
                None => vec![T::ZERO; self.numel(id)],
            };
            entries.push((pid, g));
        }
        Ok(BackwardReport {
            grads: Gradients { entries },
            fired_regions: fired,
            peak_activation_bytes: self.peak_bytes,
        })
    }

    fn backward_node(&mut self, id: TensorId) {
        let g = self.nodes[id.0].grad.clone().expect("grad present");
        match &self.nodes[id.0].op {
            Op::Leaf | Op::ConstActivation | Op::Detach => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let faulty = self.backward_fault == Some("mul");
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                let mut ga: Vec<T> = g.iter().zip(bv.iter()).map(|(&gv, &bvv)| gv * bvv).collect();
                if faulty {
                    for v in ga.iter_mut() {
                        *v += T::ONE;
                    }
                }
                let gb: Vec<T> = g.iter().zip(av.iter()).map(|(&gv, &avv)| gv * avv).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let ga: Vec<T> = g.iter().map(|&gv| gv * c).collect();
                self.accumulate(a, &ga);
            }
            Op::Exp { a } => {
                let a = *a;
                let out = self.value(id).to_vec();
                let ga: Vec<T> = g.iter().zip(out.iter()).map(|(&gv, &ov)| gv * ov).collect();
                self.accumulate(a, &ga);
            }
            Op::Ln { a } => {
                let a = *a;
                let av = self.value(a).to_vec();
                let ga: Vec<T> = g.iter().zip(av.iter()).map(|(&gv, &avv)| gv / avv).collect();
                self.accumulate(a, &ga);
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                self.accumulate(a, &g);
                let n = self.numel(bias);
                let mut gb = vec![T::ZERO; n];
                kernels::conv1d_backward_bias_into(&g, n, &mut gb);
                self.accumulate(bias, &gb);
            }
            Op::Matmul { a, b, rows, k, n } => {
                let (a, b, rows, k, n) = (*a, *b, *rows, *k, *n);
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                if self.requires_grad(a) {
                    let mut ga = vec![T::ZERO; rows * k];
                    kernels::mm_nt_into(self.parallel, &g, &bv, &mut ga, rows, n, k);
                    self.accumulate(a, &ga);
                }
                if self.requires_grad(b) {
                    let mut gb = vec![T::ZERO; k * n];
                    kernels::mm_tn_into(self.parallel, &av, &g, &mut gb, k, rows, n);
                    self.accumulate(b, &gb);
                }
            }
            Op::Conv1d { x, w, bias, geom } => {
                let (x, w, bias, geom) = (*x, *w, *bias, *geom);
                let xv = self.value(x).to_vec();
                let wv = self.value(w).to_vec();
                if self.requires_grad(x) {
                    let mut gx = vec![T::ZERO; xv.len()];
                    kernels::conv1d_backward_x_into(self.parallel, &g, &wv, geom, &mut gx);
                    self.accumulate(x, &gx);
                }
                if self.requires_grad(w) {
                    let mut gw = vec![T::ZERO; wv.len()];
                    kernels::conv1d_backward_w_into(self.parallel, &g, &xv, geom, &mut gw);
                    self.accumulate(w, &gw);
                }
                if self.requires_grad(bias) {
                    let mut gb = vec![T::ZERO; geom.c_out];
                    kernels::conv1d_backward_bias_into(&g, geom.c_out, &mut gb);
                    self.accumulate(bias, &gb);
                }
            }
            Op::Softmax { a, width } => {
                let (a, width) = (*a, *width);
                let y = self.value(id).to_vec();
                let mut ga = vec![T::ZERO; y.len()];
                kernels::softmax_backward_into(self.parallel, &g, &y, width, &mut ga);
                self.accumulate(a, &ga);
            }
            Op::LogSoftmax { a, width } => {
                let (a, width) = (*a, *width);
                let ly = self.value(id).to_vec();
                let mut ga = vec![T::ZERO; ly.len()];
                kernels::log_softmax_backward_into(self.parallel, &g, &ly, width, &mut ga);
                self.accumulate(a, &ga);
            }
            Op::SumAll { a } => {
                let a = *a;
                let ga = vec![g[0]; self.numel(a)];
                self.accumulate(a, &ga);
            }
            Op::MeanAll { a } => {
                let a = *a;
                let n = self.numel(a);
                let ga = vec![g[0] / T::from_f64(n as f64); n];
                self.accumulate(a, &ga);
            }
            Op::StraightThrough { soft } => {
                let soft = *soft;
                self.accumulate(soft, &g);
            }
            Op::WeightedSum { weights, terms } => {
                let weights = *weights;
                let terms = terms.clone();
                let wv = self.value(weights).to_vec();
                if self.requires_grad(weights) {
                    let mut gw = vec![T::ZERO; wv.len()];
                    for (kk, &t) in terms.iter().enumerate() {
                        let tv = self.value(t);
                        let mut acc = T::ZERO;
                        for (gv, &xv) in g.iter().zip(tv.iter()) {
                            acc += *gv * xv;
                        }
                        gw[kk] = acc;
                    }
                    self.accumulate(weights, &gw);
                }
                for (kk, &t) in terms.iter().enumerate() {
                    if self.requires_grad(t) {
                        let gt: Vec<T> = g.iter().map(|&gv| gv * wv[kk]).collect();
                        self.accumulate(t, &gt);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, width, stats } => {
                let (x, gain, bias, width) = (*x, *gain, *bias, *width);
                let stats = stats.clone();
                let xv = self.value(x).to_vec();
                let gv = self.value(gain).to_vec();
                let mut gx = vec![T::ZERO; xv.len()];
                let mut ggain = vec![T::ZERO; width];
                let mut gbias = vec![T::ZERO; width];
                kernels::layer_norm_backward(
                    self.parallel,
                    &g,
                    &xv,
                    &gv,
                    &stats,
                    width,
                    &mut gx,
                    &mut ggain,
                    &mut gbias,
                );
                self.accumulate(x, &gx);
                self.accumulate(gain, &ggain);
                self.accumulate(bias, &gbias);
            }
            Op::NllMean { log_probs, targets, width, n_valid } => {
                let (log_probs, width, n_valid) = (*log_probs, *width, *n_valid);
                let targets = targets.clone();
                let mut glp = vec![T::ZERO; self.numel(log_probs)];
                let scale = g[0] / T::from_f64(n_valid as f64);
                for (r, &t) in targets.iter().enumerate() {
                    if t != u32::MAX {
                        glp[r * width + t as usize] = -scale;
                    }
                }
                self.accumulate(log_probs, &glp);
            }
            Op::Ctc { log_probs, saved, vocab, max_t } => {
                let (log_probs, vocab, max_t) = (*log_probs, *vocab, *max_t);
                let batch = saved.len();
                let mut glp = vec![T::ZERO; self.numel(log_probs)];
                let scale = g[0] / T::from_f64(batch as f64);
                // Borrow saved tables immutably while writing the flat grad.
                let saved_ptr: Vec<&CtcItemSaved<T>> = match &self.nodes[id.0].op {
                    Op::Ctc { saved, .. } => saved.iter().collect(),
                    _ => unreachable!(),
                };
                for (b, item) in saved_ptr.iter().enumerate() {
                    ctc_dp::backward_item(
                        item,
                        vocab,
                        scale,
                        &mut glp[b * max_t * vocab..(b + 1) * max_t * vocab],
                    );
                }
                self.accumulate(log_probs, &glp);
            }
        }
    }
}
