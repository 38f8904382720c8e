//! Neural layers of the search space: dilated temporal convolution (TDNN),
//! frame-wise dense layer, and layer-norm + dropout, plus the parameter store
//! they draw from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, TensorId};

/// Parameter role: architecture weights vs operation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Arch,
    Op,
}

/// Train/eval phase. Dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Owns every learnable array of a network. Exclusively owned by one training
/// loop; ids are dense indices assigned in construction order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>, group: ParamGroup) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            values,
            group,
            trainable: true,
        });
        id
    }

    /// Uniform init in +-sqrt(1/fan_in).
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, shape, values, group)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>, group: ParamGroup) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![T::ZERO; n], group)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>, group: ParamGroup) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![T::ONE; n], group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self, pid: ParamId) -> &[T] {
        &self.entries[pid.0].values
    }

    pub fn values_mut(&mut self, pid: ParamId) -> &mut [T] {
        &mut self.entries[pid.0].values
    }

    pub fn shape(&self, pid: ParamId) -> &[usize] {
        &self.entries[pid.0].shape
    }

    pub fn entry(&self, pid: ParamId) -> &ParamEntry<T> {
        &self.entries[pid.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut() {
            if e.group == group {
                e.trainable = trainable;
            }
        }
    }

    pub fn trainable(&self, pid: ParamId) -> bool {
        self.entries[pid.0].trainable
    }

    /// Register the parameter on a tape, honoring its trainable flag.
    pub fn bind(&self, tape: &mut Tape<T>, pid: ParamId) -> TensorId {
        let e = &self.entries[pid.0];
        tape.param(pid, &e.values, &e.shape, e.trainable)
    }

    /// Total scalar count over one group.
    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.values.len())
            .sum()
    }
}

// ── TDNN ─────────────────────────────────────────────────────────────

/// 1-D dilated convolution over time with `2h+1` taps at spacing `d` and
/// symmetric zero padding of `h*d` frames, so output length is `ceil(T/s)`
/// regardless of the context chosen.
#[derive(Debug, Clone)]
pub struct TdnnLayer {
    pub half_context: usize,
    pub dilation: usize,
    pub stride: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: ParamId,
    pub bias: ParamId,
}

impl TdnnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        half_context: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<Self> {
        if dilation < 1 || stride < 1 {
            return Err(Error::contract("tdnn", "dilation and stride must be >= 1"));
        }
        let taps = 2 * half_context + 1;
        let fan_in = taps * in_dim;
        let weights = store.init_uniform(
            format!("{name}.w"),
            vec![taps, in_dim, out_dim],
            fan_in,
            ParamGroup::Op,
            rng,
        );
        let bias = store.init_uniform(format!("{name}.b"), vec![out_dim], fan_in, ParamGroup::Op, rng);
        Ok(TdnnLayer {
            half_context,
            dilation,
            stride,
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let w = store.bind(tape, self.weights);
        let b = store.bind(tape, self.bias);
        tape.conv1d(x, w, b, self.half_context, self.dilation, self.stride)
    }

    /// Value-only forward used outside any tape.
    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], batch: usize, t_in: usize) -> (Vec<T>, usize) {
        let geom = ConvGeom {
            batch,
            t_in,
            c_in: self.in_dim,
            c_out: self.out_dim,
            half_context: self.half_context,
            dilation: self.dilation,
            stride: self.stride,
        };
        let mut out = vec![T::ZERO; batch * geom.t_out() * self.out_dim];
        kernels::conv1d_forward_into(
            kernels::DEFAULT_PARALLEL,
            x,
            store.values(self.weights),
            store.values(self.bias),
            geom,
            &mut out,
        );
        (out, geom.t_out())
    }

    /// `(2h+1) * in * out + out`
    pub fn param_count(&self) -> usize {
        (2 * self.half_context + 1) * self.in_dim * self.out_dim + self.out_dim
    }

    pub fn receptive_half_width(&self) -> usize {
        self.half_context * self.dilation
    }
}

// ── Dense ────────────────────────────────────────────────────────────

/// Frame-wise affine map.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weights = store.init_uniform(format!("{name}.w"), vec![in_dim, out_dim], in_dim, ParamGroup::Op, rng);
        let bias = store.init_uniform(format!("{name}.b"), vec![out_dim], in_dim, ParamGroup::Op, rng);
        DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let w = store.bind(tape, self.weights);
        let b = store.bind(tape, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.in_dim;
        let mut out = vec![T::ZERO; rows * self.out_dim];
        kernels::mm_nn_into(
            kernels::DEFAULT_PARALLEL,
            x,
            store.values(self.weights),
            &mut out,
            rows,
            self.in_dim,
            self.out_dim,
        );
        let b = store.values(self.bias);
        for row in out.chunks_mut(self.out_dim) {
            for (v, &bv) in row.iter_mut().zip(b.iter()) {
                *v += bv;
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

// ── LayerNorm + Dropout ──────────────────────────────────────────────

/// Layer normalization over the feature axis followed by inverted dropout.
/// Eval mode is deterministic: dropout disabled, normalization unchanged.
#[derive(Debug, Clone)]
pub struct NormDropout {
    pub dropout_p: f64,
    pub dim: usize,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormDropout {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, dropout_p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::contract("norm_dropout", format!("p = {} not in [0, 1)", dropout_p)));
        }
        let gain = store.ones(format!("{name}.gain"), vec![dim], ParamGroup::Op);
        let bias = store.zeros(format!("{name}.bias"), vec![dim], ParamGroup::Op);
        Ok(NormDropout {
            dropout_p,
            dim,
            gain,
            bias,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: TensorId,
        phase: Phase,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let gain = store.bind(tape, self.gain);
        let bias = store.bind(tape, self.bias);
        let normed = tape.layer_norm(x, gain, bias)?;
        match (phase, self.dropout_p > 0.0) {
            (Phase::Train, true) => {
                let rng = rng.ok_or_else(|| Error::contract("dropout", "train mode needs an rng"))?;
                dropout(tape, normed, self.dropout_p, Phase::Train, rng)
            }
            _ => Ok(normed),
        }
    }

    /// Value-only forward; dropout never applies here (eval semantics).
    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.dim;
        let mut out = vec![T::ZERO; x.len()];
        let mut stats = vec![T::ZERO; rows * 2];
        kernels::layer_norm_forward_into(
            kernels::DEFAULT_PARALLEL,
            x,
            store.values(self.gain),
            store.values(self.bias),
            self.dim,
            T::from_f64(1e-5),
            &mut out,
            &mut stats,
        );
        out
    }
}

/// Inverted dropout: keep with probability `1-p`, rescale kept values by
/// `1/(1-p)`. Eval mode is the identity.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    p: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract("dropout", format!("p = {} not in [0, 1)", p)));
    }
    if phase == Phase::Eval || p == 0.0 {
        return Ok(x);
    }
    let n = tape.numel(x);
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep_scale })
        .collect();
    let shape = tape.shape(x).to_vec();
    let m = tape.const_activation(mask, &shape);
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamRole, StreamSeed};

    fn rng() -> ChaCha8Rng {
        StreamSeed::new(9).stream(StreamRole::ParamInit, &[0])
    }

    fn run_tdnn(h: usize, d: usize, s: usize, batch: usize, t: usize, dim: usize) -> (TdnnLayer, ParamStore<f64>, Vec<f64>) {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let layer = TdnnLayer::new(&mut store, &mut r, "t", dim, dim, h, d, s).unwrap();
        let x: Vec<f64> = (0..batch * t * dim).map(|i| ((i * 37 % 17) as f64) / 7.0 - 1.0).collect();
        (layer, store, x)
    }

    #[test]
    fn subsampling_layer_gives_t_over_3() {
        let (layer, store, x) = run_tdnn(1, 1, 3, 1, 9, 2);
        let (_, t_out) = layer.eval(&store, &x, 1, 9);
        assert_eq!(t_out, 3);
    }

    #[test]
    fn zero_context_tdnn_equals_dense_per_frame() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let tdnn = TdnnLayer::new(&mut store, &mut r, "t", 3, 4, 0, 1, 1).unwrap();
        let dense = DenseLayer {
            in_dim: 3,
            out_dim: 4,
            weights: tdnn.weights,
            bias: tdnn.bias,
        };
        let x: Vec<f64> = (0..2 * 5 * 3).map(|i| (i as f64).sin()).collect();
        let (yc, _) = tdnn.eval(&store, &x, 2, 5);
        let yd = dense.eval(&store, &x);
        for (a, b) in yc.iter().zip(&yd) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tdnn_matches_naive_loop_convolution() {
        let (layer, store, x) = run_tdnn(2, 2, 1, 1, 7, 2);
        let (y, t_out) = layer.eval(&store, &x, 1, 7);
        assert_eq!(t_out, 7);
        let w = store.values(layer.weights);
        let b = store.values(layer.bias);
        let (h, d, ci, co, t) = (2i64, 2i64, 2usize, 2usize, 7i64);
        for to in 0..t {
            for o in 0..co {
                let mut want = b[o];
                for tap in 0..(2 * h + 1) {
                    let src = to + (tap - h) * d;
                    if src < 0 || src >= t {
                        continue;
                    }
                    for i in 0..ci {
                        want += x[src as usize * ci + i] * w[(tap as usize) * ci * co + i * co + o];
                    }
                }
                let got = y[to as usize * co + o];
                assert!((got - want).abs() < 1e-12, "t={} o={}", to, o);
            }
        }
    }

    #[test]
    fn tdnn_stride_one_is_translation_equivariant_in_interior() {
        let (layer, store, x) = run_tdnn(2, 1, 1, 1, 10, 2);
        let (y, _) = layer.eval(&store, &x, 1, 10);
        // Shift input by one frame and compare interior outputs.
        let dim = 2;
        let mut xs = vec![0.0; x.len()];
        xs[dim..].copy_from_slice(&x[..x.len() - dim]);
        let (ys, _) = layer.eval(&store, &xs, 1, 10);
        let hw = layer.receptive_half_width();
        for t in (hw + 1)..(10 - hw) {
            for o in 0..dim {
                assert!((ys[t * dim + o] - y[(t - 1) * dim + o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tdnn_param_count_formula() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng();
        let layer = TdnnLayer::new(&mut store, &mut r, "t", 5, 7, 2, 2, 1).unwrap();
        assert_eq!(layer.param_count(), 5 * 5 * 7 + 7);
        assert_eq!(store.scalar_count(ParamGroup::Op), layer.param_count());
    }

    #[test]
    fn dense_identity_weights_pass_input_through() {
        let mut store = ParamStore::<f64>::new();
        let n = 3;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let weights = store.add("w", vec![n, n], w, ParamGroup::Op);
        let bias = store.zeros("b", vec![n], ParamGroup::Op);
        let dense = DenseLayer { in_dim: n, out_dim: n, weights, bias };
        let x: Vec<f64> = (0..2 * n).map(|i| i as f64 * 0.3).collect();
        assert_eq!(dense.eval(&store, &x), x);
    }

    #[test]
    fn dense_zero_weights_yield_bias_rows() {
        let mut store = ParamStore::<f64>::new();
        let weights = store.zeros("w", vec![2, 3], ParamGroup::Op);
        let bias = store.add("b", vec![3], vec![0.5, -1.0, 2.0], ParamGroup::Op);
        let dense = DenseLayer { in_dim: 2, out_dim: 3, weights, bias };
        let y = dense.eval(&store, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_rows_is_bias() {
        let mut store = ParamStore::<f64>::new();
        let nd = NormDropout::new(&mut store, "n", 4, 0.0).unwrap();
        store.values_mut(nd.bias).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let y = nd.eval(&store, &[5.0; 8]);
        for row in y.chunks(4) {
            for (v, want) in row.iter().zip([1.0, 2.0, 3.0, 4.0]) {
                assert!((v - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3], false);
        let mut r = rng();
        let y = dropout(&mut tape, x, 0.5, Phase::Eval, &mut r).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_keeps_half_and_rescales() {
        let n = 1_000_000;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0; n], &[n], false);
        let mut r = rng();
        let y = dropout(&mut tape, x, 0.5, Phase::Train, &mut r).unwrap();
        let vals = tape.value(y);
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.002, "kept fraction {}", frac);
        for &v in vals.iter().filter(|&&v| v != 0.0) {
            assert_eq!(v, 2.0);
        }
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0], &[1], false);
        let mut r = rng();
        assert!(dropout(&mut tape, x, 1.0, Phase::Train, &mut r).is_err());
    }

    #[test]
    fn tape_and_eval_paths_agree() {
        let (layer, store, x) = run_tdnn(1, 2, 1, 2, 6, 2);
        let (y_eval, _) = layer.eval(&store, &x, 2, 6);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), &[2, 6, 2], false);
        let yid = layer.forward(&store, &mut tape, xid).unwrap();
        assert_eq!(tape.value(yid), &y_eval[..]);
    }
}
