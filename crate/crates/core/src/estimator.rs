//! The three architecture-gradient strategies over a searching block.
//!
//! All three build on the same mixture carrier `sum_k w_k * o_k(x)`; they
//! differ in where the weights come from:
//!
//! * continuous mixture of softmax(alpha) with exact gradients,
//! * soft-sampled Gumbel weights at temperature tau with exact gradients, and
//! * hard one-hot gates with the straight-through estimator, where only the
//!   sampled candidate stays on the tape and the other outputs enter as
//!   detached constants (their activation gradient is an exact zero anyway).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Phase};
use crate::scalar::Scalar;
use crate::supernet::SearchingBlock;
use crate::tape::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Darts,
    Snas,
    St,
}

/// Multiplicative annealing: `tau(e) = max(floor, initial * decay^e)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            initial: 1.0,
            decay: 0.9,
            floor: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.initial <= 0.0 || self.floor <= 0.0 {
            return Err(Error::Config("temperature must stay positive".into()));
        }
        if !(0.0 < self.decay && self.decay <= 1.0) {
            return Err(Error::Config(format!("temperature decay {} not in (0, 1]", self.decay)));
        }
        Ok(())
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub temperature: TemperatureSchedule,
}

impl EstimatorConfig {
    pub fn st() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::St,
            temperature: TemperatureSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.temperature.validate()
    }
}

/// `g = -log(-log(u))` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

/// Gumbel-Softmax weights `y = softmax((alpha + g) / tau)` with the noise
/// supplied by the caller (frozen-noise gradchecks use this directly).
pub fn gumbel_softmax_weights_with_noise<T: Scalar>(
    tape: &mut Tape<T>,
    alpha: TensorId,
    tau: f64,
    noise: &[f64],
) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::contract("gumbel_softmax", format!("tau = {} must be > 0", tau)));
    }
    let k = tape.numel(alpha);
    if noise.len() != k {
        return Err(Error::shape("gumbel_softmax", format!("{} noise vs {} arms", noise.len(), k)));
    }
    let g = tape.leaf(noise.iter().map(|&v| T::from_f64(v)).collect(), &[k], false);
    let shifted = tape.add(alpha, g)?;
    let scaled = tape.scale(shifted, T::from_f64(1.0 / tau))?;
    tape.softmax(scaled)
}

pub fn gumbel_softmax_weights<T: Scalar>(
    tape: &mut Tape<T>,
    alpha: TensorId,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let k = tape.numel(alpha);
    let noise = gumbel_noise(rng, k);
    gumbel_softmax_weights_with_noise(tape, alpha, tau, &noise)
}

fn candidate_terms<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    block: &SearchingBlock,
    x: TensorId,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TensorId>> {
    let mut terms = Vec::with_capacity(block.k());
    for (k, cand) in block.candidates.iter().enumerate() {
        tape.set_region(Some((block.index as u32, k as u32)));
        let t = cand.forward(store, tape, x, phase, rng);
        tape.set_region(None);
        terms.push(t?);
    }
    Ok(terms)
}

/// Continuous mixture: `sum_k pi_k * o_k(x)` with `pi = softmax(alpha)`.
pub fn darts_block<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    block: &SearchingBlock,
    x: TensorId,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let alpha = store.bind(tape, block.alpha);
    let pi = tape.softmax(alpha)?;
    let terms = candidate_terms(store, tape, block, x, phase, rng)?;
    tape.weighted_sum(pi, &terms)
}

/// Soft-sampled mixture: `sum_k y_k * o_k(x)` with Gumbel-Softmax `y`.
pub fn snas_block<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    block: &SearchingBlock,
    x: TensorId,
    tau: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let alpha = store.bind(tape, block.alpha);
    let y = gumbel_softmax_weights(tape, alpha, tau, rng)?;
    let terms = candidate_terms(store, tape, block, x, phase, rng)?;
    tape.weighted_sum(y, &terms)
}

/// Hard gates: forward uses the one-hot selection, backward substitutes the
/// softmax probabilities for the gates, so every alpha component receives a
/// gradient while activations flow only through the sampled candidate.
///
/// The sampled candidate runs on the tape; the `K-1` others run value-only
/// and enter as stored constants, which is exactly what the gate gradient
/// `dL/dw_k = <dL/dx_j, o_k(x)>` needs.
pub fn st_block<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    block: &SearchingBlock,
    x: TensorId,
    selected: usize,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let k = block.k();
    if selected >= k {
        return Err(Error::contract(
            "st_block",
            format!("selection {} out of range for {} candidates", selected, k),
        ));
    }
    if k == 1 {
        // Degenerate block: forward and backward equal the plain layer, and
        // the single gate contributes an exactly-zero alpha gradient anyway.
        return fixed_block(store, tape, block, x, selected, phase, rng);
    }
    let alpha = store.bind(tape, block.alpha);
    let pi = tape.softmax(alpha)?;
    let mut one_hot = vec![T::ZERO; k];
    one_hot[selected] = T::ONE;
    let hard = tape.leaf(one_hot, &[k], false);
    let gate = tape.straight_through(hard, pi)?;

    let shape = tape.shape(x).to_vec();
    let (batch, t_in) = (shape[0], shape[1]);
    let mut terms = Vec::with_capacity(k);
    for (kk, cand) in block.candidates.iter().enumerate() {
        tape.set_region(Some((block.index as u32, kk as u32)));
        let term = if kk == selected {
            cand.forward(store, tape, x, phase, rng)
        } else {
            // Keep the unexecuted thetas registered so they report exact
            // zero gradients.
            for pid in cand.theta_params() {
                store.bind(tape, pid);
            }
            let values = cand.eval(store, tape.value(x), batch, t_in);
            let out_shape = [batch, t_in, values.len() / (batch * t_in)];
            Ok(tape.const_activation(values, &out_shape))
        };
        tape.set_region(None);
        terms.push(term?);
    }
    tape.weighted_sum(gate, &terms)
}

/// Pruned sub-graph: only the selected candidate exists on the tape.
pub fn fixed_block<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    block: &SearchingBlock,
    x: TensorId,
    selected: usize,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let k = block.k();
    if selected >= k {
        return Err(Error::contract(
            "fixed_block",
            format!("selection {} out of range for {} candidates", selected, k),
        ));
    }
    tape.set_region(Some((block.index as u32, selected as u32)));
    let out = block.candidates[selected].forward(store, tape, x, phase, rng);
    tape.set_region(None);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;
    use crate::rng::{StreamRole, StreamSeed};
    use crate::supernet::{softmax_f64, CandidateOpSpec, SuperNetSpec, SuperNetwork, TopologyItem};
    use crate::tape::ParamId;

    fn rng_with(tag: u64) -> ChaCha8Rng {
        StreamSeed::new(21).stream(StreamRole::Gumbel, &[tag])
    }

    fn one_block_net(k: usize) -> (SuperNetwork, ParamStore<f64>) {
        let cands: Vec<CandidateOpSpec> = (0..k)
            .map(|i| CandidateOpSpec::Tdnn { half_context: 1 + i % 2, dilation: 1 + i / 2 })
            .collect();
        let spec = SuperNetSpec {
            input_dim: 2,
            width: 2,
            num_classes: 2,
            dropout_p: 0.0,
            topology: vec![TopologyItem::Block { candidates: cands }],
        };
        let mut store = ParamStore::new();
        let mut r = StreamSeed::new(4).stream(StreamRole::ParamInit, &[0]);
        let net = SuperNetwork::build(&spec, &mut store, &mut r).unwrap();
        (net, store)
    }

    #[test]
    fn temperature_schedule_anneals_to_floor() {
        let s = TemperatureSchedule::default();
        assert!((s.at_epoch(0) - 1.0).abs() < 1e-12);
        assert!((s.at_epoch(1) - 0.9).abs() < 1e-12);
        assert!((s.at_epoch(100) - 0.1).abs() < 1e-12);
        assert!(TemperatureSchedule { initial: -1.0, ..s }.validate().is_err());
        assert!(TemperatureSchedule { decay: 1.5, ..s }.validate().is_err());
    }

    #[test]
    fn gumbel_of_exp_minus_one_is_zero() {
        // u = e^{-1}  =>  g = -log(-log(u)) = -log(1) = 0
        let g = gumbel_from_uniform((-1.0f64).exp());
        assert!(g.abs() < 1e-12);
    }

    #[test]
    fn zero_noise_gumbel_weights_equal_softmax_alpha_over_tau() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.leaf(vec![0.2, -0.4, 1.0], &[3], false);
        let tau = 0.7;
        let y = gumbel_softmax_weights_with_noise(&mut tape, alpha, tau, &[0.0; 3]).unwrap();
        let want = softmax_f64(&[0.2 / tau, -0.4 / tau, 1.0 / tau]);
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_weights_sum_to_one_and_lie_in_unit_interval() {
        let mut r = rng_with(1);
        for _ in 0..20 {
            let mut tape = Tape::<f64>::new();
            let alpha = tape.leaf(vec![0.3, -1.2, 0.8, 0.0], &[4], false);
            let y = gumbel_softmax_weights(&mut tape, alpha, 0.5, &mut r).unwrap();
            let v = tape.value(y);
            let s: f64 = v.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn tiny_tau_concentrates_on_the_argmax() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.leaf(vec![0.1, 0.6, -0.2], &[3], false);
        let noise = [0.13, -0.25, 0.4];
        let y = gumbel_softmax_weights_with_noise(&mut tape, alpha, 1e-3, &noise).unwrap();
        let v = tape.value(y);
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mx >= 0.999, "max soft weight {}", mx);
    }

    #[test]
    fn huge_tau_tends_to_uniform() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.leaf(vec![2.0, -1.0, 0.5, 0.0], &[4], false);
        let y = gumbel_softmax_weights_with_noise(&mut tape, alpha, 1e6, &[0.9, -0.3, 0.2, 0.0]).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn gumbel_argmax_frequencies_follow_softmax_alpha() {
        // Gumbel-max property: argmax(alpha + g) ~ Cat(softmax(alpha)).
        let alpha = [0.5, -0.5, 1.0, 0.0];
        let pi = softmax_f64(&alpha);
        let mut counts = [0usize; 4];
        let n = 100_000;
        let mut r = rng_with(2);
        for _ in 0..n {
            let g = gumbel_noise(&mut r, 4);
            let mut best = 0;
            for k in 1..4 {
                if alpha[k] + g[k] > alpha[best] + g[best] {
                    best = k;
                }
            }
            counts[best] += 1;
        }
        for (c, p) in counts.iter().zip(&pi) {
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 0.02, "frequency {} vs pi {}", f, p);
        }
    }

    #[test]
    fn rejects_non_positive_tau() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.leaf(vec![0.0, 0.0], &[2], false);
        assert!(gumbel_softmax_weights_with_noise(&mut tape, alpha, 0.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn darts_one_hot_limit_selects_single_candidate() {
        let (net, mut store) = one_block_net(2);
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.0, 60.0]);
        let x: Vec<f64> = (0..4 * 2).map(|i| (i as f64 * 0.3).sin()).collect();

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), &[1, 4, 2], false);
        let mut r = rng_with(3);
        let got = darts_block(&store, &mut tape, &net.blocks[0], xid, Phase::Eval, &mut r).unwrap();
        let want = net.blocks[0].candidates[1].eval(&store, &x, 1, 4);
        for (g, w) in tape.value(got).iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn darts_cancels_opposite_candidates_at_equal_alpha() {
        // Two candidates of the same shape, the second computing exactly -f
        // of the first (negated conv weights; layer norm with unit gain and
        // zero bias preserves the negation).
        let spec = SuperNetSpec {
            input_dim: 2,
            width: 2,
            num_classes: 2,
            dropout_p: 0.0,
            topology: vec![TopologyItem::Block {
                candidates: vec![
                    CandidateOpSpec::Tdnn { half_context: 1, dilation: 1 },
                    CandidateOpSpec::Tdnn { half_context: 1, dilation: 1 },
                ],
            }],
        };
        let mut store = ParamStore::<f64>::new();
        let mut r = StreamSeed::new(4).stream(StreamRole::ParamInit, &[0]);
        let net = SuperNetwork::build(&spec, &mut store, &mut r).unwrap();
        let b = &net.blocks[0];
        let (w0, b0) = match &b.candidates[0].layers {
            crate::supernet::CandidateLayers::Tdnn(l0) => (l0.weights, l0.bias),
            _ => unreachable!(),
        };
        let w_neg: Vec<f64> = store.values(w0).iter().map(|v| -v).collect();
        let b_neg: Vec<f64> = store.values(b0).iter().map(|v| -v).collect();
        match &b.candidates[1].layers {
            crate::supernet::CandidateLayers::Tdnn(l1) => {
                store.values_mut(l1.weights).copy_from_slice(&w_neg);
                store.values_mut(l1.bias).copy_from_slice(&b_neg);
            }
            _ => unreachable!(),
        }
        let x: Vec<f64> = (0..5 * 2).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut tape = Tape::new();
        let xid = tape.leaf(x, &[1, 5, 2], false);
        let mut r = rng_with(4);
        let got = darts_block(&store, &mut tape, &net.blocks[0], xid, Phase::Eval, &mut r).unwrap();
        for &v in tape.value(got) {
            assert!(v.abs() < 1e-9, "mixture did not cancel: {}", v);
        }
    }

    #[test]
    fn snas_k1_equals_the_single_candidate() {
        let (net, store) = one_block_net(1);
        let x: Vec<f64> = (0..4 * 2).map(|i| (i as f64 * 0.5).sin()).collect();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), &[1, 4, 2], false);
        let mut r = rng_with(5);
        let got = snas_block(&store, &mut tape, &net.blocks[0], xid, 0.8, Phase::Eval, &mut r).unwrap();
        let want = net.blocks[0].candidates[0].eval(&store, &x, 1, 4);
        for (g, w) in tape.value(got).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn st_alpha_gradient_is_the_softmax_jacobian_times_gate_grad() {
        // Single block, scalar "candidates" v = (1, 0), alpha = (0, 0):
        // dL/dalpha = (diag(pi) - pi pi^T) v = (0.25, -0.25) for either z.
        for selected in 0..2 {
            let mut tape = Tape::<f64>::new();
            let alpha = tape.param(ParamId(0), &[0.0, 0.0], &[2], true);
            let pi = tape.softmax(alpha).unwrap();
            let mut hard = vec![0.0; 2];
            hard[selected] = 1.0;
            let hard = tape.leaf(hard, &[2], false);
            let gate = tape.straight_through(hard, pi).unwrap();
            let t0 = tape.leaf(vec![1.0], &[1], false);
            let t1 = tape.leaf(vec![0.0], &[1], false);
            let out = tape.weighted_sum(gate, &[t0, t1]).unwrap();
            let loss = tape.sum_all(out).unwrap();
            let report = tape.backward(loss).unwrap();
            let g = report.grads.get(ParamId(0)).unwrap();
            assert!((g[0] - 0.25).abs() < 1e-12, "z={} grad {:?}", selected, g);
            assert!((g[1] + 0.25).abs() < 1e-12, "z={} grad {:?}", selected, g);
        }
    }

    #[test]
    fn st_block_k1_matches_plain_candidate() {
        let (net, store) = one_block_net(1);
        let x: Vec<f64> = (0..4 * 2).map(|i| (i as f64 * 0.9).cos()).collect();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), &[1, 4, 2], false);
        let mut r = rng_with(6);
        let got = st_block(&store, &mut tape, &net.blocks[0], xid, 0, Phase::Eval, &mut r).unwrap();
        let want = net.blocks[0].candidates[0].eval(&store, &x, 1, 4);
        assert_eq!(tape.value(got), &want[..]);
    }

    #[test]
    fn st_block_rejects_out_of_range_selection() {
        let (net, store) = one_block_net(2);
        let mut tape = Tape::new();
        let xid = tape.leaf(vec![0.0; 8], &[1, 4, 2], false);
        let mut r = rng_with(7);
        assert!(st_block(&store, &mut tape, &net.blocks[0], xid, 5, Phase::Eval, &mut r).is_err());
    }

    #[test]
    fn estimators_produce_identical_output_shapes() {
        let (net, store) = one_block_net(3);
        let x: Vec<f64> = (0..2 * 4 * 2).map(|i| (i as f64 * 0.21).sin()).collect();
        let mut shapes = Vec::new();
        let z = crate::supernet::SampledArchitecture { selections: vec![1] };
        for mode in 0..4 {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 4, 2], false);
            let mut r = rng_with(8);
            let out = match mode {
                0 => darts_block(&store, &mut tape, &net.blocks[0], xid, Phase::Eval, &mut r).unwrap(),
                1 => snas_block(&store, &mut tape, &net.blocks[0], xid, 0.5, Phase::Eval, &mut r).unwrap(),
                2 => st_block(&store, &mut tape, &net.blocks[0], xid, z.selections[0], Phase::Eval, &mut r).unwrap(),
                _ => fixed_block(&store, &mut tape, &net.blocks[0], xid, z.selections[0], Phase::Eval, &mut r).unwrap(),
            };
            shapes.push(tape.shape(out).to_vec());
        }
        assert!(shapes.windows(2).all(|w| w[0] == w[1]), "{:?}", shapes);
    }

    #[test]
    fn group_trainability_freezes_theta_on_the_tape() {
        let (net, mut store) = one_block_net(2);
        store.set_group_trainable(ParamGroup::Op, false);
        let x: Vec<f64> = (0..4 * 2).map(|i| (i as f64 * 0.4).sin()).collect();
        let mut tape = Tape::new();
        let xid = tape.leaf(x, &[1, 4, 2], false);
        let mut r = rng_with(9);
        let out = st_block(&store, &mut tape, &net.blocks[0], xid, 0, Phase::Eval, &mut r).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let report = tape.backward(loss).unwrap();
        assert!(report.grads.get(net.blocks[0].alpha).is_some());
        for cand in &net.blocks[0].candidates {
            for pid in cand.theta_params() {
                assert!(report.grads.get(pid).is_none(), "frozen theta appeared in grads");
            }
        }
    }
}
