//! Empirical memory and compute accounting.
//!
//! Memory is measured by the tape's retained-activation byte counters (what
//! backward still needs), not OS-level usage: that is the quantity the
//! estimator comparison is about, and it is deterministic. The per-block
//! candidate execution counters come from the forward trace (forward cost)
//! and from the tape's fired-region report (backward cost).

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore, Phase};
use crate::rng::{StreamRole, StreamSeed};
use crate::scalar::Scalar;
use crate::supernet::{ArchMode, SampledArchitecture, SuperNetwork, TopologyItem};
use crate::tape::Tape;

/// Measured peaks per estimator mode plus the analytic quantities they are
/// compared against: `c1` is the single-model training footprint, `c2` the
/// stored candidate-output bytes summed over blocks (per device).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MemoryModel {
    pub k_max: usize,
    pub elem_bytes: usize,
    pub c1_bytes: u64,
    pub c2_bytes: u64,
    pub darts_peak: u64,
    pub snas_peak: u64,
    pub st_theta_peak: u64,
    pub st_alpha_peak: u64,
    /// Candidates whose backward rules fired per block in the theta step.
    pub st_backward_execs_per_block: Vec<usize>,
    /// Candidate forward executions per block in the alpha step.
    pub st_alpha_forward_execs_per_block: Vec<usize>,
}

impl MemoryModel {
    pub fn st_peak(&self) -> u64 {
        self.st_theta_peak.max(self.st_alpha_peak)
    }

    pub fn summary_lines(&self) -> Vec<String> {
        vec![
            format!("K (max candidates per block): {}", self.k_max),
            format!("C1 single-model training peak: {} bytes", self.c1_bytes),
            format!("C2 stored candidate outputs:   {} bytes", self.c2_bytes),
            format!("DARTS peak:                    {} bytes", self.darts_peak),
            format!("SNAS peak:                     {} bytes", self.snas_peak),
            format!(
                "ST peak:                       {} bytes (theta {}, alpha {})",
                self.st_peak(),
                self.st_theta_peak,
                self.st_alpha_peak
            ),
            format!(
                "ST backward candidate executions per block (theta step): {:?}",
                self.st_backward_execs_per_block
            ),
            format!(
                "ST forward candidate executions per block (alpha step):  {:?}",
                self.st_alpha_forward_execs_per_block
            ),
        ]
    }
}

/// The stored-candidate-output bytes of a sub-graph:
/// `blocks * minibatch * seq_len * hidden * elem_bytes / devices`.
pub fn eq12_bytes(
    num_blocks: u64,
    minibatch: u64,
    seq_len: u64,
    hidden: u64,
    elem_bytes: u64,
    devices: u64,
) -> u64 {
    num_blocks * minibatch * seq_len * hidden * elem_bytes / devices
}

/// Analytic `c2` for a concrete topology: candidate outputs live at each
/// block's output length, which shrinks across subsampling layers.
pub fn analytic_c2<T: Scalar>(net: &SuperNetwork, batch: usize, t_in: usize) -> u64 {
    let mut t = t_in;
    let mut total = 0u64;
    for item in &net.spec.topology {
        match item {
            TopologyItem::Block { .. } => {
                total += (batch * t * net.spec.width * T::BYTES) as u64;
            }
            TopologyItem::Subsample { stride, .. } => {
                t = t.div_ceil(*stride);
            }
        }
    }
    total
}

struct StepProbe {
    peak: u64,
    backward_execs_per_block: Vec<usize>,
    forward_execs_per_block: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn probe_step<T: Scalar>(
    net: &SuperNetwork,
    store: &ParamStore<T>,
    x_vals: &[T],
    batch: usize,
    t_in: usize,
    mode: ArchMode<'_>,
    phase: Phase,
    seed: &StreamSeed,
) -> Result<StepProbe> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_vals.to_vec(), &[batch, t_in, net.spec.input_dim], false);
    let mut rng = seed.stream(StreamRole::Dropout, &[u64::MAX - 7]);
    let (logits, trace) = net.forward(store, &mut tape, x, mode, phase, &mut rng)?;
    let sq = tape.mul(logits, logits)?;
    let probe_loss = tape.mean_all(sq)?;
    if !tape.scalar_value(probe_loss).to_f64().is_finite() {
        return Err(Error::Numeric("non-finite probe loss".into()));
    }
    let report = tape.backward(probe_loss)?;
    let mut backward = vec![0usize; net.blocks.len()];
    for (block, _cand) in report.fired_regions.iter() {
        backward[*block as usize] += 1;
    }
    Ok(StepProbe {
        peak: report.peak_activation_bytes as u64,
        backward_execs_per_block: backward,
        forward_execs_per_block: trace.candidate_forwards,
    })
}

/// Run one instrumented forward+backward per estimator mode and report the
/// retained-activation peaks and execution counters.
pub fn account_memory<T: Scalar>(
    net: &SuperNetwork,
    store: &mut ParamStore<T>,
    batch: usize,
    t_in: usize,
    seed_value: u64,
) -> Result<MemoryModel> {
    use rand::Rng;
    if net.blocks.is_empty() {
        return Err(Error::Config("memory accounting needs at least one block".into()));
    }
    let seed = StreamSeed::new(seed_value);
    let mut xrng = seed.stream(StreamRole::TaskData, &[u64::MAX - 3]);
    let x_vals: Vec<T> = (0..batch * t_in * net.spec.input_dim)
        .map(|_| T::from_f64(xrng.gen_range(-1.0..1.0)))
        .collect();
    let z = SampledArchitecture {
        selections: vec![0; net.blocks.len()],
    };

    // Single-model training step == ST theta step: only the sampled
    // candidate exists on the tape.
    store.set_group_trainable(ParamGroup::Arch, false);
    store.set_group_trainable(ParamGroup::Op, true);
    let theta = probe_step(net, store, &x_vals, batch, t_in, ArchMode::Fixed { z: &z }, Phase::Train, &seed)?;

    // DARTS / SNAS joint training steps keep every candidate on the tape.
    store.set_group_trainable(ParamGroup::Arch, true);
    let darts = probe_step(net, store, &x_vals, batch, t_in, ArchMode::Darts, Phase::Train, &seed)?;
    let snas = probe_step(
        net,
        store,
        &x_vals,
        batch,
        t_in,
        ArchMode::Snas { tau: 1.0 },
        Phase::Train,
        &seed,
    )?;

    // ST alpha step: operation parameters frozen, unsampled candidates enter
    // as stored constants only.
    store.set_group_trainable(ParamGroup::Op, false);
    let alpha = probe_step(net, store, &x_vals, batch, t_in, ArchMode::St { z: &z }, Phase::Eval, &seed)?;

    store.set_group_trainable(ParamGroup::Op, true);
    store.set_group_trainable(ParamGroup::Arch, true);

    Ok(MemoryModel {
        k_max: net.blocks.iter().map(|b| b.k()).max().unwrap_or(1),
        elem_bytes: T::BYTES,
        c1_bytes: theta.peak,
        c2_bytes: analytic_c2::<T>(net, batch, t_in),
        darts_peak: darts.peak,
        snas_peak: snas.peak,
        st_theta_peak: theta.peak,
        st_alpha_peak: alpha.peak,
        st_backward_execs_per_block: theta.backward_execs_per_block,
        st_alpha_forward_execs_per_block: alpha.forward_execs_per_block,
    })
}
