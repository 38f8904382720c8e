//! The search space: a macro-DAG of searching blocks. Every connected node
//! pair carries K candidate operations and a vector of architecture weights;
//! sub-graphs select one candidate per block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator;
use crate::nn::{DenseLayer, NormDropout, ParamGroup, ParamStore, Phase, TdnnLayer};
use crate::rng::sample_categorical;
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, TensorId};

/// Description of one candidate operation on an edge.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CandidateOpSpec {
    /// `2h+1` taps at spacing `d`; label "TDNN-{h}-{d}".
    Tdnn { half_context: usize, dilation: usize },
    Identity,
    Dense,
}

impl CandidateOpSpec {
    pub fn label(&self) -> String {
        match self {
            CandidateOpSpec::Tdnn { half_context, dilation } => {
                format!("TDNN-{}-{}", half_context, dilation)
            }
            CandidateOpSpec::Identity => "identity".into(),
            CandidateOpSpec::Dense => "dense".into(),
        }
    }

    pub fn receptive_half_width(&self) -> usize {
        match self {
            CandidateOpSpec::Tdnn { half_context, dilation } => half_context * dilation,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologyItem {
    Block { candidates: Vec<CandidateOpSpec> },
    Subsample { half_context: usize, dilation: usize, stride: usize },
}

/// Serializable description of a super-network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperNetSpec {
    pub input_dim: usize,
    /// Hidden units of every TDNN layer; the reference configuration uses
    /// 640, desk-scale presets shrink it.
    #[serde(default = "default_width")]
    pub width: usize,
    pub num_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    pub topology: Vec<TopologyItem>,
}

fn default_width() -> usize {
    640
}

fn default_dropout() -> f64 {
    0.5
}

/// The four-candidate block used in the smaller preset.
pub fn candidates_k4() -> Vec<CandidateOpSpec> {
    vec![
        CandidateOpSpec::Tdnn { half_context: 1, dilation: 1 },
        CandidateOpSpec::Tdnn { half_context: 1, dilation: 2 },
        CandidateOpSpec::Tdnn { half_context: 2, dilation: 1 },
        CandidateOpSpec::Tdnn { half_context: 2, dilation: 2 },
    ]
}

/// The six-candidate block: the K=4 set plus the two wider-context TDNNs.
pub fn candidates_k6() -> Vec<CandidateOpSpec> {
    let mut c = candidates_k4();
    c.push(CandidateOpSpec::Tdnn { half_context: 3, dilation: 1 });
    c.push(CandidateOpSpec::Tdnn { half_context: 3, dilation: 2 });
    c
}

impl SuperNetSpec {
    /// Serial default: 3 blocks, one stride-3 subsampling TDNN, 3 blocks,
    /// then the classifier, with the given candidate set per block.
    pub fn serial(
        input_dim: usize,
        width: usize,
        num_classes: usize,
        dropout_p: f64,
        candidates: Vec<CandidateOpSpec>,
    ) -> Self {
        let block = TopologyItem::Block { candidates };
        SuperNetSpec {
            input_dim,
            width,
            num_classes,
            dropout_p,
            topology: vec![
                block.clone(),
                block.clone(),
                block.clone(),
                TopologyItem::Subsample { half_context: 1, dilation: 1, stride: 3 },
                block.clone(),
                block.clone(),
                block,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.num_classes < 2 {
            return Err(Error::Config("net needs input_dim, width > 0 and num_classes >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        let mut cur = self.input_dim;
        for (i, item) in self.topology.iter().enumerate() {
            match item {
                TopologyItem::Block { candidates } => {
                    if candidates.is_empty() {
                        return Err(Error::Config(format!("block {} has no candidates", i)));
                    }
                    for c in candidates {
                        if matches!(c, CandidateOpSpec::Identity) && cur != self.width {
                            return Err(Error::Config(format!(
                                "identity candidate in block {} needs matching dims ({} vs {})",
                                i, cur, self.width
                            )));
                        }
                        if let CandidateOpSpec::Tdnn { dilation, .. } = c {
                            if *dilation < 1 {
                                return Err(Error::Config("candidate dilation must be >= 1".into()));
                            }
                        }
                    }
                }
                TopologyItem::Subsample { stride, dilation, .. } => {
                    if *stride < 1 || *dilation < 1 {
                        return Err(Error::Config("subsample stride/dilation must be >= 1".into()));
                    }
                }
            }
            cur = self.width;
        }
        if !self.topology.iter().any(|t| matches!(t, TopologyItem::Block { .. })) {
            return Err(Error::Config("topology has no searching blocks".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.topology
            .iter()
            .map(|t| match t {
                TopologyItem::Subsample { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }

    pub fn num_blocks(&self) -> usize {
        self.topology
            .iter()
            .filter(|t| matches!(t, TopologyItem::Block { .. }))
            .count()
    }

    /// Product of block cardinalities.
    pub fn count_subgraphs(&self) -> u128 {
        self.topology
            .iter()
            .map(|t| match t {
                TopologyItem::Block { candidates } => candidates.len() as u128,
                _ => 1,
            })
            .product()
    }
}

/// One-hot selections z, stored as the selected index per block.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SampledArchitecture {
    pub selections: Vec<usize>,
}

/// Instantiated candidate: the edge operation plus its post layer-norm and
/// dropout (identity edges stay bare).
#[derive(Debug, Clone)]
pub struct Candidate {
    pub spec: CandidateOpSpec,
    pub layers: CandidateLayers,
    pub norm: Option<NormDropout>,
}

#[derive(Debug, Clone)]
pub enum CandidateLayers {
    Tdnn(TdnnLayer),
    Identity,
    Dense(DenseLayer),
}

impl Candidate {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: &CandidateOpSpec,
        in_dim: usize,
        out_dim: usize,
        dropout_p: f64,
    ) -> Result<Candidate> {
        let (layers, norm) = match spec {
            CandidateOpSpec::Tdnn { half_context, dilation } => {
                let layer = TdnnLayer::new(store, rng, name, in_dim, out_dim, *half_context, *dilation, 1)?;
                let norm = NormDropout::new(store, name, out_dim, dropout_p)?;
                (CandidateLayers::Tdnn(layer), Some(norm))
            }
            CandidateOpSpec::Identity => {
                if in_dim != out_dim {
                    return Err(Error::shape("candidate", format!("identity {} vs {}", in_dim, out_dim)));
                }
                (CandidateLayers::Identity, None)
            }
            CandidateOpSpec::Dense => {
                let layer = DenseLayer::new(store, rng, name, in_dim, out_dim);
                let norm = NormDropout::new(store, name, out_dim, dropout_p)?;
                (CandidateLayers::Dense(layer), Some(norm))
            }
        };
        Ok(Candidate {
            spec: spec.clone(),
            layers,
            norm,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: TensorId,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let y = match &self.layers {
            CandidateLayers::Tdnn(l) => l.forward(store, tape, x)?,
            CandidateLayers::Identity => x,
            CandidateLayers::Dense(l) => l.forward(store, tape, x)?,
        };
        match &self.norm {
            Some(n) => n.forward(store, tape, y, phase, Some(rng)),
            None => Ok(y),
        }
    }

    /// Value-only forward (eval semantics, never any dropout).
    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], batch: usize, t: usize) -> Vec<T> {
        let y = match &self.layers {
            CandidateLayers::Tdnn(l) => l.eval(store, x, batch, t).0,
            CandidateLayers::Identity => x.to_vec(),
            CandidateLayers::Dense(l) => l.eval(store, x),
        };
        match &self.norm {
            Some(n) => n.eval(store, &y),
            None => y,
        }
    }

    pub fn theta_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        match &self.layers {
            CandidateLayers::Tdnn(l) => {
                out.push(l.weights);
                out.push(l.bias);
            }
            CandidateLayers::Identity => {}
            CandidateLayers::Dense(l) => {
                out.push(l.weights);
                out.push(l.bias);
            }
        }
        if let Some(n) = &self.norm {
            out.push(n.gain);
            out.push(n.bias);
        }
        out
    }
}

/// One connected node pair with its K candidate edges and architecture
/// weights.
#[derive(Debug, Clone)]
pub struct SearchingBlock {
    pub index: usize,
    pub node_pair: (usize, usize),
    pub candidates: Vec<Candidate>,
    pub alpha: ParamId,
}

impl SearchingBlock {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// Softmax over the architecture weights.
    pub fn arch_probabilities<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<f64> {
        softmax_f64(&store.values(self.alpha).iter().map(|v| v.to_f64()).collect::<Vec<_>>())
    }
}

pub fn softmax_f64(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone)]
enum EdgeOp {
    Block(usize),
    Subsample { layer: TdnnLayer, norm: NormDropout },
}

#[derive(Debug, Clone)]
struct Edge {
    from: usize,
    to: usize,
    op: EdgeOp,
}

/// Block-operation mode selecting how each searching block combines its
/// candidates.
#[derive(Debug, Clone, Copy)]
pub enum ArchMode<'a> {
    /// Continuous mixture weighted by softmax(alpha).
    Darts,
    /// Soft-sampled mixture with Gumbel noise at temperature tau.
    Snas { tau: f64 },
    /// Hard one-hot gates in the forward pass, straight-through to alpha in
    /// the backward pass; unsampled candidates run detached.
    St { z: &'a SampledArchitecture },
    /// Pruned sub-graph: only the selected candidate exists.
    Fixed { z: &'a SampledArchitecture },
    /// Draw a uniform selection per block, then run as `Fixed`.
    UniformSample,
}

/// Per-forward bookkeeping consumed by the complexity accountant.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Candidate executions per block in this forward pass.
    pub candidate_forwards: Vec<usize>,
    /// Selection drawn when the mode samples internally.
    pub sampled: Option<SampledArchitecture>,
}

/// The expanded DAG: latent nodes, candidate edges, fixed layers, and the
/// classifier head.
#[derive(Debug, Clone)]
pub struct SuperNetwork {
    pub spec: SuperNetSpec,
    pub blocks: Vec<SearchingBlock>,
    edges: Vec<Edge>,
    n_latents: usize,
    /// Parent sets of each latent node (serial chain in the built topology;
    /// the data model admits general DAGs).
    pub parents: Vec<Vec<usize>>,
    pub head: DenseLayer,
}

impl SuperNetwork {
    pub fn build<T: Scalar>(
        spec: &SuperNetSpec,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SuperNetwork> {
        spec.validate()?;
        let mut blocks = Vec::new();
        let mut edges = Vec::new();
        let mut parents: Vec<Vec<usize>> = vec![Vec::new()];
        let mut cur_dim = spec.input_dim;
        let mut latent = 0usize;
        for (i, item) in spec.topology.iter().enumerate() {
            let to = latent + 1;
            parents.push(vec![latent]);
            match item {
                TopologyItem::Block { candidates } => {
                    let bidx = blocks.len();
                    let mut cands = Vec::with_capacity(candidates.len());
                    for (k, cspec) in candidates.iter().enumerate() {
                        let name = format!("block{}.cand{}.{}", bidx, k, cspec.label());
                        cands.push(Candidate::build(store, rng, &name, cspec, cur_dim, spec.width, spec.dropout_p)?);
                    }
                    let alpha = store.zeros(format!("block{}.alpha", bidx), vec![candidates.len()], ParamGroup::Arch);
                    blocks.push(SearchingBlock {
                        index: bidx,
                        node_pair: (latent, to),
                        candidates: cands,
                        alpha,
                    });
                    edges.push(Edge { from: latent, to, op: EdgeOp::Block(bidx) });
                }
                TopologyItem::Subsample { half_context, dilation, stride } => {
                    let name = format!("subsample{}", i);
                    let layer = TdnnLayer::new(store, rng, &name, cur_dim, spec.width, *half_context, *dilation, *stride)?;
                    let norm = NormDropout::new(store, &name, spec.width, spec.dropout_p)?;
                    edges.push(Edge { from: latent, to, op: EdgeOp::Subsample { layer, norm } });
                }
            }
            cur_dim = spec.width;
            latent = to;
        }
        let head = DenseLayer::new(store, rng, "head", cur_dim, spec.num_classes);
        Ok(SuperNetwork {
            spec: spec.clone(),
            blocks,
            edges,
            n_latents: latent + 1,
            parents,
            head,
        })
    }

    pub fn count_subgraphs(&self) -> u128 {
        self.spec.count_subgraphs()
    }

    /// Independent categorical draw per block from softmax(alpha).
    pub fn sample_subgraph<T: Scalar>(&self, store: &ParamStore<T>, rng: &mut ChaCha8Rng) -> SampledArchitecture {
        let selections = self
            .blocks
            .iter()
            .map(|b| sample_categorical(rng, &b.arch_probabilities(store)))
            .collect();
        SampledArchitecture { selections }
    }

    /// Uniform draw per block (warm-up).
    pub fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> SampledArchitecture {
        use rand::Rng;
        let selections = self.blocks.iter().map(|b| rng.gen_range(0..b.k())).collect();
        SampledArchitecture { selections }
    }

    /// Keep the argmax-alpha candidate per block (ties break to the lowest
    /// index); the derived topology is the same spec with K=1 blocks. The
    /// derived model retrains from scratch, so no parameters carry over.
    pub fn derive_top1<T: Scalar>(&self, store: &ParamStore<T>) -> (SuperNetSpec, Vec<String>) {
        let mut labels = Vec::new();
        let mut block_iter = self.blocks.iter();
        let topology = self
            .spec
            .topology
            .iter()
            .map(|item| match item {
                TopologyItem::Block { .. } => {
                    let b = block_iter.next().expect("block count matches topology");
                    let alpha = store.values(b.alpha);
                    let mut best = 0usize;
                    for k in 1..alpha.len() {
                        if alpha[k] > alpha[best] {
                            best = k;
                        }
                    }
                    let spec = b.candidates[best].spec.clone();
                    labels.push(spec.label());
                    TopologyItem::Block { candidates: vec![spec] }
                }
                other => other.clone(),
            })
            .collect();
        (
            SuperNetSpec {
                topology,
                ..self.spec.clone()
            },
            labels,
        )
    }

    /// Compose the topology under the given block mode. `x` is
    /// `[batch, t, input_dim]`; returns logits and the execution trace.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: TensorId,
        mode: ArchMode<'_>,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TensorId, ForwardTrace)> {
        let mut trace = ForwardTrace {
            candidate_forwards: vec![0; self.blocks.len()],
            sampled: None,
        };
        let drawn;
        let mode = match mode {
            ArchMode::UniformSample => {
                drawn = self.sample_uniform(rng);
                trace.sampled = Some(drawn.clone());
                ArchMode::Fixed { z: &drawn }
            }
            m => m,
        };
        if let ArchMode::St { z } | ArchMode::Fixed { z } = mode {
            if z.selections.len() != self.blocks.len() {
                return Err(Error::contract(
                    "forward",
                    format!("{} selections vs {} blocks", z.selections.len(), self.blocks.len()),
                ));
            }
        }
        let mut latents: Vec<Option<TensorId>> = vec![None; self.n_latents];
        latents[0] = Some(x);
        for edge in &self.edges {
            let xin = latents[edge.from].ok_or_else(|| Error::contract("forward", "unset latent input"))?;
            let out = match &edge.op {
                EdgeOp::Subsample { layer, norm } => {
                    let y = layer.forward(store, tape, xin)?;
                    norm.forward(store, tape, y, phase, Some(rng))?
                }
                EdgeOp::Block(bidx) => {
                    let block = &self.blocks[*bidx];
                    let out = match mode {
                        ArchMode::Darts => {
                            trace.candidate_forwards[*bidx] += block.k();
                            estimator::darts_block(store, tape, block, xin, phase, rng)?
                        }
                        ArchMode::Snas { tau } => {
                            trace.candidate_forwards[*bidx] += block.k();
                            estimator::snas_block(store, tape, block, xin, tau, phase, rng)?
                        }
                        ArchMode::St { z } => {
                            trace.candidate_forwards[*bidx] += block.k();
                            estimator::st_block(store, tape, block, xin, z.selections[*bidx], phase, rng)?
                        }
                        ArchMode::Fixed { z } => {
                            trace.candidate_forwards[*bidx] += 1;
                            estimator::fixed_block(store, tape, block, xin, z.selections[*bidx], phase, rng)?
                        }
                        ArchMode::UniformSample => unreachable!("rewritten above"),
                    };
                    out
                }
            };
            latents[edge.to] = match latents[edge.to] {
                None => Some(out),
                Some(prev) => Some(tape.add(prev, out)?),
            };
        }
        let last = latents[self.n_latents - 1].ok_or_else(|| Error::contract("forward", "empty topology"))?;
        let logits = self.head.forward(store, tape, last)?;
        Ok((logits, trace))
    }

    /// Per-block probability snapshot for trajectory logging.
    pub fn pi_snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.arch_probabilities(store)).collect()
    }

    /// Operation-parameter count of the architecture selected by `z`.
    pub fn selected_param_count(&self, z: &SampledArchitecture) -> usize {
        let mut total = self.head.param_count();
        for edge in &self.edges {
            match &edge.op {
                EdgeOp::Subsample { layer, norm } => {
                    total += layer.param_count() + 2 * norm.dim;
                }
                EdgeOp::Block(bidx) => {
                    let b = &self.blocks[*bidx];
                    let cand = &b.candidates[z.selections[*bidx]];
                    total += match &cand.layers {
                        CandidateLayers::Tdnn(l) => l.param_count(),
                        CandidateLayers::Identity => 0,
                        CandidateLayers::Dense(l) => l.param_count(),
                    };
                    if let Some(n) = &cand.norm {
                        total += 2 * n.dim;
                    }
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamRole, StreamSeed};

    fn rng() -> ChaCha8Rng {
        StreamSeed::new(3).stream(StreamRole::ParamInit, &[0])
    }

    fn tiny_spec(k: usize, blocks: usize) -> SuperNetSpec {
        let cands: Vec<CandidateOpSpec> = candidates_k4().into_iter().take(k).collect();
        SuperNetSpec {
            input_dim: 3,
            width: 3,
            num_classes: 4,
            dropout_p: 0.0,
            topology: (0..blocks)
                .map(|_| TopologyItem::Block { candidates: cands.clone() })
                .collect(),
        }
    }

    fn build(spec: &SuperNetSpec) -> (SuperNetwork, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut r = rng();
        let net = SuperNetwork::build(spec, &mut store, &mut r).unwrap();
        (net, store)
    }

    #[test]
    fn arch_probabilities_uniform_at_zero_alpha() {
        let (net, store) = build(&tiny_spec(4, 1));
        let pi = net.blocks[0].arch_probabilities(&store);
        for p in pi {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn arch_probabilities_analytic_case() {
        let (net, mut store) = build(&tiny_spec(4, 1));
        let alpha: Vec<f64> = [1.0f64, 2.0, 3.0, 4.0].iter().map(|v| v.ln()).collect();
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&alpha);
        let pi = net.blocks[0].arch_probabilities(&store);
        for (p, want) in pi.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn arch_probabilities_shift_invariant() {
        let (net, mut store) = build(&tiny_spec(4, 1));
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.3, -1.0, 0.7, 0.1]);
        let a = net.blocks[0].arch_probabilities(&store);
        for v in store.values_mut(net.blocks[0].alpha).iter_mut() {
            *v += 17.5;
        }
        let b = net.blocks[0].arch_probabilities(&store);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn count_subgraphs_matches_presets() {
        let k4 = SuperNetSpec::serial(8, 8, 4, 0.0, candidates_k4());
        assert_eq!(k4.count_subgraphs(), 4096);
        let k6 = SuperNetSpec::serial(8, 8, 4, 0.0, candidates_k6());
        assert_eq!(k6.count_subgraphs(), 46656);
        assert_eq!(tiny_spec(1, 1).count_subgraphs(), 1);
    }

    #[test]
    fn sampling_frequencies_match_uniform_pi() {
        let (net, store) = build(&tiny_spec(4, 1));
        let seed = StreamSeed::new(77);
        let mut counts = [0usize; 4];
        let n = 40_000;
        let mut r = seed.stream(StreamRole::SampleArch, &[0]);
        for _ in 0..n {
            let z = net.sample_subgraph(&store, &mut r);
            counts[z.selections[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.02, "frequency {}", f);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (net, store) = build(&tiny_spec(4, 3));
        let seed = StreamSeed::new(9);
        let a: Vec<_> = {
            let mut r = seed.stream(StreamRole::SampleArch, &[1]);
            (0..50).map(|_| net.sample_subgraph(&store, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = seed.stream(StreamRole::SampleArch, &[1]);
            (0..50).map(|_| net.sample_subgraph(&store, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_categorical_selects_the_point_mass() {
        let (net, mut store) = build(&tiny_spec(4, 1));
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.0, 200.0, 0.0, 0.0]);
        let mut r = rng();
        for _ in 0..50 {
            assert_eq!(net.sample_subgraph(&store, &mut r).selections[0], 1);
        }
    }

    #[test]
    fn derive_top1_takes_argmax_with_low_index_ties() {
        let (net, mut store) = build(&tiny_spec(4, 1));
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.1, 2.3, -1.0, 0.0]);
        let (_, labels) = net.derive_top1(&store);
        assert_eq!(labels, vec!["TDNN-1-2".to_string()]);

        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.0, 0.0, -1.0, -2.0]);
        let (_, labels) = net.derive_top1(&store);
        assert_eq!(labels, vec!["TDNN-1-1".to_string()]); // exact tie -> index 0
    }

    #[test]
    fn derive_top1_is_shift_invariant() {
        let (net, mut store) = build(&tiny_spec(4, 2));
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.4, -0.2, 0.9, 0.0]);
        store.values_mut(net.blocks[1].alpha).copy_from_slice(&[-3.0, 0.0, 0.1, 0.0]);
        let (a, _) = net.derive_top1(&store);
        for b in &net.blocks {
            for v in store.values_mut(b.alpha).iter_mut() {
                *v += 5.0;
            }
        }
        let (b, _) = net.derive_top1(&store);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_candidate_needs_matching_dims() {
        let spec = SuperNetSpec {
            input_dim: 3,
            width: 5,
            num_classes: 2,
            dropout_p: 0.0,
            topology: vec![TopologyItem::Block {
                candidates: vec![CandidateOpSpec::Identity],
            }],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn forward_with_k1_equals_plain_composition() {
        let spec = tiny_spec(1, 1);
        let (net, store) = build(&spec);
        let x: Vec<f64> = (0..2 * 5 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = SampledArchitecture { selections: vec![0] };

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), &[2, 5, 3], false);
        let mut r = rng();
        let (logits, _) = net
            .forward(&store, &mut tape, xid, ArchMode::Fixed { z: &z }, Phase::Eval, &mut r)
            .unwrap();
        // Same thing by hand: candidate eval then head eval.
        let y = net.blocks[0].candidates[0].eval(&store, &x, 2, 5);
        let want = net.head.eval(&store, &y);
        assert_eq!(tape.value(logits), &want[..]);

        // Darts and St reduce to the same single-candidate output when K = 1.
        for mode in [ArchMode::Darts, ArchMode::St { z: &z }] {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 5, 3], false);
            let mut r = rng();
            let (logits, _) = net.forward(&store, &mut tape, xid, mode, Phase::Eval, &mut r).unwrap();
            let got = tape.value(logits);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn st_forward_is_bit_identical_to_pruned_subgraph() {
        let (net, store) = build(&tiny_spec(4, 2));
        let x: Vec<f64> = (0..2 * 6 * 3).map(|i| (i as f64 * 0.23).cos()).collect();
        let z = SampledArchitecture { selections: vec![2, 1] };

        let mut tape_st = Tape::new();
        let xid = tape_st.leaf(x.clone(), &[2, 6, 3], false);
        let mut r = rng();
        let (st_logits, trace) = net
            .forward(&store, &mut tape_st, xid, ArchMode::St { z: &z }, Phase::Eval, &mut r)
            .unwrap();
        assert_eq!(trace.candidate_forwards, vec![4, 4]);

        let mut tape_fx = Tape::new();
        let xid = tape_fx.leaf(x, &[2, 6, 3], false);
        let mut r = rng();
        let (fx_logits, trace_fx) = net
            .forward(&store, &mut tape_fx, xid, ArchMode::Fixed { z: &z }, Phase::Eval, &mut r)
            .unwrap();
        assert_eq!(trace_fx.candidate_forwards, vec![1, 1]);
        assert_eq!(tape_st.value(st_logits), tape_fx.value(fx_logits));
    }

    #[test]
    fn darts_two_candidate_mixture_matches_manual_sum() {
        let (net, mut store) = build(&tiny_spec(2, 1));
        store.values_mut(net.blocks[0].alpha).copy_from_slice(&[0.4, -0.3]);
        let x: Vec<f64> = (0..4 * 3).map(|i| (i as f64 * 0.11).sin()).collect();

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), &[1, 4, 3], false);
        let mut r = rng();
        let (logits, _) = net.forward(&store, &mut tape, xid, ArchMode::Darts, Phase::Eval, &mut r).unwrap();
        let got = tape.value(logits).to_vec();

        let pi = net.blocks[0].arch_probabilities(&store);
        let o1 = net.blocks[0].candidates[0].eval(&store, &x, 1, 4);
        let o2 = net.blocks[0].candidates[1].eval(&store, &x, 1, 4);
        let mixed: Vec<f64> = o1.iter().zip(&o2).map(|(a, b)| pi[0] * a + pi[1] * b).collect();
        let want = net.head.eval(&store, &mixed);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn st_theta_gradients_are_sparse_and_alpha_gradients_dense() {
        let (net, store) = build(&tiny_spec(4, 1));
        let x: Vec<f64> = (0..5 * 3).map(|i| (i as f64 * 0.17).sin()).collect();
        let z = SampledArchitecture { selections: vec![1] };

        let mut tape = Tape::new();
        let xid = tape.leaf(x, &[1, 5, 3], false);
        let mut r = rng();
        let (logits, _) = net
            .forward(&store, &mut tape, xid, ArchMode::St { z: &z }, Phase::Eval, &mut r)
            .unwrap();
        let sq = tape.mul(logits, logits).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let report = tape.backward(loss).unwrap();

        let alpha_grad = report.grads.get(net.blocks[0].alpha).unwrap();
        assert!(alpha_grad.iter().all(|&g| g != 0.0), "alpha grad dense: {:?}", alpha_grad);
        for (k, cand) in net.blocks[0].candidates.iter().enumerate() {
            for pid in cand.theta_params() {
                let g = report.grads.get(pid).unwrap();
                if k == z.selections[0] {
                    assert!(g.iter().any(|&v| v != 0.0), "sampled candidate got zero grad");
                } else {
                    assert!(g.iter().all(|&v| v == 0.0), "unsampled candidate {} got grad", k);
                }
            }
        }
    }

    #[test]
    fn selected_param_count_includes_norm_and_head() {
        let (net, _store) = build(&tiny_spec(4, 1));
        let z = SampledArchitecture { selections: vec![0] };
        // TDNN-1-1: 3 taps * 3 * 3 + 3 = 30; norm 6; head 3*4+4 = 16.
        assert_eq!(net.selected_param_count(&z), 30 + 6 + 16);
    }
}
