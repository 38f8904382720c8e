//! Independent oracles and the gradient-check engine.
//!
//! Everything here verifies the implementation without reusing its code
//! paths: finite differences evaluate the forward pass only, the CTC oracle
//! enumerates alignments exhaustively, and the straight-through oracle
//! hand-chains the softmax Jacobian. The full suite runs in 64-bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::estimator;
use crate::kernels::log_add_exp;
use crate::nn::{ParamGroup, ParamStore, Phase};
use crate::rng::{StreamRole, StreamSeed};
use crate::supernet::{softmax_f64, CandidateOpSpec, SuperNetSpec, SuperNetwork, TopologyItem};
use crate::tape::{ParamId, Tape, TensorId};

/// Result of one oracle check, printable as a single pass/fail line.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<44} observed {:>12.3e}  tol {:>8.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.detail
        )
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function over several tensors.
pub fn central_diff_multi<F>(mut f: F, xs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut g = vec![0.0; xs[i].len()];
        for j in 0..xs[i].len() {
            let mut plus = xs.to_vec();
            plus[i][j] += h;
            let mut minus = xs.to_vec();
            minus[i][j] -= h;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative deviation, with small denominators floored so exact zeros
/// compare cleanly.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Gradcheck a tape-built scalar function of several parameter tensors.
pub fn gradcheck<F>(name: &str, inits: &[(Vec<f64>, Vec<usize>)], rtol: f64, build: F) -> CheckOutcome
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let analytic = (|| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inits
            .iter()
            .enumerate()
            .map(|(i, (v, s))| tape.param(ParamId(i), v, s, true))
            .collect();
        let root = build(&mut tape, &ids)?;
        let report = tape.backward(root)?;
        Ok(inits
            .iter()
            .enumerate()
            .map(|(i, (v, _))| {
                report
                    .grads
                    .get(ParamId(i))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; v.len()])
            })
            .collect())
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => {
            return CheckOutcome {
                name: name.into(),
                passed: false,
                observed: f64::NAN,
                tolerance: rtol,
                detail: format!("build error: {}", e),
            }
        }
    };
    let xs: Vec<Vec<f64>> = inits.iter().map(|(v, _)| v.clone()).collect();
    let numeric = central_diff_multi(
        |vals: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = vals
                .iter()
                .zip(inits)
                .enumerate()
                .map(|(i, (v, (_, s)))| tape.param(ParamId(i), v, s, true))
                .collect();
            let root = build(&mut tape, &ids).expect("forward in finite differences");
            tape.scalar_value(root)
        },
        &xs,
        FD_STEP,
    );
    let flat_a: Vec<f64> = analytic.iter().flatten().cloned().collect();
    let flat_n: Vec<f64> = numeric.iter().flatten().cloned().collect();
    let err = max_rel_err(&flat_a, &flat_n);
    CheckOutcome {
        name: name.into(),
        passed: err <= rtol,
        observed: err,
        tolerance: rtol,
        detail: format!("{} gradient components", flat_a.len()),
    }
}

// ── independent oracles ──────────────────────────────────────────────

/// CTC collapse: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != 0 {
            out.push(p as u32);
        }
        prev = p;
    }
    out
}

/// Exhaustive-alignment CTC loss: enumerate all `vocab^t_len` frame label
/// sequences, keep those collapsing to `label`, and log-sum their path
/// probabilities. Only feasible for tiny `t_len`.
pub fn ctc_brute_force(log_probs: &[f64], vocab: usize, t_len: usize, label: &[u32]) -> f64 {
    let mut total = f64::NEG_INFINITY;
    let n_paths = (vocab as u64).pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    for code in 0..n_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = (c % vocab as u64) as usize;
            c /= vocab as u64;
        }
        if collapse_path(&path) == label {
            let mut lp = 0.0;
            for (t, &v) in path.iter().enumerate() {
                lp += log_probs[t * vocab + v];
            }
            total = log_add_exp(total, lp);
        }
    }
    -total
}

/// `(diag(pi) - pi pi^T) * v`: the softmax Jacobian applied to a vector.
pub fn softmax_jacobian_times(pi: &[f64], v: &[f64]) -> Vec<f64> {
    let dot: f64 = pi.iter().zip(v).map(|(p, x)| p * x).sum();
    pi.iter().zip(v).map(|(p, x)| p * (x - dot)).collect()
}

/// Hand-chained straight-through gradient for a 2-block scalar chain.
///
/// Forward: x1 = a[z1] * x0, x2 = b[z2] * x1, loss = c * x2 (hard gates).
/// The expected alpha gradients substitute the softmax probabilities for the
/// gates: dL/dalpha1 = J_pi1 * u1 with u1_k = (dL/dx1) * a_k * x0, and
/// dL/dalpha2 = J_pi2 * u2 with u2_k = c * b_k * x1.
#[allow(clippy::too_many_arguments)]
pub fn st_two_block_oracle(
    alpha1: &[f64],
    alpha2: &[f64],
    a: &[f64],
    b: &[f64],
    x0: f64,
    c: f64,
    z1: usize,
    z2: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pi1 = softmax_f64(alpha1);
    let pi2 = softmax_f64(alpha2);
    let x1 = a[z1] * x0;
    let dl_dx2 = c;
    let dl_dx1 = c * b[z2];
    let u1: Vec<f64> = a.iter().map(|&ak| dl_dx1 * ak * x0).collect();
    let u2: Vec<f64> = b.iter().map(|&bk| dl_dx2 * bk * x1).collect();
    (softmax_jacobian_times(&pi1, &u1), softmax_jacobian_times(&pi2, &u2))
}

/// The same chain built on the tape with straight-through gates.
#[allow(clippy::too_many_arguments)]
pub fn st_two_block_tape(
    alpha1: &[f64],
    alpha2: &[f64],
    a: &[f64],
    b: &[f64],
    x0: f64,
    c: f64,
    z1: usize,
    z2: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let a1 = tape.param(ParamId(0), alpha1, &[alpha1.len()], true);
    let a2 = tape.param(ParamId(1), alpha2, &[alpha2.len()], true);
    let x = tape.leaf(vec![x0], &[1], false);

    let pi1 = tape.softmax(a1)?;
    let mut hard1 = vec![0.0; alpha1.len()];
    hard1[z1] = 1.0;
    let hard1 = tape.leaf(hard1, &[alpha1.len()], false);
    let gate1 = tape.straight_through(hard1, pi1)?;
    let terms1: Vec<TensorId> = a
        .iter()
        .map(|&ak| tape.scale(x, ak))
        .collect::<Result<_>>()?;
    let x1 = tape.weighted_sum(gate1, &terms1)?;

    let pi2 = tape.softmax(a2)?;
    let mut hard2 = vec![0.0; alpha2.len()];
    hard2[z2] = 1.0;
    let hard2 = tape.leaf(hard2, &[alpha2.len()], false);
    let gate2 = tape.straight_through(hard2, pi2)?;
    let terms2: Vec<TensorId> = b
        .iter()
        .map(|&bk| tape.scale(x1, bk))
        .collect::<Result<_>>()?;
    let x2 = tape.weighted_sum(gate2, &terms2)?;

    let scaled = tape.scale(x2, c)?;
    let loss = tape.sum_all(scaled)?;
    let report = tape.backward(loss)?;
    Ok((
        report.grads.get(ParamId(0)).unwrap().to_vec(),
        report.grads.get(ParamId(1)).unwrap().to_vec(),
    ))
}

// ── the registered check suite ───────────────────────────────────────

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<CheckOutcome> {
    let rtol = 1e-4;
    let mut out = Vec::new();

    let x = rand_vals(rng, 6, -1.0, 1.0);
    let y = rand_vals(rng, 6, -1.0, 1.0);
    out.push(gradcheck(
        "primitive add",
        &[(x.clone(), vec![6]), (y.clone(), vec![6])],
        rtol,
        |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let sq = t.mul(s, s)?;
            t.sum_all(sq)
        },
    ));
    out.push(gradcheck(
        "primitive sub",
        &[(x.clone(), vec![6]), (y.clone(), vec![6])],
        rtol,
        |t, ids| {
            let s = t.sub(ids[0], ids[1])?;
            let sq = t.mul(s, s)?;
            t.sum_all(sq)
        },
    ));
    out.push(gradcheck(
        "primitive mul",
        &[(x.clone(), vec![6]), (y.clone(), vec![6])],
        rtol,
        |t, ids| {
            let s = t.mul(ids[0], ids[1])?;
            t.sum_all(s)
        },
    ));
    out.push(gradcheck("primitive scale", &[(x.clone(), vec![6])], rtol, |t, ids| {
        let s = t.scale(ids[0], -1.7)?;
        let sq = t.mul(s, s)?;
        t.sum_all(sq)
    }));
    out.push(gradcheck("primitive exp", &[(x.clone(), vec![6])], rtol, |t, ids| {
        let e = t.exp(ids[0])?;
        t.sum_all(e)
    }));
    let pos = rand_vals(rng, 6, 0.5, 2.0);
    out.push(gradcheck("primitive ln", &[(pos, vec![6])], rtol, |t, ids| {
        let e = t.ln(ids[0])?;
        t.sum_all(e)
    }));
    let a = rand_vals(rng, 12, -1.0, 1.0);
    let bias = rand_vals(rng, 4, -1.0, 1.0);
    out.push(gradcheck(
        "primitive add_bias",
        &[(a.clone(), vec![3, 4]), (bias, vec![4])],
        rtol,
        |t, ids| {
            let s = t.add_bias(ids[0], ids[1])?;
            let sq = t.mul(s, s)?;
            t.sum_all(sq)
        },
    ));
    let m = rand_vals(rng, 6, -1.0, 1.0);
    let w = rand_vals(rng, 12, -1.0, 1.0);
    out.push(gradcheck(
        "primitive matmul",
        &[(m, vec![2, 3]), (w, vec![3, 4])],
        rtol,
        |t, ids| {
            let s = t.matmul(ids[0], ids[1])?;
            let sq = t.mul(s, s)?;
            t.sum_all(sq)
        },
    ));
    let xin = rand_vals(rng, 2 * 7 * 3, -1.0, 1.0);
    let wk = rand_vals(rng, 5 * 3 * 2, -1.0, 1.0);
    let bk = rand_vals(rng, 2, -1.0, 1.0);
    out.push(gradcheck(
        "primitive conv1d h2 d2 s1",
        &[(xin.clone(), vec![2, 7, 3]), (wk, vec![5, 3, 2]), (bk, vec![2])],
        rtol,
        |t, ids| {
            let c = t.conv1d(ids[0], ids[1], ids[2], 2, 2, 1)?;
            let sq = t.mul(c, c)?;
            t.sum_all(sq)
        },
    ));
    let ws = rand_vals(rng, 3 * 3 * 2, -1.0, 1.0);
    let bs = rand_vals(rng, 2, -1.0, 1.0);
    out.push(gradcheck(
        "primitive conv1d h1 d1 s3",
        &[(xin, vec![2, 7, 3]), (ws, vec![3, 3, 2]), (bs, vec![2])],
        rtol,
        |t, ids| {
            let c = t.conv1d(ids[0], ids[1], ids[2], 1, 1, 3)?;
            let sq = t.mul(c, c)?;
            t.sum_all(sq)
        },
    ));
    let sm = rand_vals(rng, 8, -2.0, 2.0);
    out.push(gradcheck("primitive softmax", &[(sm.clone(), vec![2, 4])], rtol, |t, ids| {
        let s = t.softmax(ids[0])?;
        let sq = t.mul(s, s)?;
        t.sum_all(sq)
    }));
    out.push(gradcheck("primitive log_softmax", &[(sm.clone(), vec![2, 4])], rtol, |t, ids| {
        let s = t.log_softmax(ids[0])?;
        let sq = t.mul(s, s)?;
        t.sum_all(sq)
    }));
    out.push(gradcheck("primitive mean_all", &[(sm.clone(), vec![8])], rtol, |t, ids| {
        let sq = t.mul(ids[0], ids[0])?;
        t.mean_all(sq)
    }));
    let ln_x = rand_vals(rng, 3 * 5, -1.0, 1.0);
    let gain = rand_vals(rng, 5, 0.5, 1.5);
    let lb = rand_vals(rng, 5, -0.5, 0.5);
    out.push(gradcheck(
        "primitive layer_norm",
        &[(ln_x, vec![3, 5]), (gain, vec![5]), (lb, vec![5])],
        rtol,
        |t, ids| {
            let s = t.layer_norm(ids[0], ids[1], ids[2])?;
            let sq = t.mul(s, s)?;
            t.sum_all(sq)
        },
    ));
    let wsum_w = rand_vals(rng, 3, -1.0, 1.0);
    let t1 = rand_vals(rng, 4, -1.0, 1.0);
    let t2 = rand_vals(rng, 4, -1.0, 1.0);
    let t3 = rand_vals(rng, 4, -1.0, 1.0);
    out.push(gradcheck(
        "primitive weighted_sum",
        &[(wsum_w, vec![3]), (t1, vec![4]), (t2, vec![4]), (t3, vec![4])],
        rtol,
        |t, ids| {
            let s = t.weighted_sum(ids[0], &ids[1..])?;
            let sq = t.mul(s, s)?;
            t.sum_all(sq)
        },
    ));
    let logits = rand_vals(rng, 4 * 3, -1.5, 1.5);
    out.push(gradcheck("loss cross_entropy", &[(logits, vec![4, 3])], rtol, |t, ids| {
        crate::loss::cross_entropy(t, ids[0], &[0, 2, 1, 2])
    }));
    // Detach: the analytic gradient of x*detach(x) must equal d(x*c)/dx.
    let dv = rand_vals(rng, 5, -1.0, 1.0);
    out.push({
        let mut tape = Tape::<f64>::new();
        let x = tape.param(ParamId(0), &dv, &[5], true);
        let d = tape.detach(x).unwrap();
        let prod = tape.mul(x, d).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let g = tape.backward(loss).unwrap().grads.get(ParamId(0)).unwrap().to_vec();
        let err = max_rel_err(&g, &dv);
        CheckOutcome {
            name: "primitive detach".into(),
            passed: err <= 1e-12,
            observed: err,
            tolerance: 1e-12,
            detail: "gradient equals the detached factor".into(),
        }
    });
    out
}

fn composite_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    // Random 3-layer smooth composition at tight tolerance.
    let x = rand_vals(rng, 6, -0.8, 0.8);
    let w1 = rand_vals(rng, 6 * 5, -0.6, 0.6);
    let w2 = rand_vals(rng, 5 * 4, -0.6, 0.6);
    let w3 = rand_vals(rng, 4 * 2, -0.6, 0.6);
    gradcheck(
        "composite 3-layer",
        &[(x, vec![1, 6]), (w1, vec![6, 5]), (w2, vec![5, 4]), (w3, vec![4, 2])],
        1e-6,
        |t, ids| {
            let h1 = t.matmul(ids[0], ids[1])?;
            let a1 = t.softmax(h1)?;
            let h2 = t.matmul(a1, ids[2])?;
            let a2 = t.exp(h2)?;
            let h3 = t.matmul(a2, ids[3])?;
            let sq = t.mul(h3, h3)?;
            t.mean_all(sq)
        },
    )
}

fn nn_op_checks(rng: &mut ChaCha8Rng) -> Vec<CheckOutcome> {
    let rtol = 1e-4;
    let mut out = Vec::new();
    // TDNN + layer norm as used inside a candidate (eval mode, no dropout).
    let x = rand_vals(rng, 6 * 3, -1.0, 1.0);
    let w = rand_vals(rng, 3 * 3 * 3, -0.5, 0.5);
    let b = rand_vals(rng, 3, -0.5, 0.5);
    let g = rand_vals(rng, 3, 0.8, 1.2);
    let lb = rand_vals(rng, 3, -0.2, 0.2);
    out.push(gradcheck(
        "nn tdnn+layer_norm",
        &[
            (x, vec![1, 6, 3]),
            (w, vec![3, 3, 3]),
            (b, vec![3]),
            (g, vec![3]),
            (lb, vec![3]),
        ],
        rtol,
        |t, ids| {
            let c = t.conv1d(ids[0], ids[1], ids[2], 1, 1, 1)?;
            let n = t.layer_norm(c, ids[3], ids[4])?;
            let sq = t.mul(n, n)?;
            t.sum_all(sq)
        },
    ));
    // Dense + log-softmax + NLL, the classifier head path.
    let x = rand_vals(rng, 2 * 3, -1.0, 1.0);
    let w = rand_vals(rng, 3 * 4, -0.7, 0.7);
    let b = rand_vals(rng, 4, -0.3, 0.3);
    out.push(gradcheck(
        "nn dense+nll",
        &[(x, vec![2, 3]), (w, vec![3, 4]), (b, vec![4])],
        rtol,
        |t, ids| {
            let h = t.matmul(ids[0], ids[1])?;
            let h = t.add_bias(h, ids[2])?;
            crate::loss::cross_entropy(t, h, &[1, 3])
        },
    ));
    out
}

fn ctc_checks(rng: &mut ChaCha8Rng, cases: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    // Enumeration oracle across random small cases.
    let mut max_dev = 0.0f64;
    let mut n_done = 0usize;
    'outer: for _ in 0..cases * 3 {
        if n_done >= cases {
            break 'outer;
        }
        let vocab = rng.gen_range(2..=4usize);
        let t_len = rng.gen_range(1..=6usize);
        let label_len = rng.gen_range(0..=3usize.min(t_len));
        let label: Vec<u32> = (0..label_len).map(|_| rng.gen_range(1..vocab) as u32).collect();
        let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
        if label.len() + repeats > t_len || label.is_empty() && t_len == 0 {
            continue;
        }
        // Random normalized log-distributions per frame.
        let mut lp = vec![0.0; t_len * vocab];
        for t in 0..t_len {
            let raw = rand_vals(rng, vocab, -2.0, 2.0);
            let ls = softmax_f64(&raw);
            for v in 0..vocab {
                lp[t * vocab + v] = ls[v].ln();
            }
        }
        let oracle = ctc_brute_force(&lp, vocab, t_len, &label);
        let mut tape = Tape::<f64>::new();
        let lp_id = tape.leaf(lp, &[1, t_len, vocab], false);
        let loss = match tape.ctc(lp_id, std::slice::from_ref(&label), &[t_len]) {
            Ok(l) => l,
            Err(_) => continue,
        };
        let got = tape.scalar_value(loss);
        max_dev = max_dev.max((got - oracle).abs());
        n_done += 1;
    }
    out.push(CheckOutcome {
        name: format!("ctc enumeration oracle ({} cases)", n_done),
        passed: n_done >= cases && max_dev <= 1e-10,
        observed: max_dev,
        tolerance: 1e-10,
        detail: "T<=6, |label|<=3, V<=4".into(),
    });

    // Gradcheck on the DP loss.
    let t_len = 5;
    let vocab = 3;
    let raw = rand_vals(rng, t_len * vocab, -1.0, 1.0);
    out.push(gradcheck("loss ctc gradient", &[(raw, vec![1, t_len, vocab])], 1e-4, |t, ids| {
        let lp = t.log_softmax(ids[0])?;
        t.ctc(lp, &[vec![1, 2]], &[t_len])
    }));
    out
}

fn estimator_checks(rng: &mut ChaCha8Rng) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let rtol = 1e-4;

    // A one-block net shared by the alpha-path checks.
    let spec = SuperNetSpec {
        input_dim: 3,
        width: 3,
        num_classes: 3,
        dropout_p: 0.0,
        topology: vec![TopologyItem::Block {
            candidates: vec![
                CandidateOpSpec::Tdnn { half_context: 1, dilation: 1 },
                CandidateOpSpec::Tdnn { half_context: 1, dilation: 2 },
                CandidateOpSpec::Tdnn { half_context: 2, dilation: 1 },
            ],
        }],
    };
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = StreamSeed::new(1234).stream(StreamRole::ParamInit, &[0]);
    let net = SuperNetwork::build(&spec, &mut store, &mut init_rng).unwrap();
    let x: Vec<f64> = rand_vals(rng, 2 * 6 * 3, -1.0, 1.0);
    let alpha0 = rand_vals(rng, 3, -0.5, 0.5);
    let alpha_pid = net.blocks[0].alpha;
    store.set_group_trainable(ParamGroup::Op, false);

    // DARTS: finite differences over alpha through the full mixture.
    {
        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 6, 3], false);
            let mut r = StreamSeed::new(0).stream(StreamRole::Gumbel, &[0]);
            let (logits, _) = net
                .forward(store, &mut tape, xid, crate::supernet::ArchMode::Darts, Phase::Eval, &mut r)
                .unwrap();
            let sq = tape.mul(logits, logits).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            tape.scalar_value(loss)
        };
        store.values_mut(alpha_pid).copy_from_slice(&alpha0);
        let analytic = {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 6, 3], false);
            let mut r = StreamSeed::new(0).stream(StreamRole::Gumbel, &[0]);
            let (logits, _) = net
                .forward(&store, &mut tape, xid, crate::supernet::ArchMode::Darts, Phase::Eval, &mut r)
                .unwrap();
            let sq = tape.mul(logits, logits).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            let rep = tape.backward(loss).unwrap();
            rep.grads.get(alpha_pid).unwrap().to_vec()
        };
        let numeric = central_diff_multi(
            |vals: &[Vec<f64>]| {
                let mut s2 = store.clone();
                s2.values_mut(alpha_pid).copy_from_slice(&vals[0]);
                eval(&s2)
            },
            std::slice::from_ref(&alpha0),
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric[0]);
        out.push(CheckOutcome {
            name: "estimator darts alpha-path".into(),
            passed: err <= rtol,
            observed: err,
            tolerance: rtol,
            detail: "finite differences on alpha".into(),
        });
    }

    // SNAS: same check with frozen Gumbel noise (identical stream per eval).
    {
        let tau = 0.7;
        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 6, 3], false);
            let mut r = StreamSeed::new(99).stream(StreamRole::Gumbel, &[7]);
            let (logits, _) = net
                .forward(store, &mut tape, xid, crate::supernet::ArchMode::Snas { tau }, Phase::Eval, &mut r)
                .unwrap();
            let sq = tape.mul(logits, logits).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            tape.scalar_value(loss)
        };
        store.values_mut(alpha_pid).copy_from_slice(&alpha0);
        let analytic = {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 6, 3], false);
            let mut r = StreamSeed::new(99).stream(StreamRole::Gumbel, &[7]);
            let (logits, _) = net
                .forward(&store, &mut tape, xid, crate::supernet::ArchMode::Snas { tau }, Phase::Eval, &mut r)
                .unwrap();
            let sq = tape.mul(logits, logits).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            let rep = tape.backward(loss).unwrap();
            rep.grads.get(alpha_pid).unwrap().to_vec()
        };
        let numeric = central_diff_multi(
            |vals: &[Vec<f64>]| {
                let mut s2 = store.clone();
                s2.values_mut(alpha_pid).copy_from_slice(&vals[0]);
                eval(&s2)
            },
            std::slice::from_ref(&alpha0),
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric[0]);
        out.push(CheckOutcome {
            name: "estimator snas alpha-path".into(),
            passed: err <= rtol,
            observed: err,
            tolerance: rtol,
            detail: "finite differences on alpha, frozen noise".into(),
        });
    }

    // ST with a linear downstream loss: the alpha gradient must equal the
    // finite differences of the soft surrogate sum_k pi_k(alpha) <v, o_k>.
    {
        let z_sel = 1usize;
        store.values_mut(alpha_pid).copy_from_slice(&alpha0);
        let v = rand_vals(rng, 2 * 6 * 3, -1.0, 1.0);
        let terms: Vec<Vec<f64>> = net.blocks[0]
            .candidates
            .iter()
            .map(|c| c.eval(&store, &x, 2, 6))
            .collect();
        let u: Vec<f64> = terms
            .iter()
            .map(|o| o.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let analytic = {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), &[2, 6, 3], false);
            let mut r = StreamSeed::new(0).stream(StreamRole::Gumbel, &[0]);
            let out = estimator::st_block(&store, &mut tape, &net.blocks[0], xid, z_sel, Phase::Eval, &mut r).unwrap();
            let vid = tape.leaf(v.clone(), &[2, 6, 3], false);
            let prod = tape.mul(out, vid).unwrap();
            let loss = tape.sum_all(prod).unwrap();
            let rep = tape.backward(loss).unwrap();
            rep.grads.get(alpha_pid).unwrap().to_vec()
        };
        let numeric = central_diff_multi(
            |vals: &[Vec<f64>]| {
                let pi = softmax_f64(&vals[0]);
                pi.iter().zip(&u).map(|(p, uk)| p * uk).sum()
            },
            std::slice::from_ref(&alpha0),
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric[0]);
        out.push(CheckOutcome {
            name: "estimator st alpha-path".into(),
            passed: err <= rtol,
            observed: err,
            tolerance: rtol,
            detail: "finite differences of the soft surrogate".into(),
        });
    }
    store.set_group_trainable(ParamGroup::Op, true);

    // Analytic single-block Jacobian value.
    {
        let (g1, _) = st_two_block_tape(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], 1.0, 1.0, 0, 0).unwrap();
        let want = [0.25, -0.25];
        let err = max_rel_err(&g1, &want);
        out.push(CheckOutcome {
            name: "estimator st analytic jacobian".into(),
            passed: err <= 1e-12,
            observed: err,
            tolerance: 1e-12,
            detail: "alpha=(0,0), v=(1,0) -> (0.25, -0.25)".into(),
        });
    }

    // Two-block hand-chained oracle.
    {
        let alpha1 = rand_vals(rng, 3, -1.0, 1.0);
        let alpha2 = rand_vals(rng, 2, -1.0, 1.0);
        let a = rand_vals(rng, 3, -1.5, 1.5);
        let b = rand_vals(rng, 2, -1.5, 1.5);
        let (x0, c) = (1.3, -0.7);
        let (z1, z2) = (2, 0);
        let (want1, want2) = st_two_block_oracle(&alpha1, &alpha2, &a, &b, x0, c, z1, z2);
        let (got1, got2) = st_two_block_tape(&alpha1, &alpha2, &a, &b, x0, c, z1, z2).unwrap();
        let err = max_rel_err(&got1, &want1).max(max_rel_err(&got2, &want2));
        out.push(CheckOutcome {
            name: "estimator st 2-block chained oracle".into(),
            passed: err <= 1e-10,
            observed: err,
            tolerance: 1e-10,
            detail: "hand-applied chain rule through both gates".into(),
        });
    }
    out
}

fn sampling_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    // Gumbel-max statistics.
    {
        let alpha = [0.5, -0.5, 1.0, 0.0];
        let pi = softmax_f64(&alpha);
        let mut counts = [0usize; 4];
        let n = 100_000;
        let mut r = StreamSeed::new(2024).stream(StreamRole::Gumbel, &[0]);
        for _ in 0..n {
            let g = estimator::gumbel_noise(&mut r, 4);
            let mut best = 0;
            for k in 1..4 {
                if alpha[k] + g[k] > alpha[best] + g[best] {
                    best = k;
                }
            }
            counts[best] += 1;
        }
        let worst = counts
            .iter()
            .zip(&pi)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome {
            name: "sampling gumbel-max vs softmax".into(),
            passed: worst <= 0.02,
            observed: worst,
            tolerance: 0.02,
            detail: format!("{} draws over 4 arms", n),
        });
    }
    // Categorical sampling statistics at uniform probabilities.
    {
        let mut counts = [0usize; 4];
        let n = 40_000;
        let mut r = StreamSeed::new(2025).stream(StreamRole::SampleArch, &[0]);
        for _ in 0..n {
            counts[crate::rng::sample_categorical(&mut r, &[0.25; 4])] += 1;
        }
        let worst = counts
            .iter()
            .map(|&c| (c as f64 / n as f64 - 0.25).abs())
            .fold(0.0, f64::max);
        out.push(CheckOutcome {
            name: "sampling categorical uniform".into(),
            passed: worst <= 0.02,
            observed: worst,
            tolerance: 0.02,
            detail: format!("{} draws over 4 arms", n),
        });
    }
    // Temperature limit of the soft weights.
    {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.leaf(vec![0.1, 0.6, -0.2], &[3], false);
        let y = estimator::gumbel_softmax_weights_with_noise(&mut tape, alpha, 1e-3, &[0.13, -0.25, 0.4]).unwrap();
        let mx = tape.value(y).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(CheckOutcome {
            name: "sampling gumbel tau->0 concentration".into(),
            passed: mx >= 0.999,
            observed: mx,
            tolerance: 0.999,
            detail: "max soft weight at tau = 1e-3".into(),
        });
    }
    out
}

/// Negative control: a deliberately corrupted backward rule must be caught
/// by the finite-difference engine and reported against its primitive.
fn negative_control(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let x = rand_vals(rng, 4, -1.0, 1.0);
    let y = rand_vals(rng, 4, -1.0, 1.0);
    let analytic = {
        let mut tape = Tape::<f64>::new();
        tape.inject_backward_fault("mul");
        let a = tape.param(ParamId(0), &x, &[4], true);
        let b = tape.param(ParamId(1), &y, &[4], true);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let rep = tape.backward(loss).unwrap();
        rep.grads.get(ParamId(0)).unwrap().to_vec()
    };
    let numeric = central_diff_multi(
        |vals: &[Vec<f64>]| vals[0].iter().zip(&y).map(|(a, b)| a * b).sum::<f64>(),
        &[x],
        FD_STEP,
    );
    let err = max_rel_err(&analytic, &numeric[0]);
    CheckOutcome {
        name: "negative control: corrupted mul backward".into(),
        passed: err > 1e-4,
        observed: err,
        tolerance: 1e-4,
        detail: "engine must flag the injected fault in `mul`".into(),
    }
}

/// The full oracle suite: finite-difference gradchecks for every primitive
/// and composite, the CTC enumeration oracle, the straight-through Jacobian
/// oracles, and the sampling statistics. All in 64-bit.
pub fn run_all_checks() -> Vec<CheckOutcome> {
    let seed = StreamSeed::new(0xC0FFEE);
    let mut rng = seed.stream(StreamRole::TaskData, &[42]);
    let mut out = Vec::new();
    out.extend(primitive_checks(&mut rng));
    out.push(composite_check(&mut rng));
    out.extend(nn_op_checks(&mut rng));
    out.extend(ctc_checks(&mut rng, 200));
    out.extend(estimator_checks(&mut rng));
    out.extend(sampling_checks());
    out.push(negative_control(&mut rng));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_agrees_with_hand_enumeration() {
        // V = 2, T = 2, uniform: alignments aa, a-, -a each 1/4.
        let lp = vec![(0.5f64).ln(); 4];
        let loss = ctc_brute_force(&lp, 2, 2, &[1]);
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn collapse_merges_then_strips() {
        assert_eq!(collapse_path(&[1, 1, 0, 2, 2]), vec![1, 2]);
        assert_eq!(collapse_path(&[0, 0, 0]), Vec::<u32>::new());
        assert_eq!(collapse_path(&[1, 0, 1]), vec![1, 1]);
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        let pi = softmax_f64(&[0.3, -0.2, 0.9]);
        let j: Vec<f64> = softmax_jacobian_times(&pi, &[1.0, 0.0, 0.0]);
        let s: f64 = j.iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn full_suite_passes() {
        let checks = run_all_checks();
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
        assert!(checks.len() >= 20);
    }
}
