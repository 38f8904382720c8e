//! Task losses: frame cross-entropy and CTC.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::scalar::Scalar;

/// Label/length metadata for one CTC minibatch. The log-probabilities live on
/// the tape as a `[batch, max_t, vocab]` tensor with blank at index 0; each
/// frame must be a normalized log-distribution.
#[derive(Debug, Clone)]
pub struct CtcBatch {
    pub labels: Vec<Vec<u32>>,
    pub input_lens: Vec<usize>,
}

impl CtcBatch {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.labels.len() != self.input_lens.len() {
            return Err(Error::contract(
                "ctc_batch",
                format!("{} labels vs {} lengths", self.labels.len(), self.input_lens.len()),
            ));
        }
        for (label, &t_len) in self.labels.iter().zip(&self.input_lens) {
            if label.len() > t_len {
                return Err(Error::contract(
                    "ctc_batch",
                    format!("label length {} exceeds input length {}", label.len(), t_len),
                ));
            }
            if label.iter().any(|&l| l == 0 || l as usize >= vocab) {
                return Err(Error::contract(
                    "ctc_batch",
                    format!("label symbols must lie in 1..{}", vocab),
                ));
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of per-frame targets under `logits[..., v]`.
/// `u32::MAX` marks padded frames.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: TensorId,
    targets: &[u32],
) -> Result<TensorId> {
    let log_probs = tape.log_softmax(logits)?;
    tape.nll_mean(log_probs, targets)
}

/// Mean CTC negative log-probability over the batch. The blank-augmented
/// forward-backward recursion runs in log space.
pub fn ctc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: TensorId,
    batch: &CtcBatch,
) -> Result<TensorId> {
    let vocab = *tape
        .shape(log_probs)
        .last()
        .ok_or_else(|| Error::shape("ctc_loss", "scalar log_probs"))?;
    batch.validate(vocab)?;
    #[cfg(debug_assertions)]
    {
        let shape = tape.shape(log_probs).to_vec();
        debug_assert_eq!(shape.len(), 3);
        let v = tape.value(log_probs);
        for frame in v.chunks(vocab) {
            let mut z = f64::NEG_INFINITY;
            for &x in frame {
                z = crate::kernels::log_add_exp(z, x.to_f64());
            }
            debug_assert!(z.abs() < 1e-5, "log_probs frame not normalized: lse = {}", z);
        }
    }
    tape.ctc(log_probs, &batch.labels, &batch.input_lens)
}

/// Greedy CTC decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode<T: Scalar>(log_probs: &[T], vocab: usize, t_len: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = 0u32;
    for t in 0..t_len {
        let frame = &log_probs[t * vocab..(t + 1) * vocab];
        let mut best = 0usize;
        for v in 1..vocab {
            if frame[v] > frame[best] {
                best = v;
            }
        }
        let sym = best as u32;
        if sym != 0 && sym != prev {
            out.push(sym);
        }
        prev = sym;
    }
    out
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &av) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bv) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(av != bv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Blank-augmented forward-backward recursion and its analytic gradient.
pub mod ctc_dp {
    use super::*;

    fn lae<T: Scalar>(a: T, b: T) -> T {
        if a == T::NEG_INF {
            return b;
        }
        if b == T::NEG_INF {
            return a;
        }
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        hi + (T::ONE + (lo - hi).exp()).ln()
    }

    /// Per-item quantities retained for the backward rule: the log-occupancy
    /// of every (frame, augmented-state) pair and the total log-probability.
    #[derive(Debug, Clone)]
    pub struct CtcItemSaved<T: Scalar> {
        pub l_prime: Vec<u32>,
        /// [t_len, s_len] log prob of all admissible paths through (t, s).
        pub log_occupancy: Vec<T>,
        pub log_p: T,
        pub t_len: usize,
    }

    fn augment(label: &[u32]) -> Vec<u32> {
        let mut lp = Vec::with_capacity(2 * label.len() + 1);
        lp.push(0);
        for &l in label {
            lp.push(l);
            lp.push(0);
        }
        lp
    }

    /// Minimum frames needed: one per symbol plus one separating blank per
    /// repeated pair.
    fn min_frames(label: &[u32]) -> usize {
        let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
        label.len() + repeats
    }

    pub fn forward_item<T: Scalar>(
        lp: &[T],
        vocab: usize,
        t_len: usize,
        label: &[u32],
    ) -> Result<CtcItemSaved<T>> {
        if label.iter().any(|&l| l == 0 || l as usize >= vocab) {
            return Err(Error::contract(
                "ctc",
                format!("label symbols must lie in 1..{}", vocab),
            ));
        }
        if t_len < min_frames(label) {
            return Err(Error::CtcInfeasible {
                label_len: label.len(),
                frames: t_len,
            });
        }
        let l_prime = augment(label);
        let s_len = l_prime.len();
        let at = |t: usize, v: u32| lp[t * vocab + v as usize];

        let mut alpha = vec![T::NEG_INF; t_len * s_len];
        alpha[0] = at(0, 0);
        if s_len > 1 {
            alpha[1] = at(0, l_prime[1]);
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let mut a = alpha[(t - 1) * s_len + s];
                if s >= 1 {
                    a = lae(a, alpha[(t - 1) * s_len + s - 1]);
                }
                if s >= 2 && l_prime[s] != 0 && l_prime[s] != l_prime[s - 2] {
                    a = lae(a, alpha[(t - 1) * s_len + s - 2]);
                }
                alpha[t * s_len + s] = if a == T::NEG_INF { a } else { a + at(t, l_prime[s]) };
            }
        }
        let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
        if s_len > 1 {
            log_p = lae(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
        }
        if !log_p.is_finite() {
            return Err(Error::Numeric(
                "ctc total path probability underflowed to zero".into(),
            ));
        }

        let mut beta = vec![T::NEG_INF; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = at(t_len - 1, l_prime[s_len - 1]);
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = at(t_len - 1, l_prime[s_len - 2]);
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let mut b = beta[(t + 1) * s_len + s];
                if s + 1 < s_len {
                    b = lae(b, beta[(t + 1) * s_len + s + 1]);
                }
                if s + 2 < s_len && l_prime[s + 2] != 0 && l_prime[s + 2] != l_prime[s] {
                    b = lae(b, beta[(t + 1) * s_len + s + 2]);
                }
                beta[t * s_len + s] = if b == T::NEG_INF { b } else { b + at(t, l_prime[s]) };
            }
        }

        // occupancy(t, s) = alpha + beta - emission (both factors include it once)
        let mut log_occupancy = vec![T::NEG_INF; t_len * s_len];
        for t in 0..t_len {
            for s in 0..s_len {
                let a = alpha[t * s_len + s];
                let b = beta[t * s_len + s];
                if a != T::NEG_INF && b != T::NEG_INF {
                    log_occupancy[t * s_len + s] = a + b - at(t, l_prime[s]);
                }
            }
        }
        #[cfg(debug_assertions)]
        {
            // Marginalizing the occupancy over states at any frame recovers
            // log_p; tolerance scales with element precision.
            let tol = (1.0 + log_p.to_f64().abs()) * if T::BYTES == 8 { 1e-9 } else { 1e-3 };
            for t in 0..t_len {
                let mut z = T::NEG_INF;
                for s in 0..s_len {
                    z = lae(z, log_occupancy[t * s_len + s]);
                }
                debug_assert!(
                    (z.to_f64() - log_p.to_f64()).abs() < tol,
                    "occupancy marginal {} != log_p {} at t={}",
                    z,
                    log_p,
                    t
                );
            }
        }
        Ok(CtcItemSaved {
            l_prime,
            log_occupancy,
            log_p,
            t_len,
        })
    }

    /// d(-log p)/d log_probs[t, v] = -exp(LSE_{s: l'_s = v} occ(t, s) - log p),
    /// scaled by the upstream gradient. Writes into the item's [max_t, vocab]
    /// slice; padded frames stay zero.
    pub fn backward_item<T: Scalar>(saved: &CtcItemSaved<T>, vocab: usize, scale: T, out: &mut [T]) {
        let s_len = saved.l_prime.len();
        for t in 0..saved.t_len {
            // Accumulate per-vocab log-sums over the few augmented states.
            let mut lse = vec![T::NEG_INF; vocab];
            for s in 0..s_len {
                let v = saved.l_prime[s] as usize;
                lse[v] = lae(lse[v], saved.log_occupancy[t * s_len + s]);
            }
            for v in 0..vocab {
                if lse[v] != T::NEG_INF {
                    out[t * vocab + v] += -(lse[v] - saved.log_p).exp() * scale;
                }
            }
        }
    }
}
