//! Connectionist temporal classification: the primary sequence loss.
//!
//! The loss is the negative log-probability of a label sequence under the
//! blank-augmented alignment lattice, computed with the standard α/β dynamic
//! program in log space. An enumeration oracle ([`ctc_bruteforce`]) defines
//! ground truth for small instances, and the analytic gradient is checked
//! against central finite differences.
//!
//! The blank symbol is the last index `V` of the `V+1`-way frame posterior.

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::par;
use crate::tensor::{self, Tensor};

/// Content label sequence over `[0, vocab)`; the blank index `vocab` is
/// excluded from labels by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSeq {
    symbols: Vec<usize>,
    vocab: usize,
}

impl LabelSeq {
    pub fn new(symbols: Vec<usize>, vocab: usize) -> Result<LabelSeq> {
        if symbols.is_empty() {
            return Err(Error::Config("label sequence must be non-empty".into()));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| s >= vocab) {
            return Err(Error::Config(format!(
                "label {bad} outside content alphabet [0, {vocab})"
            )));
        }
        Ok(LabelSeq { symbols, vocab })
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Minimum number of frames able to emit this sequence: one per label
    /// plus a separating blank between adjacent repeats.
    pub fn min_frames(&self) -> usize {
        let repeats = self
            .symbols
            .windows(2)
            .filter(|w| w[0] == w[1])
            .count();
        self.symbols.len() + repeats
    }
}

/// Per-frame log-probability rows over `V+1` classes (content plus blank).
#[derive(Clone, Debug)]
pub struct FramePosteriors {
    log_probs: Tensor,
}

impl FramePosteriors {
    /// Validates that every row exponentiates and sums to 1 within 1e-9.
    pub fn new(log_probs: Tensor) -> Result<FramePosteriors> {
        if log_probs.rank() != 2 {
            return Err(Error::InvalidTensor(format!(
                "frame posteriors must be rank 2, got {:?}",
                log_probs.shape()
            )));
        }
        for t in 0..log_probs.rows() {
            let sum: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTensor(format!(
                    "frame {t} posterior sums to {sum}, expected 1"
                )));
            }
        }
        Ok(FramePosteriors { log_probs })
    }

    /// Skips row-normalization validation. The recursion itself is defined
    /// for arbitrary log-weights; finite-difference probes perturb single
    /// entries and need this.
    pub fn new_unchecked(log_probs: Tensor) -> FramePosteriors {
        FramePosteriors { log_probs }
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.cols()
    }
}

fn check_feasible(frames: usize, labels: &LabelSeq) -> Result<()> {
    let min_frames = labels.min_frames();
    if frames < min_frames {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            min_frames,
        });
    }
    Ok(())
}

/// CTC negative log-likelihood and its gradient with respect to the frame
/// log-probabilities, via the log-space forward-backward recursion.
pub fn ctc_loss(posteriors: &FramePosteriors, labels: &LabelSeq) -> Result<(f64, Tensor)> {
    let y = posteriors.log_probs();
    let frames = y.rows();
    let classes = y.cols();
    let blank = labels.blank();
    if blank >= classes {
        return Err(Error::Config(format!(
            "vocab {} needs {} posterior classes, got {classes}",
            labels.vocab(),
            labels.vocab() + 1
        )));
    }
    check_feasible(frames, labels)?;

    // Blank-augmented state sequence: blank, l1, blank, l2, …, blank.
    let m = 2 * labels.len() + 1;
    let state_label = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels.symbols()[s / 2]
        }
    };
    let skip_allowed = |s: usize| -> bool {
        s >= 2 && s % 2 == 1 && state_label(s) != state_label(s - 2)
    };

    const NEG_INF: f64 = f64::NEG_INFINITY;
    // α_t(s): log-probability of all prefixes ending in state s at frame t,
    // including the emission at frame t.
    let mut alpha = vec![NEG_INF; frames * m];
    alpha[0] = y.at2(0, blank);
    if m > 1 {
        alpha[1] = y.at2(0, state_label(1));
    }
    for t in 1..frames {
        for s in 0..m {
            let mut acc = alpha[(t - 1) * m + s];
            if s >= 1 {
                acc = tensor::log_add(acc, alpha[(t - 1) * m + s - 1]);
            }
            if skip_allowed(s) {
                acc = tensor::log_add(acc, alpha[(t - 1) * m + s - 2]);
            }
            alpha[t * m + s] = acc + y.at2(t, state_label(s));
        }
    }
    let mut log_p = alpha[(frames - 1) * m + m - 1];
    if m > 1 {
        log_p = tensor::log_add(log_p, alpha[(frames - 1) * m + m - 2]);
    }
    if log_p == f64::NEG_INFINITY {
        return Err(Error::NumericalCollapse(
            "alignment lattice has zero total probability".into(),
        ));
    }

    // β_t(s): log-probability of all suffixes from state s at frame t,
    // excluding the emission at frame t, so α+β covers each path once.
    let mut beta = vec![NEG_INF; frames * m];
    beta[(frames - 1) * m + m - 1] = 0.0;
    if m > 1 {
        beta[(frames - 1) * m + m - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..m {
            let mut acc = beta[(t + 1) * m + s] + y.at2(t + 1, state_label(s));
            if s + 1 < m {
                acc = tensor::log_add(
                    acc,
                    beta[(t + 1) * m + s + 1] + y.at2(t + 1, state_label(s + 1)),
                );
            }
            if s + 2 < m && skip_allowed(s + 2) {
                acc = tensor::log_add(
                    acc,
                    beta[(t + 1) * m + s + 2] + y.at2(t + 1, state_label(s + 2)),
                );
            }
            beta[t * m + s] = acc;
        }
    }

    // ∂(−log P)/∂y_t(k) = −exp(γ_t(k) − log P) with γ the log-sum of α+β
    // over lattice states labeled k.
    let mut grad = Tensor::zeros(y.shape());
    for t in 0..frames {
        let mut gamma = vec![NEG_INF; classes];
        for s in 0..m {
            let k = state_label(s);
            gamma[k] = tensor::log_add(gamma[k], alpha[t * m + s] + beta[t * m + s]);
        }
        let row = &mut grad.data_mut()[t * classes..(t + 1) * classes];
        for (g, &lg) in row.iter_mut().zip(&gamma) {
            if lg != NEG_INF {
                *g = -(lg - log_p).exp();
            }
        }
    }

    Ok((-log_p, grad))
}

const ENUMERATION_BUDGET: u128 = 10_000_000;

/// Enumeration oracle: sums the probability of every length-T path over the
/// `V+1` symbols whose collapse (merge repeats, then drop blanks) equals the
/// label sequence. Exponential in T; intended for verification only.
pub fn ctc_bruteforce(posteriors: &FramePosteriors, labels: &LabelSeq) -> Result<f64> {
    let y = posteriors.log_probs();
    let frames = y.rows();
    let classes = y.cols() as u128;
    check_feasible(frames, labels)?;
    let paths = classes.checked_pow(frames as u32).ok_or(Error::EnumerationBudget {
        paths: u128::MAX,
        budget: ENUMERATION_BUDGET,
    })?;
    if paths > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            paths,
            budget: ENUMERATION_BUDGET,
        });
    }

    let blank = labels.blank();
    let classes = classes as usize;
    let total = paths as usize;
    let chunk = 1 << 14;
    let starts: Vec<usize> = (0..total).step_by(chunk).collect();
    // Matching paths are collected per chunk in path-index order, so the
    // final reduction is deterministic regardless of thread count.
    let per_chunk: Vec<Vec<f64>> = par::map_ordered(&starts, |&start| {
        let mut matches = Vec::new();
        let mut digits = vec![0usize; frames];
        let mut idx = start;
        for t in (0..frames).rev() {
            digits[t] = idx % classes;
            idx /= classes;
        }
        for path_idx in start..(start + chunk).min(total) {
            if path_idx != start {
                // increment base-(V+1) counter, least-significant digit last
                for t in (0..frames).rev() {
                    digits[t] += 1;
                    if digits[t] < classes {
                        break;
                    }
                    digits[t] = 0;
                }
            }
            if collapses_to(&digits, blank, labels.symbols()) {
                let lp: f64 = digits
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| y.at2(t, k))
                    .sum();
                matches.push(lp);
            }
        }
        matches
    });
    let all: Vec<f64> = per_chunk.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::NumericalCollapse(
            "no path collapses to the label sequence".into(),
        ));
    }
    Ok(-tensor::log_sum_exp(&all))
}

fn collapses_to(path: &[usize], blank: usize, labels: &[usize]) -> bool {
    let mut li = 0;
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev {
            if p != blank {
                if li >= labels.len() || labels[li] != p {
                    return false;
                }
                li += 1;
            }
            prev = p;
        }
    }
    li == labels.len()
}

/// Best-path decoding: per-frame argmax, collapse consecutive repeats, drop
/// blanks. The blank is the last class.
pub fn greedy_decode(posteriors: &FramePosteriors) -> Vec<usize> {
    let y = posteriors.log_probs();
    let blank = y.cols() - 1;
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..y.rows() {
        let row = y.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Levenshtein distance divided by reference length.
pub fn label_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let distance = levenshtein(hyp, reference);
    Ok(distance as f64 / reference.len() as f64)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
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

/// Attaches a CTC loss node to a graph. The gradient with respect to the
/// frame log-probabilities is the analytic posterior-based formula, cached
/// at forward time.
pub fn ctc_node(graph: &mut Graph, log_probs: NodeId, labels: &LabelSeq) -> Result<NodeId> {
    let posteriors = FramePosteriors::new(graph.value(log_probs).clone())?;
    let (loss, grad) = ctc_loss(&posteriors, labels)?;
    Ok(graph.custom(
        vec![log_probs],
        Tensor::scalar(loss),
        CustomOp {
            tag: "ctc",
            non_derivative: false,
            backward: Box::new(move |upstream, _inputs, _out| {
                vec![tensor::scale(&grad, upstream.scalar_value())]
            }),
        },
    ))
}
