//! Fine-tuning data mathematics: instruction-tuning NLL, token-averaged
//! log-likelihood, the rank-boundary ranking loss, and the JSONL dataset
//! pipeline. Everything here operates on token log-probabilities supplied as
//! data; this module never tokenizes text or touches model weights.

use crate::netmodel::PhaseId;
use crate::prompting::{parse_decision, PromptText};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("log-probability {0} is positive")]
    PositiveLogProb(f64),
    #[error("record {0} has no token log-probabilities")]
    MissingLogProbs(String),
    #[error("record {0}: response does not parse back to its action")]
    InvalidRecord(String),
    #[error("ranking batch shape: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Per-token log-probabilities log P(y_w | X, Y_<w) of one reasoning text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs<F>(pub Vec<F>);

impl<F: Scalar> TokenLogProbs<F> {
    /// Validated constructor: non-empty, every entry ≤ 0 and finite.
    pub fn new(values: Vec<F>) -> Result<TokenLogProbs<F>, FinetuneError> {
        if values.is_empty() {
            return Err(FinetuneError::EmptySequence);
        }
        for v in &values {
            if !(v.is_finite() && *v <= F::zero()) {
                return Err(FinetuneError::PositiveLogProb(v.to_f64_c()));
            }
        }
        Ok(TokenLogProbs(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Negative log-likelihood of a whole reasoning text: −Σ_w log P(y_w | ·).
pub fn ift_nll<F: Scalar>(tokens: &TokenLogProbs<F>) -> Result<F, FinetuneError> {
    if tokens.is_empty() {
        return Err(FinetuneError::EmptySequence);
    }
    Ok(-tokens.0.iter().fold(F::zero(), |acc, v| acc + *v))
}

/// Token-averaged log-likelihood: (1/|Y|) Σ_w log P(y_w | ·).
pub fn token_avg_loglik<F: Scalar>(tokens: &TokenLogProbs<F>) -> Result<F, FinetuneError> {
    if tokens.is_empty() {
        return Err(FinetuneError::EmptySequence);
    }
    let sum = tokens.0.iter().fold(F::zero(), |acc, v| acc + *v);
    Ok(sum / F::from_f64_c(tokens.len() as f64))
}

/// One group of k trajectories sharing a prompt: `p[i]` is the token-averaged
/// log-likelihood and `q[i]` the critic score of trajectory i. Serialized as
/// one JSON object per line with arrays `p`, `q` and scalar `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingBatch<F> {
    pub p: Vec<F>,
    pub q: Vec<F>,
    pub beta: F,
}

impl<F: Scalar> RankingBatch<F> {
    pub fn new(p: Vec<F>, q: Vec<F>, beta: F) -> Result<RankingBatch<F>, FinetuneError> {
        if p.is_empty() || p.len() != q.len() {
            return Err(FinetuneError::Shape(format!(
                "need k ≥ 1 with matching lengths, got |p|={} |q|={}",
                p.len(),
                q.len()
            )));
        }
        Ok(RankingBatch { p, q, beta })
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }
}

/// Ranking loss over all ordered pairs with strictly greater critic score:
///
/// L = ln(1 + Σ_{q_i > q_j} [ e^{p_j − p_i} + e^{2·p_{j*} − 2β − p_i − p_j} ])
///
/// where p_{j*} is the smallest p among trajectories strictly dominating j.
/// The first term rewards likelihood separation in critic order; the second
/// penalizes separating beyond the margin β. Returns the loss and its
/// analytic gradient w.r.t. every p (at ties in the minimum, the first index
/// is taken, a valid subgradient choice).
pub fn rbc_loss<F: Scalar>(batch: &RankingBatch<F>) -> (F, Vec<F>) {
    let k = batch.k();
    let p = &batch.p;
    let q = &batch.q;
    let two = F::from_f64_c(2.0);
    let mut s = F::zero();
    let mut grad = vec![F::zero(); k];
    for j in 0..k {
        // Trajectories strictly dominating j, and the least likely among them.
        let mut min_idx = None;
        for i in 0..k {
            if q[i] > q[j] && min_idx.is_none_or(|m: usize| p[i] < p[m]) {
                min_idx = Some(i);
            }
        }
        let Some(mstar) = min_idx else { continue };
        for i in 0..k {
            if !(q[i] > q[j]) {
                continue;
            }
            let t1 = (p[j] - p[i]).exp();
            let t2 = (two * p[mstar] - two * batch.beta - p[i] - p[j]).exp();
            s = s + t1 + t2;
            grad[j] = grad[j] + t1 - t2;
            grad[i] = grad[i] - t1 - t2;
            grad[mstar] = grad[mstar] + two * t2;
        }
    }
    let loss = (F::one() + s).ln();
    let scale = (F::one() + s).recip();
    for g in grad.iter_mut() {
        *g = *g * scale;
    }
    (loss, grad)
}

/// One reasoning trajectory taken during an episode: the prompt X, the
/// reasoning text Y, the parsed action a, the featurized observation o_t, and
/// which backend produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub t: u64,
    pub prompt: PromptText,
    pub reasoning: String,
    pub action: PhaseId,
    pub features: Vec<f64>,
    pub source: String,
}

impl ReasoningRecord {
    /// The invariant every record must satisfy: the reasoning text parses
    /// back to the recorded action.
    pub fn is_consistent(&self) -> bool {
        parse_decision(&self.reasoning).phase == Some(self.action)
    }

    /// Stable identifier for error messages and grouping diagnostics.
    pub fn ident(&self) -> String {
        format!("{}@t{}", self.prompt.intersection, self.t)
    }
}

/// Groups records by identical prompt text (first-appearance order) and
/// builds a ranking batch per group. `logprobs` supplies each trajectory's
/// token data; `score` is the critic's q for the recorded (o_t, a).
pub fn build_ranking_batches<F: Scalar>(
    records: &[ReasoningRecord],
    logprobs: impl Fn(usize, &ReasoningRecord) -> Option<TokenLogProbs<F>>,
    score: impl Fn(&ReasoningRecord) -> F,
    beta: F,
) -> Result<Vec<RankingBatch<F>>, FinetuneError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<usize>> = std::collections::HashMap::new();
    for (idx, record) in records.iter().enumerate() {
        let key = crate::llmclient::prompt_hash(&record.prompt.text);
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(idx);
    }
    let mut batches = Vec::with_capacity(order.len());
    for key in order {
        let members = &groups[&key];
        let mut p = Vec::with_capacity(members.len());
        let mut q = Vec::with_capacity(members.len());
        for &idx in members {
            let record = &records[idx];
            let tokens = logprobs(idx, record).ok_or_else(|| FinetuneError::MissingLogProbs(record.ident()))?;
            p.push(token_avg_loglik(&tokens)?);
            q.push(score(record));
        }
        batches.push(RankingBatch::new(p, q, beta)?);
    }
    Ok(batches)
}

/// Wire format of one instruction-tuning example.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct IftExample {
    instruction: String,
    response: String,
    meta: IftMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IftMeta {
    t: u64,
    source: String,
    o_t: Vec<f64>,
    intersection: String,
}

/// Writes records as line-delimited JSON `{instruction, response, meta}`.
/// Every response is re-validated to end in a tag parsing back to its action
/// before anything is written. Returns the number of examples written.
pub fn export_ift_dataset<W: Write>(records: &[ReasoningRecord], mut sink: W) -> Result<usize, FinetuneError> {
    for record in records {
        if !record.is_consistent() {
            return Err(FinetuneError::InvalidRecord(record.ident()));
        }
    }
    for record in records {
        let example = IftExample {
            instruction: record.prompt.text.clone(),
            response: record.reasoning.clone(),
            meta: IftMeta {
                t: record.t,
                source: record.source.clone(),
                o_t: record.features.clone(),
                intersection: record.prompt.intersection.clone(),
            },
        };
        let line = serde_json::to_string(&example)?;
        writeln!(sink, "{line}")?;
    }
    Ok(records.len())
}

/// Reads a dataset written by [`export_ift_dataset`], re-deriving each action
/// from the response text.
pub fn import_ift_dataset<R: std::io::Read>(reader: R) -> Result<Vec<ReasoningRecord>, FinetuneError> {
    let mut records = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: IftExample = serde_json::from_str(&line)?;
        let parsed = parse_decision(&example.response);
        let Some(action) = parsed.phase else {
            return Err(FinetuneError::InvalidRecord(format!(
                "{}@t{}",
                example.meta.intersection, example.meta.t
            )));
        };
        records.push(ReasoningRecord {
            t: example.meta.t,
            prompt: PromptText {
                intersection: example.meta.intersection,
                t: example.meta.t,
                text: example.instruction,
            },
            reasoning: example.response,
            action,
            features: example.meta.o_t,
            source: example.meta.source,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp(values: &[f64]) -> TokenLogProbs<f64> {
        TokenLogProbs::new(values.to_vec()).unwrap()
    }

    #[test]
    fn nll_negates_the_sum() {
        assert_eq!(ift_nll(&lp(&[-1.0, -2.0, -3.0])).unwrap(), 6.0);
        assert_eq!(ift_nll(&lp(&[0.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(ift_nll::<f64>(&TokenLogProbs(vec![])), Err(FinetuneError::EmptySequence)));
    }

    #[test]
    fn avg_loglik_is_the_mean() {
        assert_eq!(token_avg_loglik(&lp(&[-2.0, -4.0])).unwrap(), -3.0);
        assert_eq!(token_avg_loglik(&lp(&[-0.5])).unwrap(), -0.5);
    }

    #[test]
    fn nll_equals_negative_length_times_avg() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let values: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0..5.0)).collect();
            let tokens = lp(&values);
            let nll = ift_nll(&tokens).unwrap();
            let avg = token_avg_loglik(&tokens).unwrap();
            assert!((nll - (-(n as f64) * avg)).abs() < 1e-9);
        }
    }

    #[test]
    fn token_logprobs_validation() {
        assert!(TokenLogProbs::new(vec![0.1]).is_err());
        assert!(TokenLogProbs::new(vec![f64::NAN]).is_err());
        assert!(TokenLogProbs::<f64>::new(vec![]).is_err());
        assert!(TokenLogProbs::new(vec![0.0, -3.0]).is_ok());
    }

    #[test]
    fn rbc_single_trajectory_is_zero() {
        let batch = RankingBatch::new(vec![-1.0], vec![3.0], 1.0).unwrap();
        let (loss, grad) = rbc_loss(&batch);
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0]);
    }

    #[test]
    fn rbc_all_tied_scores_is_zero() {
        let batch = RankingBatch::new(vec![-1.0, -2.0, -0.5], vec![2.0, 2.0, 2.0], 1.0).unwrap();
        let (loss, grad) = rbc_loss(&batch);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rbc_two_equal_p_zero_beta_is_ln_three() {
        let batch = RankingBatch::new(vec![-1.5, -1.5], vec![5.0, 1.0], 0.0).unwrap();
        let (loss, _) = rbc_loss(&batch);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn rbc_is_nonnegative_and_positive_with_any_strict_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = rng.gen_range(2..=4);
            let p: Vec<f64> = (0..k).map(|_| -rng.gen_range(0.0..4.0)).collect();
            let q: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..10.0)).collect();
            let (loss, _) = rbc_loss(&RankingBatch::new(p, q, 1.0).unwrap());
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn rbc_depends_only_on_score_order() {
        let p = vec![-0.4, -2.0, -1.1, -3.3];
        let q = vec![4.0, 1.0, 2.5, 0.0];
        let base = rbc_loss(&RankingBatch::new(p.clone(), q.clone(), 1.0).unwrap());
        for shift in [-100.0, -1.0, 0.5, 42.0] {
            let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
            let moved = rbc_loss(&RankingBatch::new(p.clone(), shifted, 1.0).unwrap());
            assert_eq!(base.0.to_bits(), moved.0.to_bits());
            assert_eq!(base.1, moved.1);
        }
    }

    fn fd_gradient(batch: &RankingBatch<f64>, h: f64) -> Vec<f64> {
        (0..batch.k())
            .map(|i| {
                let mut plus = batch.clone();
                plus.p[i] += h;
                let mut minus = batch.clone();
                minus.p[i] -= h;
                (rbc_loss(&plus).0 - rbc_loss(&minus).0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn rbc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..100 {
            let k = rng.gen_range(2..=4);
            let p: Vec<f64> = (0..k).map(|_| -rng.gen_range(0.0..4.0)).collect();
            let q: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..10.0)).collect();
            let beta = rng.gen_range(0.0..2.0);
            let batch = RankingBatch::new(p, q, beta).unwrap();
            let (_, grad) = rbc_loss(&batch);
            let numeric = fd_gradient(&batch, 1e-6);
            for i in 0..k {
                let denom = numeric[i].abs().max(1e-8);
                let rel = (grad[i] - numeric[i]).abs() / denom;
                assert!(rel <= 1e-5, "case {case} comp {i}: analytic {} vs fd {}", grad[i], numeric[i]);
            }
        }
    }

    /// With two trajectories still inside the β margin, raising the
    /// likelihood of the better-scored one lowers the loss. (Beyond the
    /// margin the boundary term dominates by design and pushes back; that
    /// regime is exercised in `rbc_boundary_term_pushes_back`.)
    #[test]
    fn rbc_top_gradient_is_negative_within_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let beta = rng.gen_range(0.5..2.0);
            let p_low = -rng.gen_range(0.0..4.0);
            let p_top = p_low + rng.gen_range(0.0..beta);
            let batch = RankingBatch::new(vec![p_top, p_low], vec![1.0, 0.0], beta).unwrap();
            let (_, grad) = rbc_loss(&batch);
            assert!(grad[0] <= 0.0, "grad {grad:?} p_top {p_top} p_low {p_low} beta {beta}");
            let numeric = fd_gradient(&batch, 1e-6);
            assert!((grad[0] - numeric[0]).abs() <= 1e-6);
        }
    }

    /// Once the top trajectory's likelihood exceeds the runner-up by more
    /// than β, the boundary term flips the gradient sign: the loss resists
    /// unbounded separation rather than rewarding it.
    #[test]
    fn rbc_boundary_term_pushes_back() {
        let beta = 1.0;
        let batch = RankingBatch::new(vec![-0.1, -3.0], vec![1.0, 0.0], beta).unwrap();
        // Separation 2.9 > β = 1.
        let (_, grad) = rbc_loss(&batch);
        assert!(grad[0] > 0.0, "expected positive gradient, got {grad:?}");
    }

    /// When the best-scored trajectory is also the least likely, every term
    /// pulls its likelihood up, for any k up to the default group size.
    #[test]
    fn rbc_top_gradient_is_negative_when_top_is_least_likely() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..100 {
            let k = rng.gen_range(2..=4);
            let mut p: Vec<f64> = (0..k).map(|_| -rng.gen_range(0.0..3.0)).collect();
            let mut q: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..10.0)).collect();
            let top = (0..k).max_by(|a, b| q[*a].partial_cmp(&q[*b]).unwrap()).unwrap();
            q[top] = 11.0;
            let min_p = p.iter().cloned().fold(f64::INFINITY, f64::min);
            p[top] = min_p - rng.gen_range(0.01..1.0);
            let batch = RankingBatch::new(p, q, 1.0).unwrap();
            let (_, grad) = rbc_loss(&batch);
            assert!(grad[top] < 0.0, "grad {grad:?} top {top}");
        }
    }

    #[test]
    fn rbc_generic_over_scalar_width() {
        let batch = RankingBatch::new(vec![-1.5f32, -1.5], vec![5.0, 1.0], 0.0).unwrap();
        let (loss, grad) = rbc_loss(&batch);
        assert!((loss - 3.0f32.ln()).abs() < 1e-6);
        assert_eq!(grad.len(), 2);
    }

    fn record(text: &str, t: u64, action: PhaseId) -> ReasoningRecord {
        ReasoningRecord {
            t,
            prompt: PromptText {
                intersection: "intersection_1_1".into(),
                t,
                text: text.into(),
            },
            reasoning: format!("Step 1: queues considered.\nStep 2: <signal>{action}</signal>"),
            action,
            features: vec![1.0, 0.0, 2.0, 0.5],
            source: "stub-greedy".into(),
        }
    }

    #[test]
    fn batches_group_by_prompt_text() {
        let records = vec![
            record("prompt A", 30, PhaseId::Etwt),
            record("prompt A", 30, PhaseId::Nlsl),
            record("prompt B", 65, PhaseId::Ntst),
            record("prompt A", 30, PhaseId::Elwl),
            record("prompt A", 30, PhaseId::Etwt),
        ];
        let batches = build_ranking_batches(
            &records,
            |idx, _| Some(TokenLogProbs(vec![-(idx as f64 + 1.0)])),
            |r| r.action.index() as f64,
            1.0,
        )
        .unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].k(), 4);
        assert_eq!(batches[1].k(), 1);
        assert_eq!(batches[0].p, vec![-1.0, -2.0, -4.0, -5.0]);
        assert_eq!(rbc_loss(&batches[1]).0, 0.0);
    }

    #[test]
    fn batches_require_logprobs_for_every_member() {
        let records = vec![record("prompt A", 30, PhaseId::Etwt), record("prompt A", 30, PhaseId::Nlsl)];
        let err = build_ranking_batches(
            &records,
            |idx, _| (idx == 0).then(|| TokenLogProbs(vec![-1.0])),
            |_| 0.0f64,
            1.0,
        );
        assert!(matches!(err, Err(FinetuneError::MissingLogProbs(_))));
    }

    #[test]
    fn ift_export_import_round_trips() {
        let records = vec![record("prompt A", 30, PhaseId::Nlsl), record("prompt B", 65, PhaseId::Etwt)];
        let mut sink = Vec::new();
        let count = export_ift_dataset(&records, &mut sink).unwrap();
        assert_eq!(count, 2);
        let text = String::from_utf8(sink.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["instruction"], "prompt A");
        assert!(first["response"].as_str().unwrap().ends_with("<signal>NLSL</signal>"));
        assert_eq!(first["meta"]["t"], 30);

        let reimported = import_ift_dataset(sink.as_slice()).unwrap();
        assert_eq!(reimported, records);
    }

    #[test]
    fn ift_export_rejects_inconsistent_records() {
        let mut bad = record("prompt A", 30, PhaseId::Nlsl);
        bad.reasoning = "no tag here".into();
        let mut sink = Vec::new();
        let err = export_ift_dataset(&[bad], &mut sink);
        assert!(matches!(err, Err(FinetuneError::InvalidRecord(_))));
        assert!(sink.is_empty(), "nothing may be written on failure");
    }

    #[test]
    fn ift_export_empty_is_empty_file() {
        let mut sink = Vec::new();
        assert_eq!(export_ift_dataset(&[], &mut sink).unwrap(), 0);
        assert!(sink.is_empty());
        assert!(import_ift_dataset(sink.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn ranking_batch_jsonl_round_trips() {
        let batch = RankingBatch::new(vec![-1.0, -2.0], vec![3.0, 1.0], 1.0).unwrap();
        let line = serde_json::to_string(&batch).unwrap();
        assert!(line.contains("\"p\":[") && line.contains("\"beta\":1.0"));
        let back: RankingBatch<f64> = serde_json::from_str(&line).unwrap();
        assert_eq!(back, batch);
    }
}
