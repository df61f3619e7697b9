//! Domain metrics and the empirical privacy-attack harness.
//!
//! ROUGE uses balanced F1 (beta = 1) over token sequences, so scores are
//! internally comparable but not comparable to external ROUGE toolkits.
//! The membership-inference attack reports the best F1 over a full
//! threshold sweep (strongest-attacker convention).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Record, Text, Token, BOS, SEP};
use crate::exec;
use crate::rng::{derive_seed, Stream};
use crate::tinylm::{
    reward_score, sample_with_stops, seq_logprob, GenOptions, LmParams, RewardParams, TinylmError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference must be non-empty")]
    EmptyReference,
    #[error("pass@k requires k <= n (k = {k}, n = {n})")]
    KExceedsN { k: usize, n: usize },
    #[error("pass@k requires c <= n (c = {c}, n = {n})")]
    CExceedsN { c: usize, n: usize },
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("F1 needs at least one positive label")]
    NoPositiveLabels,
    #[error("target {index} query has {len} tokens, not longer than prefix_len {prefix_len}")]
    QueryTooShort {
        index: usize,
        len: usize,
        prefix_len: usize,
    },
    #[error(transparent)]
    Model(#[from] TinylmError),
}

// ---------------------------------------------------------------------------
// ROUGE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    R1,
    RL,
}

fn lcs_len(a: &[Token], b: &[Token]) -> usize {
    // Classic DP over prefixes, two rolling rows.
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ta in a {
        for (j, &tb) in b.iter().enumerate() {
            cur[j + 1] = if ta == tb {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn clipped_unigram_overlap(a: &[Token], b: &[Token]) -> usize {
    let mut counts = std::collections::HashMap::new();
    for t in a {
        *counts.entry(*t).or_insert(0usize) += 1;
    }
    let mut overlap = 0usize;
    for t in b {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

fn prf(overlap: usize, reference_len: usize, hypothesis_len: usize) -> RougeScore {
    let precision = if hypothesis_len == 0 {
        0.0
    } else {
        overlap as f64 / hypothesis_len as f64
    };
    let recall = overlap as f64 / reference_len as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore {
        precision,
        recall,
        f1,
    }
}

/// ROUGE-1 (clipped unigram overlap) or ROUGE-L (longest common
/// subsequence) over token sequences. Precision normalizes by hypothesis
/// length, recall by reference length; F1 is the balanced harmonic mean.
pub fn rouge(
    variant: RougeVariant,
    reference: &[Token],
    hypothesis: &[Token],
) -> Result<RougeScore, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let overlap = match variant {
        RougeVariant::R1 => clipped_unigram_overlap(reference, hypothesis),
        RougeVariant::RL => lcs_len(reference, hypothesis),
    };
    Ok(prf(overlap, reference.len(), hypothesis.len()))
}

/// ROUGE-L F1 with the empty-vs-empty case defined as 1 (identical) and
/// empty-vs-nonempty as 0; used by deduplication.
pub(crate) fn lcs_f1(a: &[Token], b: &[Token]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    prf(lcs_len(a, b), a.len(), b.len()).f1
}

// ---------------------------------------------------------------------------
// Perplexity and pass@k
// ---------------------------------------------------------------------------

/// exp(-seq_logprob / |continuation|); the uniform model scores exactly V.
pub fn perplexity(
    scorer: &LmParams,
    prompt: &Text,
    continuation: &Text,
) -> Result<f64, EvalError> {
    let lp = seq_logprob(scorer, continuation, prompt)?;
    Ok((-lp / continuation.len() as f64).exp())
}

/// Unbiased pass@k estimator 1 - C(n-c, k)/C(n, k), multiplicative form.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if c > n {
        return Err(EvalError::CExceedsN { c, n });
    }
    if k > n || k == 0 {
        return Err(EvalError::KExceedsN { k, n });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut prod = 1.0f64;
    for i in 0..k {
        prod *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - prod)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Win,
    Tie,
    Lose,
}

/// Score-margin comparison: differences smaller than `margin` are ties.
pub fn judge_compare(score_ours: f64, score_base: f64, margin: f64) -> Verdict {
    let delta = score_ours - score_base;
    if delta.abs() < margin {
        Verdict::Tie
    } else if delta > 0.0 {
        Verdict::Win
    } else {
        Verdict::Lose
    }
}

// ---------------------------------------------------------------------------
// F1 and attacks
// ---------------------------------------------------------------------------

/// 2PR/(P+R) with the no-positive-prediction case defined as 0.
pub fn f1(predictions: &[bool], labels: &[bool]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if !labels.iter().any(|&l| l) {
        return Err(EvalError::NoPositiveLabels);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub extraction_rouge_l: Option<f64>,
    pub mia_f1: Option<f64>,
    pub mia_threshold: Option<f64>,
    pub n_targets: usize,
    pub seed: u64,
}

/// Two-stage extraction: greedy-complete the query from its first
/// `prefix_len` tokens, then greedy-complete the response from the
/// recovered query plus the response's first `prefix_len` tokens. Scoring
/// compares each completion against the unrevealed remainder (the given
/// prefixes carry no recovered information), ROUGE-L F1 averaged over
/// sides and targets.
pub fn extraction_attack(
    model: &LmParams,
    targets: &[Record],
    prefix_len: usize,
    max_out: usize,
) -> Result<f64, EvalError> {
    for (index, r) in targets.iter().enumerate() {
        if r.query.len() <= prefix_len {
            return Err(EvalError::QueryTooShort {
                index,
                len: r.query.len(),
                prefix_len,
            });
        }
    }
    let scores = exec::map_indexed(targets.len(), |i| -> Result<f64, EvalError> {
        let record = &targets[i];
        // Stage 1: recover the query. The training frame is
        // BOS query SEP response EOS, so SEP marks the query boundary.
        let q_prefix = &record.query.tokens()[..prefix_len];
        let mut prompt = vec![BOS];
        prompt.extend_from_slice(q_prefix);
        let opts = GenOptions {
            greedy: true,
            max_len: prompt.len() + max_out,
            ..GenOptions::default()
        };
        let completion = sample_with_stops(model, &Text::new(prompt), &opts, &[SEP, crate::data::EOS])?;
        let mut recovered_query = q_prefix.to_vec();
        recovered_query.extend_from_slice(completion.tokens());

        // Stage 2: recover the response from the recovered query.
        let r_take = prefix_len.min(record.response.len());
        let r_prefix = &record.response.tokens()[..r_take];
        let mut prompt2 = vec![BOS];
        prompt2.extend_from_slice(&recovered_query);
        prompt2.push(SEP);
        prompt2.extend_from_slice(r_prefix);
        let opts2 = GenOptions {
            greedy: true,
            max_len: prompt2.len() + max_out,
            ..GenOptions::default()
        };
        let completion2 =
            sample_with_stops(model, &Text::new(prompt2), &opts2, &[crate::data::EOS])?;

        let q_rest = &record.query.tokens()[prefix_len..];
        let mut score = rouge(RougeVariant::RL, q_rest, completion.tokens())?.f1;
        let mut sides = 1.0;
        let r_rest = &record.response.tokens()[r_take..];
        if !r_rest.is_empty() {
            score += rouge(RougeVariant::RL, r_rest, completion2.tokens())?.f1;
            sides += 1.0;
        }
        Ok(score / sides)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / targets.len() as f64)
}

/// Max F1 of member identification over all score thresholds (predict
/// member when score >= threshold), plus the threshold attaining it.
/// Candidate thresholds are the midpoints between adjacent distinct scores
/// and one below the minimum (the all-positive predictor).
pub fn best_f1_sweep(member_scores: &[f64], nonmember_scores: &[f64]) -> (f64, f64) {
    assert!(!member_scores.is_empty() && !nonmember_scores.is_empty());
    let mut all: Vec<f64> = member_scores
        .iter()
        .chain(nonmember_scores)
        .copied()
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0];
    for w in all.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    let mut best = (0.0f64, thresholds[0]);
    for &tau in &thresholds {
        let tp = member_scores.iter().filter(|&&s| s >= tau).count();
        let fp = nonmember_scores.iter().filter(|&&s| s >= tau).count();
        let fn_ = member_scores.len() - tp;
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        if precision + recall == 0.0 {
            continue;
        }
        let f = 2.0 * precision * recall / (precision + recall);
        if f > best.0 {
            best = (f, tau);
        }
    }
    best
}

/// How a membership-inference attacker scores a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaScorer {
    /// Reward proxy score of (query, response); higher looks private.
    RewardScore,
    /// Negated full-sequence perplexity under a generation proxy; lower
    /// perplexity looks private.
    NegPpl,
}

pub enum MiaModel<'a> {
    Reward(&'a RewardParams),
    Lm(&'a LmParams),
}

fn mia_score(model: &MiaModel<'_>, record: &Record) -> Result<f64, EvalError> {
    match model {
        MiaModel::Reward(params) => Ok(reward_score(params, &record.query, &record.response)),
        MiaModel::Lm(params) => {
            // Full-sequence perplexity of "query SEP response" from BOS.
            let mut seq = record.query.tokens().to_vec();
            seq.push(SEP);
            seq.extend_from_slice(record.response.tokens());
            let ppl = perplexity(params, &Text::new(vec![BOS]), &Text::new(seq))?;
            Ok(-ppl)
        }
    }
}

pub struct MiaOutcome {
    pub best_f1: f64,
    pub threshold: f64,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
}

/// Score members and nonmembers, sweep all thresholds, and report the
/// strongest attacker's F1.
pub fn mia_attack(
    model: &MiaModel<'_>,
    members: &[Record],
    nonmembers: &[Record],
) -> Result<MiaOutcome, EvalError> {
    assert!(!members.is_empty() && !nonmembers.is_empty());
    let member_scores: Result<Vec<f64>, EvalError> =
        exec::map_indexed(members.len(), |i| mia_score(model, &members[i]))
            .into_iter()
            .collect();
    let nonmember_scores: Result<Vec<f64>, EvalError> =
        exec::map_indexed(nonmembers.len(), |i| mia_score(model, &nonmembers[i]))
            .into_iter()
            .collect();
    let member_scores = member_scores?;
    let nonmember_scores = nonmember_scores?;
    let (best_f1, threshold) = best_f1_sweep(&member_scores, &nonmember_scores);
    Ok(MiaOutcome {
        best_f1,
        threshold,
        member_scores,
        nonmember_scores,
    })
}

/// Token-level augmentation standing in for synonym replacement: replace
/// ceil(strength * len) non-special tokens (resampled to differ) with
/// in-register tokens (`query_alphabet` for query positions,
/// `response_alphabet` for response positions), then delete one token
/// where length permits. Never returns the input unchanged for
/// strength > 0 and combined length >= 2.
pub fn augment(
    record: &Record,
    strength: f64,
    seed: u64,
    query_alphabet: &[Token],
    response_alphabet: &[Token],
) -> Record {
    assert!(strength > 0.0 && strength <= 1.0, "strength must be in (0, 1]");
    assert!(!query_alphabet.is_empty() && !response_alphabet.is_empty());
    let mut stream = Stream::new(derive_seed(seed, "augment", 0));
    let q_len = record.query.len();
    let mut combined: Vec<Token> = record
        .query
        .tokens()
        .iter()
        .chain(record.response.tokens())
        .copied()
        .collect();
    let len = combined.len();
    let n_replace = ((strength * len as f64).ceil() as usize).clamp(1, len);

    let mut positions: Vec<usize> = (0..len).collect();
    stream.shuffle(&mut positions);
    for &pos in positions.iter().take(n_replace) {
        if combined[pos].is_special() {
            continue;
        }
        let alphabet = if pos < q_len {
            query_alphabet
        } else {
            response_alphabet
        };
        let original = combined[pos];
        let replacement = loop {
            let cand = alphabet[stream.index(alphabet.len())];
            if cand != original || alphabet.len() == 1 {
                break cand;
            }
        };
        combined[pos] = replacement;
    }

    // Delete one token, provided its side keeps at least one token.
    let deletable: Vec<usize> = (0..len)
        .filter(|&p| if p < q_len { q_len >= 2 } else { len - q_len >= 2 })
        .collect();
    let mut q_len_after = q_len;
    if !deletable.is_empty() {
        let pos = deletable[stream.index(deletable.len())];
        combined.remove(pos);
        if pos < q_len {
            q_len_after = q_len - 1;
        }
    }

    Record {
        query: Text::new(combined[..q_len_after].to_vec()),
        response: Text::new(combined[q_len_after..].to_vec()),
        id: record.id.clone(),
    }
}
