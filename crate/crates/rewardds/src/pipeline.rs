//! The synthesis loop: candidate generation, reward-guided filtering,
//! self-optimizing refinement, target fine-tuning, and the baseline modes.
//!
//! Training frames: private records train the generation proxy as
//! `BOS -> query SEP response EOS` (one example per record, so the record
//! stays the DP unit and the proxy learns to synthesize queries as well as
//! responses); task models train and answer as
//! `BOS query SEP -> response EOS`. Feedback uses SEP as its marker token:
//! `phi = SEP A_c SEP A_r (proxy continuation)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Record, Text, Token, BOS, EOS, SEP};
use crate::dptrain::{self, DpConfig, DpError, DpObjective, PrivacyBudget, StepRecord};
use crate::evalkit;
use crate::exec;
use crate::reward::sample_response;
use crate::rng::{derive_seed, Stream};
use crate::tinylm::{
    lm_grad_loss_flat, reward_score, sample, sample_with_stops, GenOptions, LmParams, ModelConfig,
    RewardParams, TinylmError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
    #[error("threshold eliminated all samples: tau = {tau}, max s_c = {max_score}")]
    ThresholdEliminatedAll { tau: f64, max_score: f64 },
    #[error("similarity filter at threshold {threshold} eliminated all synthetic queries")]
    FilterEliminatedAll { threshold: f64 },
    #[error("train set is empty")]
    EmptyTrainSet,
    #[error("fine-tuning diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("mode {mode} requires {artifact}")]
    MissingArtifact {
        mode: &'static str,
        artifact: &'static str,
    },
    #[error(transparent)]
    Model(#[from] TinylmError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

// ---------------------------------------------------------------------------
// Frames and training glue
// ---------------------------------------------------------------------------

/// Generation-proxy frame: the whole record is the continuation, so the
/// model learns the query distribution and the response mapping from one
/// example per private record.
pub fn frame_full(record: &Record) -> (Vec<Token>, Vec<Token>) {
    let mut targets = record.query.tokens().to_vec();
    targets.push(SEP);
    targets.extend_from_slice(record.response.tokens());
    targets.push(EOS);
    (vec![BOS], targets)
}

/// Task frame: answer the query.
pub fn frame_qa(query: &Text, response: &Text) -> (Vec<Token>, Vec<Token>) {
    let mut prompt = vec![BOS];
    prompt.extend_from_slice(query.tokens());
    prompt.push(SEP);
    let mut targets = response.tokens().to_vec();
    targets.push(EOS);
    (prompt, targets)
}

/// Prompt used when asking a task model to answer a query.
pub fn qa_prompt(query: &Text) -> Text {
    let mut prompt = vec![BOS];
    prompt.extend_from_slice(query.tokens());
    prompt.push(SEP);
    Text::new(prompt)
}

/// Next-token NLL objective over pre-framed (prompt, targets) examples.
pub struct LmNllObjective {
    cfg: ModelConfig,
    examples: Vec<(Vec<Token>, Vec<Token>)>,
}

impl LmNllObjective {
    pub fn new(cfg: ModelConfig, examples: Vec<(Vec<Token>, Vec<Token>)>) -> LmNllObjective {
        LmNllObjective { cfg, examples }
    }
}

impl DpObjective for LmNllObjective {
    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn example_grad_loss(&self, theta: &[f64], index: usize) -> Result<(Vec<f64>, f64), DpError> {
        let (prompt, targets) = &self.examples[index];
        lm_grad_loss_flat(&self.cfg, theta, prompt, targets).map_err(|e| DpError::Objective {
            index,
            message: e.to_string(),
        })
    }
}

/// DP-train a language model on full-record frames.
pub fn train_lm_dp(
    init: &LmParams,
    corpus: &Corpus,
    cfg: &DpConfig,
    delta: f64,
) -> Result<(LmParams, PrivacyBudget, Vec<StepRecord>), PipelineError> {
    let examples: Vec<_> = corpus.records.iter().map(frame_full).collect();
    let objective = LmNllObjective::new(init.cfg.clone(), examples);
    let outcome = dptrain::train_dp(
        init.theta().to_vec(),
        &objective,
        cfg,
        delta,
        init.embed_len(),
    )?;
    let mut params = init.clone();
    params.set_theta(outcome.theta);
    Ok((params, outcome.spent, outcome.history))
}

/// Plain (non-DP) mini-batch SGD on next-token NLL. Returns the new
/// snapshot and per-step mean losses.
pub fn sgd_finetune(
    init: &LmParams,
    examples: &[(Vec<Token>, Vec<Token>)],
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(LmParams, Vec<f64>), PipelineError> {
    if examples.is_empty() {
        return Err(PipelineError::EmptyTrainSet);
    }
    assert!(batch_size > 0 && learning_rate > 0.0);
    let cfg = init.cfg.clone();
    let mut theta = init.theta().to_vec();
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        Stream::derived(seed, "sgd_shuffle", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let theta_ref = &theta;
            let results = exec::map_indexed(chunk.len(), |i| {
                let (prompt, targets) = &examples[chunk[i]];
                lm_grad_loss_flat(&cfg, theta_ref, prompt, targets)
            });
            let mut mean_grad = vec![0.0; theta.len()];
            let mut loss_sum = 0.0;
            for r in results {
                let (g, l) = r?;
                loss_sum += l;
                for (m, gi) in mean_grad.iter_mut().zip(&g) {
                    *m += gi;
                }
            }
            let b = chunk.len() as f64;
            let mean_loss = loss_sum / b;
            if !mean_loss.is_finite() {
                return Err(PipelineError::Diverged { step });
            }
            for (t, g) in theta.iter_mut().zip(&mean_grad) {
                *t -= learning_rate * g / b;
            }
            losses.push(mean_loss);
            step += 1;
        }
    }
    let mut out = init.clone();
    out.set_theta(theta);
    Ok((out, losses))
}

// ---------------------------------------------------------------------------
// Pool types
// ---------------------------------------------------------------------------

/// One synthetic query with its scored candidate set. At epoch 0 the
/// candidate list has length N; under retention, refinement appends the
/// previous best as an extra candidate before re-selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub query: Text,
    pub candidates: Vec<(Text, f64)>,
    pub chosen: Text,
    pub rejected: Text,
    pub best_score: f64,
    pub feedback: Option<Text>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPool {
    pub samples: Vec<SynthSample>,
    pub epoch: usize,
}

impl SynthPool {
    pub fn mean_best_score(&self) -> f64 {
        self.samples.iter().map(|s| s.best_score).sum::<f64>() / self.samples.len() as f64
    }

    /// Pool snapshot as JSON Lines for audit.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (index, s) in self.samples.iter().enumerate() {
            let obj = serde_json::json!({
                "epoch": self.epoch,
                "index": index,
                "query": s.query.render(),
                "chosen": s.chosen.render(),
                "rejected": s.rejected.render(),
                "best_score": s.best_score,
                "candidate_scores": s.candidates.iter().map(|c| c.1).collect::<Vec<_>>(),
                "feedback": s.feedback.as_ref().map(|f| f.render()),
            });
            out.push_str(&obj.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainEntry {
    pub query: Text,
    pub response: Text,
    /// s_c of the source sample (0 for modes without reward scoring).
    pub source_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub entries: Vec<TrainEntry>,
    pub tau: Option<f64>,
}

impl TrainSet {
    fn framed(&self) -> Vec<(Vec<Token>, Vec<Token>)> {
        self.entries
            .iter()
            .map(|e| frame_qa(&e.query, &e.response))
            .collect()
    }
}

/// Argmax and argmin over candidate scores, ties to the lowest index.
fn select_best_worst(candidates: &[(Text, f64)]) -> (usize, usize) {
    let mut best = 0usize;
    let mut worst = 0usize;
    for (i, c) in candidates.iter().enumerate() {
        assert!(c.1.is_finite(), "candidate reward must be finite");
        if c.1 > candidates[best].1 {
            best = i;
        }
        if c.1 < candidates[worst].1 {
            worst = i;
        }
    }
    (best, worst)
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    RewardDs,
    DpGeneration,
    DpInstruct,
    KnowledgeSg,
    LocallyFinetune,
    Vanilla,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::RewardDs => "reward_ds",
            Mode::DpGeneration => "dp_generation",
            Mode::DpInstruct => "dp_instruct",
            Mode::KnowledgeSg => "knowledge_sg",
            Mode::LocallyFinetune => "locally_finetune",
            Mode::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Number of synthetic queries (L).
    pub synth_count: usize,
    /// Candidate responses per query (N).
    pub candidates: usize,
    /// Partition fold (k >= 2); the top floor(L/k) samples survive filtering.
    pub fold: usize,
    /// Refinement epochs (T).
    pub epochs: usize,
    pub gen_opts: GenOptions,
    pub refine_opts: GenOptions,
    /// Proxy-continuation budget appended to the structural feedback.
    pub feedback_max_len: usize,
    /// Inject the previous best as an extra candidate during refinement,
    /// making per-query s_c non-decreasing.
    pub retain_previous_best: bool,
    /// Self-optimizing refinement on/off (off = filter-only ablation).
    pub refinement: bool,
    /// Replicate the initial filtered fold back to volume L (the loop's
    /// standard behavior). Off reproduces the select-top-fraction
    /// baseline, which trains on the retained samples as-is.
    pub replicate_initial: bool,
    /// Re-replicate later-epoch train sets to restore volume. The loop
    /// replicates only the initial train set; this stays off by default.
    pub replicate_later_epochs: bool,
    pub mode: Mode,
    /// dp_instruct only: keep synthetic queries whose max ROUGE-L F1
    /// against private queries reaches this threshold.
    pub sim_threshold: f64,
    /// Target fine-tuning (desk-scale analogues of the server settings).
    pub target_learning_rate: f64,
    pub target_batch_size: usize,
    pub target_inner_epochs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth_count: 480,
            candidates: 3,
            fold: 6,
            epochs: 3,
            gen_opts: GenOptions::default(),
            refine_opts: GenOptions::default(),
            feedback_max_len: 8,
            retain_previous_best: true,
            refinement: true,
            replicate_initial: true,
            replicate_later_epochs: false,
            mode: Mode::RewardDs,
            sim_threshold: 0.2,
            target_learning_rate: 0.5,
            target_batch_size: 16,
            target_inner_epochs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.candidates < 1 {
            return Err(PipelineError::BadConfig("candidates (N) must be >= 1".into()));
        }
        if self.fold < 2 {
            return Err(PipelineError::BadConfig("fold (k) must be >= 2".into()));
        }
        if self.fold > self.synth_count {
            return Err(PipelineError::BadConfig(format!(
                "fold (k = {}) must not exceed synth_count (L = {})",
                self.fold, self.synth_count
            )));
        }
        if self.synth_count < 1 {
            return Err(PipelineError::BadConfig("synth_count (L) must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sim_threshold) {
            return Err(PipelineError::BadConfig(
                "sim_threshold must be in [0, 1]".into(),
            ));
        }
        if self.target_learning_rate <= 0.0 || self.target_batch_size == 0 {
            return Err(PipelineError::BadConfig(
                "target fine-tune settings must be positive".into(),
            ));
        }
        self.gen_opts.validate()?;
        self.refine_opts.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Algorithm operations
// ---------------------------------------------------------------------------

/// Sample L synthetic queries from the generation proxy, conditioned on
/// the BOS control token and cut at the SEP boundary the training frame
/// establishes. Deterministic per (opts.stream_seed, index).
pub fn synth_queries(
    wgen: &LmParams,
    count: usize,
    opts: &GenOptions,
) -> Result<Vec<Text>, PipelineError> {
    let queries = exec::map_indexed(count, |i| -> Result<Text, TinylmError> {
        let seed = derive_seed(opts.stream_seed, "synth_query", i as u64);
        let prompt = Text::new(vec![BOS]);
        let q = sample_with_stops(wgen, &prompt, &opts.with_seed(seed), &[SEP, EOS])?;
        if !q.is_empty() {
            return Ok(q);
        }
        let retry = derive_seed(seed, "empty_retry", 0);
        let q2 = sample_with_stops(wgen, &prompt, &opts.with_seed(retry), &[SEP, EOS])?;
        if !q2.is_empty() {
            return Ok(q2);
        }
        Ok(Text::new(vec![EOS]))
    });
    queries
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::from)
}

/// Build D_0: N candidates per query from the generation proxy, scored by
/// the reward proxy, best/worst selected with ties to the lowest index.
pub fn build_initial_pool(
    wgen: &LmParams,
    wrwd: &RewardParams,
    queries: &[Text],
    candidates: usize,
    opts: &GenOptions,
) -> Result<SynthPool, PipelineError> {
    assert!(candidates >= 1);
    let samples = exec::map_indexed(queries.len(), |i| -> Result<SynthSample, TinylmError> {
        let query = &queries[i];
        let mut cands = Vec::with_capacity(candidates);
        for j in 0..candidates {
            let seed = derive_seed(opts.stream_seed, "pool_cand", (i * candidates + j) as u64);
            let response = sample_response(wgen, query, &opts.with_seed(seed))?;
            let score = reward_score(wrwd, query, &response);
            cands.push((response, score));
        }
        let (best, worst) = select_best_worst(&cands);
        Ok(SynthSample {
            query: query.clone(),
            chosen: cands[best].0.clone(),
            rejected: cands[worst].0.clone(),
            best_score: cands[best].1,
            candidates: cands,
            feedback: None,
        })
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(SynthPool { samples, epoch: 0 })
}

/// Reward Guided Filtering: stable-sort by s_c descending (ties keep the
/// original order), keep the top floor(L/k), and fix tau as the fold's
/// minimum score.
pub fn filter_topfold(pool: &SynthPool, fold: usize) -> (Vec<SynthSample>, f64) {
    let len = pool.samples.len();
    assert!((2..=len).contains(&fold), "need 2 <= k <= L");
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        pool.samples[b]
            .best_score
            .partial_cmp(&pool.samples[a].best_score)
            .expect("finite scores")
    });
    let keep = len / fold;
    let d_high: Vec<SynthSample> = order[..keep]
        .iter()
        .map(|&i| pool.samples[i].clone())
        .collect();
    let tau = d_high
        .iter()
        .map(|s| s.best_score)
        .fold(f64::INFINITY, f64::min);
    (d_high, tau)
}

/// Replicate the retained fold to restore the train-set volume:
/// ceil(L / |D_high|) full copies, concatenated in order.
pub fn replicate(d_high: &[SynthSample], total: usize, tau: f64) -> TrainSet {
    assert!(!d_high.is_empty());
    let copies = total.div_ceil(d_high.len());
    let mut entries = Vec::with_capacity(copies * d_high.len());
    for _ in 0..copies {
        for s in d_high {
            entries.push(TrainEntry {
                query: s.query.clone(),
                response: s.chosen.clone(),
                source_score: s.best_score,
            });
        }
    }
    TrainSet {
        entries,
        tau: Some(tau),
    }
}

/// Feedback phi = SEP A_c SEP A_r followed by a bounded proxy
/// continuation of the `query SEP A_c SEP A_r` context. The leading SEP is
/// the feedback marker; with feedback_max_len = 0 phi is exactly the
/// structural encoding of (A_c, A_r).
pub fn make_feedback(
    wgen: &LmParams,
    sample_in: &SynthSample,
    opts: &GenOptions,
    feedback_max_len: usize,
) -> Result<Text, PipelineError> {
    let mut phi = vec![SEP];
    phi.extend_from_slice(sample_in.chosen.tokens());
    phi.push(SEP);
    phi.extend_from_slice(sample_in.rejected.tokens());

    if feedback_max_len > 0 {
        let mut ctx = vec![BOS];
        ctx.extend_from_slice(sample_in.query.tokens());
        ctx.extend_from_slice(&phi);
        let ctx_len = ctx.len();
        let continuation = sample(
            wgen,
            &Text::new(ctx),
            &GenOptions {
                max_len: ctx_len + feedback_max_len,
                ..opts.clone()
            },
        )?;
        phi.extend_from_slice(continuation.tokens());
    }
    Ok(Text::new(phi))
}

/// One refinement epoch: per sample, generate feedback, re-sample N
/// candidates from the target conditioned on the query and phi, rescore,
/// and re-select. The conditioning is encoded as `phi BOS query SEP` so
/// the fixed-window target keeps the query (its answering frame) in view
/// with the feedback in the preceding context. Under retention the
/// previous best joins as an extra candidate, so s_c never decreases. The
/// new train set keeps entries with s_c >= tau, without replication.
#[allow(clippy::too_many_arguments)]
pub fn refine_epoch(
    pool: &SynthPool,
    wtarget: &LmParams,
    wrwd: &RewardParams,
    wgen: &LmParams,
    cfg: &PipelineConfig,
    tau: f64,
    epoch: usize,
    master_seed: u64,
) -> Result<(SynthPool, TrainSet), PipelineError> {
    let n = cfg.candidates;
    let l = pool.samples.len();
    let samples = exec::map_indexed(l, |i| -> Result<SynthSample, PipelineError> {
        let prev = &pool.samples[i];
        let fb_seed = derive_seed(master_seed, "feedback", (epoch * l + i) as u64);
        let phi = make_feedback(
            wgen,
            prev,
            &cfg.refine_opts.with_seed(fb_seed),
            cfg.feedback_max_len,
        )?;

        let mut prompt = phi.tokens().to_vec();
        prompt.push(BOS);
        prompt.extend_from_slice(prev.query.tokens());
        prompt.push(SEP);
        let prompt = Text::new(prompt);

        let mut cands = Vec::with_capacity(n + 1);
        for j in 0..n {
            let seed = derive_seed(master_seed, "refine_cand", ((epoch * l + i) * n + j) as u64);
            let refine_opts = GenOptions {
                max_len: prompt.len() + cfg.refine_opts.max_len,
                ..cfg.refine_opts.with_seed(seed)
            };
            let stops = [EOS, SEP];
            let mut cand = sample_with_stops(wtarget, &prompt, &refine_opts, &stops)?;
            if cand.is_empty() {
                let retry = refine_opts.with_seed(derive_seed(seed, "empty_retry", 0));
                cand = sample_with_stops(wtarget, &prompt, &retry, &stops)?;
            }
            if cand.is_empty() {
                cand = Text::new(vec![EOS]);
            }
            let score = reward_score(wrwd, &prev.query, &cand);
            cands.push((cand, score));
        }
        if cfg.retain_previous_best {
            let score = reward_score(wrwd, &prev.query, &prev.chosen);
            cands.push((prev.chosen.clone(), score));
        }
        let (best, worst) = select_best_worst(&cands);
        Ok(SynthSample {
            query: prev.query.clone(),
            chosen: cands[best].0.clone(),
            rejected: cands[worst].0.clone(),
            best_score: cands[best].1,
            candidates: cands,
            feedback: Some(phi),
        })
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    let pool_out = SynthPool {
        samples,
        epoch: epoch + 1,
    };

    let retained: Vec<&SynthSample> = pool_out
        .samples
        .iter()
        .filter(|s| s.best_score >= tau)
        .collect();
    if retained.is_empty() {
        let max_score = pool_out
            .samples
            .iter()
            .map(|s| s.best_score)
            .fold(f64::NEG_INFINITY, f64::max);
        return Err(PipelineError::ThresholdEliminatedAll { tau, max_score });
    }
    let trainset = if cfg.replicate_later_epochs {
        let owned: Vec<SynthSample> = retained.into_iter().cloned().collect();
        replicate(&owned, cfg.synth_count, tau)
    } else {
        TrainSet {
            entries: retained
                .into_iter()
                .map(|s| TrainEntry {
                    query: s.query.clone(),
                    response: s.chosen.clone(),
                    source_score: s.best_score,
                })
                .collect(),
            tau: Some(tau),
        }
    };
    Ok((pool_out, trainset))
}

/// Fine-tune the target on (query -> chosen) with plain mini-batch SGD.
pub fn finetune_target(
    wtarget: &LmParams,
    trainset: &TrainSet,
    learning_rate: f64,
    inner_epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<LmParams, PipelineError> {
    if trainset.entries.is_empty() {
        return Err(PipelineError::EmptyTrainSet);
    }
    let (params, _) = sgd_finetune(
        wtarget,
        &trainset.framed(),
        learning_rate,
        inner_epochs,
        batch_size,
        seed,
    )?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Mode orchestration
// ---------------------------------------------------------------------------

/// Which model answers queries after a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServingRole {
    Target,
    GenProxy,
}

pub struct ModeInputs<'a> {
    pub w0: &'a LmParams,
    pub wgen: Option<&'a LmParams>,
    pub wrwd: Option<&'a RewardParams>,
    pub wtarget: &'a LmParams,
    pub private: &'a Corpus,
    pub cfg: &'a PipelineConfig,
    pub master_seed: u64,
}

#[derive(Debug)]
pub struct ModeOutcome {
    pub serving: LmParams,
    pub serving_role: ServingRole,
    /// Pool snapshots D_0..D_T (reward_ds only).
    pub pools: Vec<SynthPool>,
    /// Mean s_c of each pool snapshot.
    pub epoch_mean_reward: Vec<f64>,
    /// Mean s_c and size of each retained train set T_0..T_T.
    pub epoch_retained_mean_reward: Vec<f64>,
    pub epoch_retained_size: Vec<usize>,
    pub tau: Option<f64>,
    /// Unique source samples in the initial train set (filtering modes).
    pub initial_unique: Option<usize>,
    pub train_steps: usize,
}

fn require<'a, T>(
    artifact: Option<&'a T>,
    mode: &'static str,
    name: &'static str,
) -> Result<&'a T, PipelineError> {
    artifact.ok_or(PipelineError::MissingArtifact {
        mode,
        artifact: name,
    })
}

fn simple_outcome(serving: LmParams, role: ServingRole, steps: usize) -> ModeOutcome {
    ModeOutcome {
        serving,
        serving_role: role,
        pools: Vec::new(),
        epoch_mean_reward: Vec::new(),
        epoch_retained_mean_reward: Vec::new(),
        epoch_retained_size: Vec::new(),
        tau: None,
        initial_unique: None,
        train_steps: steps,
    }
}

fn trainset_of_pairs(pairs: Vec<(Text, Text)>) -> TrainSet {
    TrainSet {
        entries: pairs
            .into_iter()
            .map(|(query, response)| TrainEntry {
                query,
                response,
                source_score: 0.0,
            })
            .collect(),
        tau: None,
    }
}

/// Sample one response per query with seeds keyed by the original query
/// index, so filtered variants stay comparable with unfiltered ones.
fn responses_for(
    model: &LmParams,
    queries: &[(usize, &Text)],
    opts: &GenOptions,
    label: &str,
    master_seed: u64,
) -> Result<Vec<(Text, Text)>, PipelineError> {
    let out = exec::map_indexed(queries.len(), |i| -> Result<(Text, Text), TinylmError> {
        let (orig_index, query) = queries[i];
        let seed = derive_seed(master_seed, label, orig_index as u64);
        let response = sample_response(model, query, &opts.with_seed(seed))?;
        Ok(((*query).clone(), response))
    });
    out.into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::from)
}

/// Execute one mode end to end, producing the serving model and the
/// per-epoch statistics the run report carries.
pub fn run_mode(inputs: &ModeInputs<'_>) -> Result<ModeOutcome, PipelineError> {
    let cfg = inputs.cfg;
    cfg.validate()?;
    let master = inputs.master_seed;
    let gen_opts = cfg.gen_opts.with_seed(derive_seed(master, "synthesis", 0));

    match cfg.mode {
        Mode::Vanilla => Ok(simple_outcome(
            inputs.wtarget.clone(),
            ServingRole::Target,
            0,
        )),

        Mode::LocallyFinetune => {
            let examples: Vec<_> = inputs
                .private
                .records
                .iter()
                .map(|r| frame_qa(&r.query, &r.response))
                .collect();
            let epochs = cfg.epochs * cfg.target_inner_epochs;
            let (local, losses) = sgd_finetune(
                inputs.w0,
                &examples,
                cfg.target_learning_rate,
                epochs,
                cfg.target_batch_size,
                derive_seed(master, "local_ft", 0),
            )?;
            Ok(simple_outcome(local, ServingRole::GenProxy, losses.len()))
        }

        Mode::DpGeneration => {
            let wgen = require(inputs.wgen, "dp_generation", "a generation proxy checkpoint")?;
            let queries = synth_queries(wgen, cfg.synth_count, &gen_opts)?;
            let indexed: Vec<(usize, &Text)> = queries.iter().enumerate().collect();
            let pairs = responses_for(wgen, &indexed, &gen_opts, "direct_resp", master)?;
            let trainset = trainset_of_pairs(pairs);
            let epochs = cfg.epochs * cfg.target_inner_epochs;
            let (target, losses) = sgd_finetune(
                inputs.wtarget,
                &trainset.framed(),
                cfg.target_learning_rate,
                epochs,
                cfg.target_batch_size,
                derive_seed(master, "target_ft", 0),
            )?;
            let mut outcome = simple_outcome(target, ServingRole::Target, losses.len());
            outcome.initial_unique = Some(trainset.entries.len());
            Ok(outcome)
        }

        Mode::DpInstruct => {
            let wgen = require(inputs.wgen, "dp_instruct", "a generation proxy checkpoint")?;
            let queries = synth_queries(wgen, cfg.synth_count, &gen_opts)?;
            let private_queries: Vec<&Text> =
                inputs.private.records.iter().map(|r| &r.query).collect();
            let kept: Vec<(usize, &Text)> = queries
                .iter()
                .enumerate()
                .filter(|(_, q)| {
                    private_queries.iter().any(|pq| {
                        evalkit::lcs_f1(pq.tokens(), q.tokens()) >= cfg.sim_threshold
                    })
                })
                .collect();
            if kept.is_empty() {
                return Err(PipelineError::FilterEliminatedAll {
                    threshold: cfg.sim_threshold,
                });
            }
            let pairs = responses_for(wgen, &kept, &gen_opts, "direct_resp", master)?;
            let trainset = trainset_of_pairs(pairs);
            let epochs = cfg.epochs * cfg.target_inner_epochs;
            let (target, losses) = sgd_finetune(
                inputs.wtarget,
                &trainset.framed(),
                cfg.target_learning_rate,
                epochs,
                cfg.target_batch_size,
                derive_seed(master, "target_ft", 0),
            )?;
            let mut outcome = simple_outcome(target, ServingRole::Target, losses.len());
            outcome.initial_unique = Some(trainset.entries.len());
            Ok(outcome)
        }

        Mode::KnowledgeSg => {
            let wgen = require(inputs.wgen, "knowledge_sg", "a generation proxy checkpoint")?;
            let queries = synth_queries(wgen, cfg.synth_count, &gen_opts)?;
            let indexed: Vec<(usize, &Text)> = queries.iter().enumerate().collect();
            // The untuned server model answers the synthetic instructions;
            // its responses distill back into the proxy, which then serves.
            let pairs = responses_for(inputs.wtarget, &indexed, &gen_opts, "ksg_resp", master)?;
            let trainset = trainset_of_pairs(pairs);
            let epochs = cfg.epochs * cfg.target_inner_epochs;
            let (distilled, losses) = sgd_finetune(
                wgen,
                &trainset.framed(),
                cfg.target_learning_rate,
                epochs,
                cfg.target_batch_size,
                derive_seed(master, "distill_ft", 0),
            )?;
            Ok(simple_outcome(distilled, ServingRole::GenProxy, losses.len()))
        }

        Mode::RewardDs => {
            let wgen = require(inputs.wgen, "reward_ds", "a generation proxy checkpoint")?;
            let wrwd = require(inputs.wrwd, "reward_ds", "a reward proxy checkpoint")?;
            let queries = synth_queries(wgen, cfg.synth_count, &gen_opts)?;
            let pool0 = build_initial_pool(wgen, wrwd, &queries, cfg.candidates, &gen_opts)?;
            let (d_high, tau) = filter_topfold(&pool0, cfg.fold);
            let t0 = if cfg.replicate_initial {
                replicate(&d_high, cfg.synth_count, tau)
            } else {
                TrainSet {
                    entries: d_high
                        .iter()
                        .map(|s| TrainEntry {
                            query: s.query.clone(),
                            response: s.chosen.clone(),
                            source_score: s.best_score,
                        })
                        .collect(),
                    tau: Some(tau),
                }
            };

            let mut pools = vec![pool0];
            let mut epoch_mean_reward = vec![pools[0].mean_best_score()];
            let mut retained_mean = vec![mean_entry_score(&t0)];
            let mut retained_size = vec![t0.entries.len()];
            let mut trainset = t0;
            let mut target = inputs.wtarget.clone();
            let mut steps = 0usize;

            for t in 1..=cfg.epochs {
                target = finetune_target(
                    &target,
                    &trainset,
                    cfg.target_learning_rate,
                    cfg.target_inner_epochs,
                    cfg.target_batch_size,
                    derive_seed(master, "target_ft", t as u64),
                )?;
                steps += trainset.entries.len().div_ceil(cfg.target_batch_size)
                    * cfg.target_inner_epochs;

                if cfg.refinement {
                    let prev_pool = pools.last().expect("at least D_0");
                    let (pool_t, t_t) =
                        refine_epoch(prev_pool, &target, wrwd, wgen, cfg, tau, t - 1, master)?;
                    epoch_mean_reward.push(pool_t.mean_best_score());
                    retained_mean.push(mean_entry_score(&t_t));
                    retained_size.push(t_t.entries.len());
                    pools.push(pool_t);
                    trainset = t_t;
                }
            }

            Ok(ModeOutcome {
                serving: target,
                serving_role: ServingRole::Target,
                initial_unique: Some(d_high.len()),
                epoch_mean_reward,
                epoch_retained_mean_reward: retained_mean,
                epoch_retained_size: retained_size,
                tau: Some(tau),
                pools,
                train_steps: steps,
            })
        }
    }
}

fn mean_entry_score(t: &TrainSet) -> f64 {
    t.entries.iter().map(|e| e.source_score).sum::<f64>() / t.entries.len() as f64
}
