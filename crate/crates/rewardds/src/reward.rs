//! Preference-pair construction and DP training of the reward proxy.
//!
//! For each private record the untouched backbone W0 supplies the rejected
//! response while the DP-trained generation proxy and the gold response
//! supply chosen responses. The pairwise loss is
//! `-log sigmoid(f(Q, A_c) - f(Q, A_r))`, computed in softplus form so
//! large negative margins cannot overflow.

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Text, BOS, SEP};
use crate::dptrain::{self, DpConfig, DpError, DpObjective, PrivacyBudget, StepRecord};
use crate::exec;
use crate::rng::derive_seed;
use crate::tinylm::{
    reward_pair_grad_loss_flat, sample_with_stops, GenOptions, LmParams, RewardParams, TinylmError,
};

/// Where the chosen response of a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChosenSource {
    GenProxy,
    Gold,
}

/// One ranking example. The rejected response is always a W0 sample taken
/// at pair-construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub query: Text,
    pub chosen: Text,
    pub rejected: Text,
    pub chosen_source: ChosenSource,
}

/// Which chosen-response variants to emit per private record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPolicy {
    /// Both (A_gen vs A_0) and (A_gold vs A_0); two pairs per record.
    Both,
    GenOnly,
    GoldOnly,
    /// One pair per record, the chosen side picked by a derived coin flip.
    Random,
}

/// Numerically stable Bradley-Terry loss: softplus of the negated margin.
pub fn bt_loss(f_c: f64, f_r: f64) -> f64 {
    let x = -(f_c - f_r); // softplus argument
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sample a response for `query` using the `BOS query SEP` prompt frame.
/// Responses are single-segment: a stray SEP ends them like EOS does. An
/// empty sample is retried once on a salted seed; if still empty the
/// EOS-only text stands in so downstream consumers always see a response.
pub fn sample_response(
    params: &LmParams,
    query: &Text,
    opts: &GenOptions,
) -> Result<Text, TinylmError> {
    let mut prompt = Text::new(vec![BOS]);
    prompt = prompt.concat(query);
    prompt.push(SEP);
    let stops = [crate::data::EOS, SEP];
    let first = sample_with_stops(params, &prompt, opts, &stops)?;
    if !first.is_empty() {
        return Ok(first);
    }
    let retry_opts = opts.with_seed(derive_seed(opts.stream_seed, "empty_retry", 0));
    let second = sample_with_stops(params, &prompt, &retry_opts, &stops)?;
    if !second.is_empty() {
        return Ok(second);
    }
    Ok(Text::new(vec![crate::data::EOS]))
}

/// Build preference pairs from the private corpus: per record, sample A_0
/// from W0 and A_gen from the generation proxy, then emit pairs according
/// to `policy` (record order preserved; gen before gold under `Both`).
pub fn build_preference_pairs(
    private: &Corpus,
    w0: &LmParams,
    wgen: &LmParams,
    opts: &GenOptions,
    policy: PairPolicy,
) -> Result<Vec<PreferencePair>, TinylmError> {
    let per_record = exec::map_indexed(private.len(), |i| -> Result<_, TinylmError> {
        let record = &private.records[i];
        let seed_a0 = derive_seed(opts.stream_seed, "pair_a0", i as u64);
        let seed_gen = derive_seed(opts.stream_seed, "pair_agen", i as u64);
        let a0 = sample_response(w0, &record.query, &opts.with_seed(seed_a0))?;
        let a_gen = sample_response(wgen, &record.query, &opts.with_seed(seed_gen))?;
        Ok((record, a0, a_gen))
    });
    let mut pairs = Vec::new();
    for (i, item) in per_record.into_iter().enumerate() {
        let (record, a0, a_gen) = item?;
        let gen_pair = PreferencePair {
            query: record.query.clone(),
            chosen: a_gen.clone(),
            rejected: a0.clone(),
            chosen_source: ChosenSource::GenProxy,
        };
        let gold_pair = PreferencePair {
            query: record.query.clone(),
            chosen: record.response.clone(),
            rejected: a0.clone(),
            chosen_source: ChosenSource::Gold,
        };
        match policy {
            PairPolicy::Both => {
                pairs.push(gen_pair);
                pairs.push(gold_pair);
            }
            PairPolicy::GenOnly => pairs.push(gen_pair),
            PairPolicy::GoldOnly => pairs.push(gold_pair),
            PairPolicy::Random => {
                let coin = derive_seed(opts.stream_seed, "pair_coin", i as u64) & 1;
                pairs.push(if coin == 0 { gen_pair } else { gold_pair });
            }
        }
    }
    Ok(pairs)
}

/// JSON Lines export with keys "query", "chosen", "rejected",
/// "chosen_source". Specials render as visible markers.
pub fn pairs_jsonl(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let obj = serde_json::json!({
            "query": p.query.render(),
            "chosen": p.chosen.render(),
            "rejected": p.rejected.render(),
            "chosen_source": match p.chosen_source {
                ChosenSource::GenProxy => "gen_proxy",
                ChosenSource::Gold => "gold",
            },
        });
        out.push_str(&obj.to_string());
        out.push('\n');
    }
    out
}

/// DP objective over preference pairs: one pair is the clipping unit.
pub struct BtPairObjective {
    cfg: crate::tinylm::ModelConfig,
    pairs: Vec<PreferencePair>,
}

impl BtPairObjective {
    pub fn new(cfg: crate::tinylm::ModelConfig, pairs: Vec<PreferencePair>) -> BtPairObjective {
        BtPairObjective { cfg, pairs }
    }
}

impl DpObjective for BtPairObjective {
    fn num_examples(&self) -> usize {
        self.pairs.len()
    }

    fn example_grad_loss(&self, theta: &[f64], index: usize) -> Result<(Vec<f64>, f64), DpError> {
        let p = &self.pairs[index];
        Ok(reward_pair_grad_loss_flat(
            &self.cfg, theta, &p.query, &p.chosen, &p.rejected,
        ))
    }
}

/// DP-train the reward proxy on preference pairs; delegates to the DP-SGD
/// loop with the pair as the per-example unit.
pub fn train_reward_dp(
    pairs: Vec<PreferencePair>,
    init: RewardParams,
    cfg: &DpConfig,
    delta: f64,
) -> Result<(RewardParams, PrivacyBudget, Vec<StepRecord>), DpError> {
    let embed_len = init.embed_len();
    let model_cfg = init.cfg.clone();
    let objective = BtPairObjective::new(model_cfg.clone(), pairs);
    let outcome = dptrain::train_dp(init.theta().to_vec(), &objective, cfg, delta, embed_len)?;
    let params = RewardParams::from_theta(model_cfg, outcome.theta)
        .expect("trainer preserves parameter count");
    Ok((params, outcome.spent, outcome.history))
}
