//! Attack-harness oracles that need trained models: the memorization
//! ceiling for extraction and the random-model floor.

use rewardds::data::{tokenize, Record, VOCAB_SIZE};
use rewardds::evalkit::extraction_attack;
use rewardds::pipeline::{frame_full, sgd_finetune};
use rewardds::tinylm::{LmParams, ModelConfig, Role};

fn records() -> Vec<Record> {
    [
        ("medical query one", "take two and rest"),
        ("financial question", "buy low sell high"),
        ("code gen request!!", "fn main() { }"),
    ]
    .iter()
    .map(|(q, a)| Record::new(tokenize(q).unwrap(), tokenize(a).unwrap()))
    .collect()
}

fn model(seed: u64) -> LmParams {
    LmParams::init(ModelConfig {
        vocab_size: VOCAB_SIZE,
        embed_dim: 16,
        context_len: 16,
        role: Role::Wgen,
        init_seed: seed,
    })
    .unwrap()
}

#[test]
fn extraction_recovers_memorized_records_exactly() {
    let targets = records();
    let examples: Vec<_> = targets.iter().map(frame_full).collect();
    // Overfit hard: plain full-batch descent to near-zero loss.
    let (overfit, losses) = sgd_finetune(&model(3), &examples, 1.0, 1500, 3, 7).unwrap();
    assert!(
        *losses.last().unwrap() < 0.05,
        "failed to memorize, final loss {}",
        losses.last().unwrap()
    );
    let score = extraction_attack(&overfit, &targets, 10, 64).unwrap();
    assert_eq!(score, 1.0, "memorized records must extract exactly");

    // Determinism: greedy extraction is a pure function of model/targets.
    let again = extraction_attack(&overfit, &targets, 10, 64).unwrap();
    assert_eq!(score, again);
}

#[test]
fn extraction_from_untrained_models_stays_near_the_random_floor() {
    let targets = records();
    let mut total = 0.0;
    for seed in 0..10 {
        total += extraction_attack(&model(100 + seed), &targets, 10, 64).unwrap();
    }
    let mean = total / 10.0;
    assert!(mean < 0.2, "random-model extraction {mean} too high");
}
