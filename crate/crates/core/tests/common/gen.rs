//! Proptest strategies for valid random traces.

#![allow(dead_code)]

use contamscope::trace::{
    Decoding, FinishReason, GenerationSample, ItemRecord, ItemTrace, Label, TokenEvidence,
};
use proptest::prelude::*;

fn logprob() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(0.0),
        Just(-0.0),
        Just(-5e-324),
        Just(-1e-300),
        -60.0..0.0f64,
        (-1e6..-1.0f64),
    ]
}

fn token_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,4}",
        " [a-zA-Z0-9]{0,3}",
        "[\"\\\\\n\t{}:,]{1,2}",
        "[é漢字🙂]{1,2}",
        Just(String::new()),
    ]
}

fn evidence() -> impl Strategy<Value = TokenEvidence> {
    (
        token_text(),
        logprob(),
        proptest::option::of((-30.0..0.0f64, 0.0..10.0f64)),
    )
        .prop_map(|(t, lp, stats)| {
            let e = TokenEvidence::new(t, lp);
            match stats {
                Some((mu, sigma)) => e.with_position_stats(mu, sigma),
                None => e,
            }
        })
}

fn sample(decoding: Decoding, temperature: f64) -> impl Strategy<Value = GenerationSample> {
    (
        proptest::collection::vec(evidence(), 0..12),
        proptest::option::of(any::<u64>()),
        proptest::option::of(prop_oneof![
            Just(FinishReason::Stop),
            Just(FinishReason::Length)
        ]),
    )
        .prop_map(move |(tokens, seed, finish_reason)| GenerationSample {
            sample_index: 0,
            text: tokens.iter().map(|t| t.token_text.as_str()).collect(),
            decoding,
            temperature: (decoding == Decoding::Temperature).then_some(temperature),
            seed: if decoding == Decoding::Temperature {
                seed
            } else {
                None
            },
            tokens,
            finish_reason,
        })
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1e3..1e3f64, dim)
}

pub fn trace() -> impl Strategy<Value = ItemTrace> {
    (
        "[a-z0-9_-]{1,12}",
        "[ -~]{1,30}",
        "[ -~é]{1,30}",
        any::<bool>(),
        proptest::option::of("[a-z]{1,6}"),
        0.05..2.0f64,
        0usize..6,
        any::<u64>(),
    )
        .prop_flat_map(
            |(id, prompt, reference, contaminated, tag, temperature, n, salt)| {
                let item = ItemRecord {
                    item_id: id,
                    prompt,
                    reference_answer: reference,
                    label: if contaminated {
                        Label::Contaminated
                    } else {
                        Label::Clean
                    },
                    domain_tag: tag,
                };
                (
                    Just(item),
                    proptest::collection::vec(sample(Decoding::Temperature, temperature), n),
                    proptest::option::of(sample(Decoding::Greedy, 0.0)),
                    proptest::option::of(proptest::collection::vec(evidence(), 0..10)),
                    1usize..6,
                    Just(salt),
                )
            },
        )
        .prop_flat_map(|(item, samples, greedy, reference, dim, salt)| {
            let n = samples.len();
            (
                Just((item, samples, greedy, reference)),
                proptest::option::of(vector(dim)),
                proptest::option::of(vector(dim)),
                proptest::option::of(proptest::collection::vec(vector(dim), n)),
                Just(salt),
            )
        })
        .prop_map(
            |((item, mut samples, greedy, reference), ge, re, se, salt)| {
                // shuffle sample indices deterministically so order on disk is not index order
                let n = samples.len();
                for (k, s) in samples.iter_mut().enumerate() {
                    s.sample_index = if n == 0 {
                        0
                    } else {
                        (k + salt as usize % n) % n
                    };
                }
                let mut t = ItemTrace::new(item, samples);
                t.greedy = greedy;
                t.reference_scored = reference;
                t.greedy_embedding = ge;
                t.reference_embedding = re;
                t.sample_embeddings = se;
                t
            },
        )
}
