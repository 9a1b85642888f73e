//! Invariants over random inputs, 100 cases each.

mod common;

use common::props;

const CASES: u32 = 100;

#[test]
fn attention_rows_sum_to_one() {
    props::attention_rows_sum_to_one(CASES).unwrap();
}

#[test]
fn frozen_blocks_stay_bitwise_fixed() {
    props::frozen_blocks_stay_bitwise_fixed(CASES).unwrap();
}

#[test]
fn shards_partition_the_corpus() {
    props::shards_partition_the_corpus(CASES).unwrap();
}

#[test]
fn top_k_ignores_positive_scale() {
    props::top_k_ignores_positive_scale(CASES).unwrap();
}

#[test]
fn thread_count_does_not_change_the_model() {
    props::thread_count_does_not_change_the_model(CASES).unwrap();
}
