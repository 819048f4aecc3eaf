mod common;

use common::*;

const CASES: u32 = 10_000;

#[test]
fn merge_laws() {
    for (name, r) in all_merge_laws(CASES) {
        assert!(r.is_ok(), "{name}: {r:?}");
    }
}

#[test]
fn orset_single_element_histories_match_oracle() {
    let n = exhaustive_orset(3, 1, 6).unwrap();
    assert_eq!(n, 12u64.pow(6));
}

#[test]
fn orset_two_element_histories_match_oracle() {
    let n = exhaustive_orset(3, 2, 5).unwrap();
    assert_eq!(n, 18u64.pow(5));
}

#[test]
fn remove_before_add_arrives_keeps_element() {
    // Removing on one replica before the add arrives must not hide it.
    let ops = [
        SetOp::Add(0, 0),
        SetOp::Remove(1, 0),
        SetOp::Sync(1, 0),
    ];
    orset_matches_oracle(&ops, 3).unwrap();
}
