//! Replays the fuzz corpus, plus random mutations of it, on stable so the
//! fuzz properties are exercised by `cargo test`.

use std::path::PathBuf;

use dod_core::io::{Checkpoint, RunConfig};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {}", dir.display());
    out
}

fn checkpoint_property(data: &[u8]) -> bool {
    match Checkpoint::decode(data) {
        Ok(ck) => {
            let bytes = ck.encode();
            let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
            assert_eq!(again.encode(), bytes);
            true
        }
        Err(_) => false,
    }
}

fn config_property(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(cfg) = RunConfig::from_toml(text) else { return false };
    let _ = cfg.validate();
    let back = RunConfig::from_toml(&cfg.to_toml()).expect("resolved config parses");
    assert_eq!(back.to_toml(), cfg.to_toml());
    true
}

#[test]
fn checkpoint_seeds_decode_as_labelled() {
    for (name, bytes) in corpus("checkpoint_decode") {
        let bad = name.starts_with("bad_") || name.starts_with("truncated");
        assert_eq!(checkpoint_property(&bytes), !bad, "{name}");
    }
}

#[test]
fn config_seeds_parse_as_labelled() {
    for (name, bytes) in corpus("config_parse") {
        assert_eq!(config_property(&bytes), name != "unknown_key.toml", "{name}");
    }
}

fn mutate(seed: &[u8], edits: &[(usize, u8)], cut: usize) -> Vec<u8> {
    let mut b = seed.to_vec();
    for &(i, v) in edits {
        if !b.is_empty() {
            let n = b.len();
            b[i % n] = v;
        }
    }
    b.truncate(b.len().saturating_sub(cut % 4));
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mutated_checkpoints_never_panic(
        pick in 0usize..16,
        edits in prop::collection::vec((any::<usize>(), any::<u8>()), 0..6),
        cut in any::<usize>(),
    ) {
        let seeds = corpus("checkpoint_decode");
        let (_, seed) = &seeds[pick % seeds.len()];
        checkpoint_property(&mutate(seed, &edits, cut));
    }

    #[test]
    fn mutated_configs_never_panic(
        pick in 0usize..16,
        edits in prop::collection::vec((any::<usize>(), 0x20u8..0x7f), 0..4),
    ) {
        let seeds = corpus("config_parse");
        let (_, seed) = &seeds[pick % seeds.len()];
        config_property(&mutate(seed, &edits, 0));
    }
}
