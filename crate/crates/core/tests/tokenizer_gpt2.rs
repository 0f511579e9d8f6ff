//! GPT-2 byte-level BPE against recorded reference ids and against tiktoken's
//! r50k_base encoder.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seampatch::tokenizer::{locate_boundary_token, BpeTokenizer, Tokenizer};
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn gpt2() -> BpeTokenizer {
    BpeTokenizer::from_files(fixture("gpt2_vocab.json"), fixture("gpt2_merges.txt"), None).unwrap()
}

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

#[test]
fn recorded_ids_match() {
    let tok = gpt2();
    let cases: Vec<Case> = serde_json::from_str(
        &std::fs::read_to_string(fixture("gpt2_token_fixtures.json")).unwrap(),
    )
    .unwrap();
    assert!(cases.len() >= 10);
    for c in cases {
        assert_eq!(tok.encode(&c.text).unwrap().ids, c.ids, "{:?}", c.text);
        assert_eq!(tok.decode(&c.ids).unwrap(), c.text);
    }
}

#[test]
fn paragraph_break_boundary() {
    let tok = gpt2();
    let seq = tok.encode("A\n\nB").unwrap();
    assert_eq!(seq.ids, [32, 198, 198, 33]);
    assert_eq!(locate_boundary_token(&tok, &seq).unwrap(), 2);

    let seq = tok.encode("aaa\n\n bbb").unwrap();
    assert_eq!(locate_boundary_token(&tok, &seq).unwrap(), 1);

    assert_eq!(tok.bos_id(), 50256);
    assert_eq!(tok.encode("\n\n").unwrap().ids, [628]);
}

const POOL: &[&str] = &[
    "a",
    "e",
    "t",
    "Z",
    "q",
    "0",
    "7",
    "42",
    " ",
    " ",
    "  ",
    "\n",
    "\n\n",
    "\t",
    "\r\n",
    ".",
    ",",
    "!",
    "?",
    "'s",
    "'ll",
    "'re",
    "'",
    "\"",
    "-",
    "_",
    "(",
    ")",
    "é",
    "ß",
    "ñ",
    "中",
    "文",
    "日本",
    "ж",
    "λ",
    "🙂",
    "👍🏽",
    "\u{301}",
    "\u{200d}",
    "\u{a0}",
    "the",
    " the",
    "ing",
    "Hello",
    "paragraph",
    "\u{10ffff}",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..24);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.15) {
                // arbitrary scalar value
                loop {
                    if let Some(c) = char::from_u32(rng.gen_range(0..0x11_0000)) {
                        break c.to_string();
                    }
                }
            } else {
                POOL[rng.gen_range(0..POOL.len())].to_string()
            }
        })
        .collect()
}

#[test]
fn random_strings_round_trip_and_match_tiktoken() {
    let tok = gpt2();
    let reference = tiktoken_rs::r50k_base().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let text = random_text(&mut rng);
        let ids = tok.encode(&text).unwrap().ids;
        assert_eq!(tok.decode(&ids).unwrap(), text, "round trip #{i} {text:?}");
        let want: Vec<u32> = reference.encode_ordinary(&text).into_iter().collect();
        assert_eq!(ids, want, "#{i} {text:?}");
    }
}
