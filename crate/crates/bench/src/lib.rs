//! Synthetic inputs shared by the benchmarks.

use precog_core::tokenizer::{SpecialTokens, Vocabulary};

const WORDS: [&str; 16] = [
    "the", "a", "cat", "dog", "sat", "on", "mat", "river", "house", "old", "new", "saw", "liked",
    "and", "with", "plan",
];

pub fn vocabulary() -> Vocabulary {
    let mut text = String::from("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n.\n,\n");
    for w in WORDS {
        text.push_str(w);
        text.push('\n');
    }
    for piece in ["##s", "##ed", "##ing", "un", "##aff", "##able"] {
        text.push_str(piece);
        text.push('\n');
    }
    Vocabulary::parse(&text, SpecialTokens::default(), false).expect("static vocabulary is valid")
}

/// Deterministic pseudo-sentences of `len` words each.
pub fn sentences(n: usize, len: usize) -> Vec<String> {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    (0..n)
        .map(|_| {
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    WORDS[(state % WORDS.len() as u64) as usize]
                })
                .collect();
            words.join(" ")
        })
        .collect()
}
