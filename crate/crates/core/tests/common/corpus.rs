//! Deterministic synthetic English-like text for training tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: &[&str] = &[
    "the engineer", "a small model", "the old river", "my neighbour", "the committee", "every student",
    "the quiet cat", "a tired farmer", "the new compiler", "our team", "the scheduler", "a curious child",
    "the orchestra", "the baker", "this algorithm", "the north wind",
];
const VERBS: &[&str] = &[
    "reads", "builds", "watches", "measures", "carries", "follows", "paints", "repairs", "remembers",
    "writes", "questions", "balances", "collects", "describes", "ignores", "finds",
];
const OBJECTS: &[&str] = &[
    "the long letter", "a wooden bridge", "every token", "the morning train", "a bright lantern",
    "the last chapter", "two green apples", "the broken clock", "a heavy parcel", "the evening news",
    "the market square", "a silver key", "the spring garden", "the budget report", "a paper boat",
];
const TAILS: &[&str] = &[
    "before dinner", "in the rain", "with great care", "after the meeting", "without a word",
    "near the harbour", "every single day", "under the bridge", "for the first time", "at midnight",
    "on a sunday", "in silence",
];
const JOINERS: &[&str] = &["and then", "because", "while", "although", "so"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn clause(rng: &mut ChaCha8Rng) -> String {
    let mut s = format!("{} {} {}", pick(rng, SUBJECTS), pick(rng, VERBS), pick(rng, OBJECTS));
    if rng.random_bool(0.6) {
        s.push(' ');
        s.push_str(pick(rng, TAILS));
    }
    s
}

/// At least `bytes` bytes of sentences, paragraphs separated by blank lines.
pub fn synthetic_text(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let mut sentence = clause(&mut rng);
        if rng.random_bool(0.4) {
            sentence = format!("{sentence} {} {}", pick(&mut rng, JOINERS), clause(&mut rng));
        }
        let mut chars = sentence.chars();
        let first = chars.next().unwrap().to_ascii_uppercase();
        out.push(first);
        out.extend(chars);
        out.push_str(if rng.random_bool(0.1) { "?" } else { "." });
        out.push_str(if rng.random_bool(0.15) { "\n\n" } else { " " });
    }
    out.into_bytes()
}
