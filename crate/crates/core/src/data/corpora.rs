//! Deterministic generators for the bundled toy corpora.
//!
//! Content depends only on the corpus id, split name and size; the order seen
//! by callers is reshuffled by `load_split`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Record = Map<String, Value>;

pub const TOY_SENTIMENT: &str = "toy-sentiment";
pub const PARITY: &str = "parity";
pub const COPY: &str = "copy";
pub const TOY_ARITH: &str = "toy-arith";

pub const IDS: [&str; 4] = [TOY_SENTIMENT, PARITY, COPY, TOY_ARITH];

const NOUNS: [&str; 4] = ["movie", "film", "plot", "story"];
const VERBS: [&str; 2] = ["was", "is"];
const INTENSIFIERS: [&str; 2] = ["really", "very"];
const POSITIVE: [&str; 4] = ["great", "good", "fun", "awesome"];
const NEGATIVE: [&str; 4] = ["bad", "awful", "boring", "dull"];
pub const COPY_ALPHABET: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
pub const COPY_SPAN: usize = 3;
pub const PARITY_BITS: usize = 8;
pub const NUMBER_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// Every word any bundled corpus can emit, in a fixed order.
pub fn vocabulary() -> Vec<&'static str> {
    let digits = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
    let mut v: Vec<&str> = digits.to_vec();
    v.push("+");
    v.extend(NUMBER_WORDS);
    v.extend(["even", "odd"]);
    v.extend(COPY_ALPHABET);
    v.push("the");
    v.extend(NOUNS);
    v.extend(VERBS);
    v.extend(INTENSIFIERS);
    v.extend(POSITIVE);
    v.extend(NEGATIVE);
    v.extend(["positive", "negative"]);
    v
}

fn rng_for(id: &str, split: &str, size: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(id.as_bytes());
    h.update([0]);
    h.update(split.as_bytes());
    h.update((size as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn check_balanced(id: &str, split: &str, size: usize, classes: usize) -> Result<()> {
    if size % classes != 0 {
        return Err(Error::Data(format!(
            "{id}/{split}: size {size} cannot be split evenly over {classes} classes"
        )));
    }
    Ok(())
}

fn record(pairs: Vec<(&str, Value)>) -> Record {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Generates `size` raw records for `split` of corpus `id`.
pub fn generate(id: &str, split: &str, size: usize) -> Result<Vec<Record>> {
    let mut rng = rng_for(id, split, size);
    let records = match id {
        TOY_SENTIMENT => {
            check_balanced(id, split, size, 2)?;
            (0..size)
                .map(|i| {
                    let label = i % 2;
                    let adjectives = if label == 1 { &POSITIVE } else { &NEGATIVE };
                    let mut words = vec!["the", NOUNS.choose(&mut rng).unwrap(), VERBS.choose(&mut rng).unwrap()];
                    if rng.random_bool(0.5) {
                        words.push(INTENSIFIERS.choose(&mut rng).unwrap());
                    }
                    words.push(adjectives.choose(&mut rng).unwrap());
                    record(vec![("text", json!(words.join(" "))), ("label", json!(label))])
                })
                .collect()
        }
        PARITY => {
            check_balanced(id, split, size, 2)?;
            let all = 1usize << PARITY_BITS;
            let codes: Vec<usize> = if size == all {
                (0..all).collect()
            } else {
                let (mut even, mut odd): (Vec<usize>, Vec<usize>) =
                    (0..all).partition(|c| c.count_ones() % 2 == 0);
                even.shuffle(&mut rng);
                odd.shuffle(&mut rng);
                (0..size)
                    .map(|i| if i % 2 == 0 { even[(i / 2) % even.len()] } else { odd[(i / 2) % odd.len()] })
                    .collect()
            };
            codes
                .into_iter()
                .map(|c| {
                    let bits: Vec<String> =
                        (0..PARITY_BITS).rev().map(|b| ((c >> b) & 1).to_string()).collect();
                    record(vec![("bits", json!(bits.join(" "))), ("label", json!(c.count_ones() % 2))])
                })
                .collect()
        }
        COPY => (0..size)
            .map(|_| {
                let span: Vec<&str> = (0..COPY_SPAN).map(|_| *COPY_ALPHABET.choose(&mut rng).unwrap()).collect();
                let span = span.join(" ");
                record(vec![("span", json!(span)), ("echo", json!(span))])
            })
            .collect(),
        TOY_ARITH => {
            let classes = NUMBER_WORDS.len();
            check_balanced(id, split, size, classes)?;
            (0..size)
                .map(|i| {
                    let sum = i % classes;
                    let a = rng.random_range(0..=sum);
                    record(vec![("question", json!(format!("{a} + {}", sum - a))), ("answer", json!(sum))])
                })
                .collect()
        }
        other => return Err(Error::Config(format!("unknown builtin corpus '{other}'"))),
    };
    Ok(records)
}
