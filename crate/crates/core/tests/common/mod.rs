//! Text mutations shared by the fuzz and acceptance targets.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOKENS: &[&str] = &[
    "", ",", "\n", " ", "-", ".", "e", "0", "1", "-1", "9", "nan", "NaN", "inf", "-inf", "1e308", "1e999",
    "18446744073709551616", "4294967296", "99999999999", "end", "tensor", "=", "[", "]", "\"", "#", "é", "∞",
    "true", "false", "sen", "forest",
];

pub fn mutate(rng: &mut ChaCha8Rng, text: &str) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    let edits = rng.random_range(1..=4);
    for _ in 0..edits {
        let len = chars.len();
        let at = if len == 0 { 0 } else { rng.random_range(0..len) };
        match rng.random_range(0..8) {
            0 => chars.truncate(at),
            1 if len > 0 => {
                let end = (at + rng.random_range(1..40)).min(len);
                chars.drain(at..end);
            }
            2 => {
                let tok = TOKENS.choose(rng).unwrap();
                chars.splice(at..at, tok.chars());
            }
            3 if len > 0 => {
                // Replace the number-ish run at `at` with a token.
                let mut end = at;
                while end < len && !matches!(chars[end], ',' | ' ' | '\n') {
                    end += 1;
                }
                let tok = TOKENS.choose(rng).unwrap();
                chars.splice(at..end, tok.chars());
            }
            4 if len > 0 => chars[at] = rng.random_range(' '..='~'),
            5 => {
                // Duplicate or drop a whole line.
                let mut lines: Vec<String> = chars.iter().collect::<String>().lines().map(String::from).collect();
                if !lines.is_empty() {
                    let i = rng.random_range(0..lines.len());
                    if rng.random_bool(0.5) {
                        let l = lines[i].clone();
                        lines.insert(i, l);
                    } else {
                        lines.remove(i);
                    }
                }
                chars = lines.join("\n").chars().collect();
            }
            6 => {
                // Swap two lines.
                let mut lines: Vec<String> = chars.iter().collect::<String>().lines().map(String::from).collect();
                if lines.len() > 1 {
                    let a = rng.random_range(0..lines.len());
                    let b = rng.random_range(0..lines.len());
                    lines.swap(a, b);
                }
                chars = lines.join("\n").chars().collect();
            }
            _ => {
                let n = rng.random_range(1..8);
                for _ in 0..n {
                    chars.insert(at.min(chars.len()), rng.random_range(' '..='~'));
                }
            }
        }
    }
    chars.into_iter().collect()
}
