//! Text normalization and grapheme-to-phoneme conversion.
//!
//! Words are looked up in a small bundled lexicon; out-of-lexicon words fall
//! back to a deterministic per-letter phoneme mapping. The phone inventory is
//! an ARPAbet-like set of 39 symbols plus the reserved PAD/UNK/SEP ids.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

/// ARPAbet-like phone inventory, stress-free.
const PHONES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// Ordered phoneme symbol table with reserved PAD/UNK/SEP ids.
#[derive(Debug, Clone)]
pub struct PhonemeVocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl PhonemeVocab {
    /// The vocabulary used throughout the toy pipeline.
    pub fn arpabet() -> Self {
        let mut symbols = vec!["<pad>".to_string(), "<unk>".to_string(), "<sep>".to_string()];
        symbols.extend(PHONES.iter().map(|s| s.to_string()));
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        PhonemeVocab { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Word -> phone sequence map, loaded from a tab-separated file.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    /// Parse `word<TAB>ph1 ph2 ...` lines. Blank lines are skipped.
    pub fn parse(text: &str, vocab: &PhonemeVocab) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("lexicon line {}: missing tab", lineno + 1))
            })?;
            let phones: Vec<String> = phones.split_whitespace().map(|s| s.to_string()).collect();
            if phones.is_empty() {
                return Err(Error::Format(format!(
                    "lexicon line {}: no phones for '{word}'",
                    lineno + 1
                )));
            }
            for p in &phones {
                if vocab.id(p).is_none() {
                    return Err(Error::Format(format!(
                        "lexicon line {}: unknown phone '{p}'",
                        lineno + 1
                    )));
                }
            }
            entries.insert(word.to_lowercase(), phones);
        }
        Ok(Lexicon { entries })
    }

    /// The lexicon shipped with the crate.
    pub fn bundled(vocab: &PhonemeVocab) -> Self {
        Lexicon::parse(include_str!("../data/lexicon.txt"), vocab)
            .expect("bundled lexicon is well-formed")
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Pronunciation -> word map; when several words share a pronunciation
    /// the lexicographically first one wins.
    pub fn inverse(&self) -> BTreeMap<Vec<String>, String> {
        let mut inv = BTreeMap::new();
        for (word, phones) in &self.entries {
            inv.entry(phones.clone()).or_insert_with(|| word.clone());
        }
        inv
    }

    /// Words whose pronunciation maps back to themselves under `inverse()`.
    /// The synthetic corpus samples only these, so an oracle transcriber can
    /// reconstruct the exact transcript.
    pub fn invertible_words(&self) -> Vec<String> {
        let inv = self.inverse();
        let mut words: Vec<String> = inv.values().cloned().collect();
        words.sort();
        words
    }
}

/// Lowercase, strip punctuation to word boundaries (intra-word apostrophes
/// survive), collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = String::with_capacity(lower.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_alphabetic() {
            out.push(c);
        } else if c == '\'' {
            let prev_alpha = i > 0 && chars[i - 1].is_ascii_alphabetic();
            let next_alpha = i + 1 < chars.len() && chars[i + 1].is_ascii_alphabetic();
            if prev_alpha && next_alpha {
                out.push(c);
            } else {
                out.push(' ');
            }
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn letter_phones(c: char) -> Option<&'static [&'static str]> {
    let phones: &[&str] = match c {
        'a' => &["AE"],
        'b' => &["B"],
        'c' => &["K"],
        'd' => &["D"],
        'e' => &["EH"],
        'f' => &["F"],
        'g' => &["G"],
        'h' => &["HH"],
        'i' => &["IH"],
        'j' => &["JH"],
        'k' => &["K"],
        'l' => &["L"],
        'm' => &["M"],
        'n' => &["N"],
        'o' => &["OW"],
        'p' => &["P"],
        'q' => &["K"],
        'r' => &["R"],
        's' => &["S"],
        't' => &["T"],
        'u' => &["AH"],
        'v' => &["V"],
        'w' => &["W"],
        'x' => &["K", "S"],
        'y' => &["Y"],
        'z' => &["Z"],
        _ => return None,
    };
    Some(phones)
}

/// Convert normalized text into phoneme ids. Words are separated by SEP.
/// Out-of-lexicon words use the letter fallback; unknown letters map to UNK.
pub fn g2p(text: &str, lexicon: &Lexicon, vocab: &PhonemeVocab) -> Vec<u32> {
    let mut ids = Vec::new();
    for (wi, word) in text.split_whitespace().enumerate() {
        if wi > 0 {
            ids.push(SEP_ID);
        }
        if let Some(phones) = lexicon.lookup(word) {
            for p in phones {
                ids.push(vocab.id(p).unwrap_or(UNK_ID));
            }
        } else {
            for c in word.chars() {
                match letter_phones(c) {
                    Some(phones) => {
                        for p in phones {
                            ids.push(vocab.id(p).unwrap_or(UNK_ID));
                        }
                    }
                    None => ids.push(UNK_ID),
                }
            }
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize("Hello,  WORLD!"), "hello world");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("don't stop"), "don't stop");
        assert_eq!(normalize("'quoted' words."), "quoted words");
        assert_eq!(normalize("some 123 digits"), "some digits");
    }

    #[test]
    fn g2p_lexicon_lookup_matches_shipped_file() {
        // Independent lookup straight from the shipped lexicon text.
        let vocab = PhonemeVocab::arpabet();
        let lexicon = Lexicon::bundled(&vocab);
        let raw = include_str!("../data/lexicon.txt");
        let line = raw
            .lines()
            .find(|l| l.starts_with("cat\t"))
            .expect("lexicon has cat");
        let expected: Vec<u32> = line
            .split_once('\t')
            .unwrap()
            .1
            .split_whitespace()
            .map(|p| vocab.id(p).unwrap())
            .collect();
        assert_eq!(g2p("cat", &lexicon, &vocab), expected);
        assert_eq!(expected.len(), 3); // K AE T
    }

    #[test]
    fn g2p_empty_and_oov() {
        let vocab = PhonemeVocab::arpabet();
        let lexicon = Lexicon::bundled(&vocab);
        assert!(g2p("", &lexicon, &vocab).is_empty());
        let ids = g2p("zzqx", &lexicon, &vocab);
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&id| id != PAD_ID));
        // z z q x -> Z Z K K S
        assert_eq!(
            ids,
            vec![
                vocab.id("Z").unwrap(),
                vocab.id("Z").unwrap(),
                vocab.id("K").unwrap(),
                vocab.id("K").unwrap(),
                vocab.id("S").unwrap(),
            ]
        );
    }

    #[test]
    fn lexicon_phones_have_no_adjacent_duplicates() {
        // Run-collapsing decoders rely on adjacent phones differing.
        let vocab = PhonemeVocab::arpabet();
        let lexicon = Lexicon::bundled(&vocab);
        for word in lexicon.words() {
            let phones = lexicon.lookup(word).unwrap();
            for pair in phones.windows(2) {
                assert_ne!(pair[0], pair[1], "word '{word}' has duplicate phones");
            }
        }
    }

    #[test]
    fn bundled_lexicon_is_big_enough() {
        let vocab = PhonemeVocab::arpabet();
        let lexicon = Lexicon::bundled(&vocab);
        assert!(lexicon.len() >= 200, "lexicon has {} entries", lexicon.len());
        assert!(lexicon.invertible_words().len() >= 200);
    }

    #[test]
    fn reserved_ids() {
        let vocab = PhonemeVocab::arpabet();
        assert_eq!(vocab.id("<pad>"), Some(PAD_ID));
        assert_eq!(vocab.id("<unk>"), Some(UNK_ID));
        assert_eq!(vocab.id("<sep>"), Some(SEP_ID));
        assert_eq!(vocab.len(), 42);
    }

    proptest! {
        #[test]
        fn g2p_total_and_pad_free(words in proptest::collection::vec("[a-z]{1,8}", 0..6)) {
            let vocab = PhonemeVocab::arpabet();
            let lexicon = Lexicon::bundled(&vocab);
            let text = words.join(" ");
            let normalized = normalize(&text);
            let ids = g2p(&normalized, &lexicon, &vocab);
            prop_assert!(ids.iter().all(|&id| id != PAD_ID));
            let n_words = normalized.split_whitespace().count();
            let seps = ids.iter().filter(|&&id| id == SEP_ID).count();
            if n_words > 0 {
                prop_assert_eq!(seps, n_words - 1);
            } else {
                prop_assert!(ids.is_empty());
            }
            // Determinism.
            prop_assert_eq!(g2p(&normalized, &lexicon, &vocab), ids);
        }
    }
}
