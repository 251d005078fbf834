//! A seeded generator of English-like byte text.
//!
//! Stands in for a web-text corpus when none is supplied. Words are built from
//! syllables and drawn with Zipf frequencies from part-of-speech classes; each
//! paragraph favours its own small set of topic nouns, so there is structure
//! beyond unigrams for a model to pick up. Output is 7-bit ASCII.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{Origin, Provenance, TokenCorpus};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextStyle {
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub zipf_exponent: f64,
    /// Topic nouns per paragraph.
    pub topic_size: usize,
    /// Probability that a noun slot uses the paragraph topic.
    pub topic_weight: f64,
    pub sentences_per_paragraph: (usize, usize),
}

impl Default for TextStyle {
    fn default() -> Self {
        Self {
            nouns: 600,
            verbs: 250,
            adjectives: 200,
            zipf_exponent: 1.1,
            topic_size: 6,
            topic_weight: 0.4,
            sentences_per_paragraph: (3, 8),
        }
    }
}

const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "ch", "cl", "dr", "gr", "pl", "sh", "st", "th", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ck", "ng"];
const DETERMINERS: &[&str] = &["the", "a", "this", "every", "some", "that", "no"];
const PREPOSITIONS: &[&str] = &["of", "in", "on", "with", "from", "under", "near", "about"];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so"];

struct WordClass {
    words: Vec<String>,
    dist: WeightedIndex<f64>,
}

impl WordClass {
    fn new(rng: &mut Rng, count: usize, exponent: f64, suffixes: &[&str]) -> Self {
        let mut words = Vec::with_capacity(count);
        while words.len() < count.max(1) {
            let syllables = 1 + (rng.random::<f64>() * 2.2) as usize;
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            w.push_str(CODAS.choose(rng).unwrap());
            w.push_str(suffixes.choose(rng).unwrap());
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let weights: Vec<f64> = (1..=words.len()).map(|r| (r as f64).powf(-exponent)).collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        Self { words, dist }
    }

    fn pick(&self, rng: &mut Rng) -> &str {
        &self.words[self.dist.sample(rng)]
    }
}

struct Writer<'a> {
    rng: Rng,
    style: &'a TextStyle,
    nouns: WordClass,
    verbs: WordClass,
    adjectives: WordClass,
    topic: Vec<usize>,
}

impl Writer<'_> {
    fn noun(&mut self) -> String {
        if !self.topic.is_empty() && self.rng.random::<f64>() < self.style.topic_weight {
            let i = *self.topic.choose(&mut self.rng).unwrap();
            self.nouns.words[i].clone()
        } else {
            self.nouns.pick(&mut self.rng).to_string()
        }
    }

    fn noun_phrase(&mut self, out: &mut Vec<String>) {
        out.push(DETERMINERS.choose(&mut self.rng).unwrap().to_string());
        if self.rng.random::<f64>() < 0.35 {
            out.push(self.adjectives.pick(&mut self.rng).to_string());
        }
        out.push(self.noun());
        if self.rng.random::<f64>() < 0.25 {
            out.push(PREPOSITIONS.choose(&mut self.rng).unwrap().to_string());
            out.push(DETERMINERS.choose(&mut self.rng).unwrap().to_string());
            out.push(self.noun());
        }
    }

    fn clause(&mut self, out: &mut Vec<String>) {
        self.noun_phrase(out);
        out.push(self.verbs.pick(&mut self.rng).to_string());
        if self.rng.random::<f64>() < 0.8 {
            self.noun_phrase(out);
        }
    }

    fn sentence(&mut self, text: &mut String) {
        let mut words = Vec::new();
        self.clause(&mut words);
        if self.rng.random::<f64>() < 0.3 {
            let last = words.pop().unwrap();
            words.push(format!("{last},"));
            words.push(CONJUNCTIONS.choose(&mut self.rng).unwrap().to_string());
            self.clause(&mut words);
        }
        let mut first = true;
        for w in words {
            if !first {
                text.push(' ');
            }
            if first {
                let mut chars = w.chars();
                let head = chars.next().unwrap().to_ascii_uppercase();
                text.push(head);
                text.push_str(chars.as_str());
                first = false;
            } else {
                text.push_str(&w);
            }
        }
        text.push_str(if self.rng.random::<f64>() < 0.1 { "?" } else { "." });
    }

    fn paragraph(&mut self, text: &mut String) {
        let n = self.nouns.words.len();
        self.topic = (0..self.style.topic_size.min(n)).map(|_| self.rng.random_range(0..n)).collect();
        let (lo, hi) = self.style.sentences_per_paragraph;
        let count = self.rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
        for i in 0..count {
            if i > 0 {
                text.push(' ');
            }
            self.sentence(text);
        }
        text.push_str("\n\n");
    }
}

/// Exactly `bytes` tokens of byte-level text (V = 256), deterministic in `seed`.
pub fn synthetic_text(bytes: usize, seed: u64, style: TextStyle) -> TokenCorpus {
    let mut rng = rng::seeded(seed);
    let nouns = WordClass::new(&mut rng, style.nouns, style.zipf_exponent, &["", "", "", "s", "er", "ion"]);
    let verbs = WordClass::new(&mut rng, style.verbs, style.zipf_exponent, &["s", "ed", "es", "ing"]);
    let adjectives = WordClass::new(&mut rng, style.adjectives, style.zipf_exponent, &["", "y", "ful", "ish", "al"]);
    let mut w = Writer { rng, style: &style, nouns, verbs, adjectives, topic: Vec::new() };
    let mut text = String::with_capacity(bytes + 4096);
    while text.len() < bytes {
        w.paragraph(&mut text);
    }
    text.truncate(bytes);
    let mut corpus = TokenCorpus::from_bytes(text.as_bytes());
    corpus.provenance = Provenance { seed: Some(seed), ..Provenance::default() };
    corpus.origin = Origin::Clean;
    corpus
}
