//! Toy English → German-like corpus for ambiguous pronoun translation.
//!
//! Inanimate nouns carry a latent gender (m/f/n) visible only on the target
//! side. `it` and `they` translate to a form chosen by the most recent
//! inanimate noun of matching number; persons are distractor mentions and are
//! never antecedents. The target plural pronoun is gender-marked so that
//! `they` is as ambiguous as `it`. Every source word maps to exactly one
//! target word, so gold alignments are the identity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::apt::{write_alignments, Alignment};
use super::contrastive::{write_sets, ContrastiveSet, SequenceScorer};
use crate::error::{Error, Result};
use crate::text::tags::write_tag_file;
use crate::text::write_lines;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Masc,
    Fem,
    Neut,
}

impl Gender {
    const ALL: [Gender; 3] = [Gender::Masc, Gender::Fem, Gender::Neut];

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Number {
    Sg,
    Pl,
}

/// Grammatical slot of a pronoun; each slot has one form per gender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    SubjSg,
    ObjSg,
    SubjPl,
}

impl Slot {
    pub fn forms(self) -> [&'static str; 3] {
        match self {
            Slot::SubjSg => ["er", "sie", "es"],
            Slot::ObjSg => ["ihn", "sie", "es"],
            Slot::SubjPl => ["sie", "jene", "diese"],
        }
    }

    pub fn form(self, g: Gender) -> &'static str {
        self.forms()[g.idx()]
    }
}

struct Noun {
    en: &'static str,
    en_pl: &'static str,
    de: &'static str,
    de_pl: &'static str,
    gender: Gender,
}

use Gender::{Fem, Masc, Neut};

const fn noun(en: &'static str, en_pl: &'static str, de: &'static str, de_pl: &'static str, gender: Gender) -> Noun {
    Noun { en, en_pl, de, de_pl, gender }
}

const NOUNS: [Noun; 48] = [
    noun("table", "tables", "tisch", "tische", Masc),
    noun("spoon", "spoons", "loeffel", "loeffeln", Masc),
    noun("tree", "trees", "baum", "baeume", Masc),
    noun("car", "cars", "wagen", "wagens", Masc),
    noun("key", "keys", "schluessel", "schluesseln", Masc),
    noun("garden", "gardens", "garten", "gaerten", Masc),
    noun("chair", "chairs", "stuhl", "stuehle", Masc),
    noun("coat", "coats", "mantel", "maentel", Masc),
    noun("hat", "hats", "hut", "huete", Masc),
    noun("ball", "balls", "ball", "baelle", Masc),
    noun("plate", "plates", "teller", "tellern", Masc),
    noun("stone", "stones", "stein", "steine", Masc),
    noun("pen", "pens", "stift", "stifte", Masc),
    noun("shoe", "shoes", "schuh", "schuhe", Masc),
    noun("ring", "rings", "ring", "ringe", Masc),
    noun("train", "trains", "zug", "zuege", Masc),
    noun("lamp", "lamps", "lampe", "lampen", Fem),
    noun("door", "doors", "tuer", "tueren", Fem),
    noun("cup", "cups", "tasse", "tassen", Fem),
    noun("bag", "bags", "tasche", "taschen", Fem),
    noun("clock", "clocks", "uhr", "uhren", Fem),
    noun("street", "streets", "strasse", "strassen", Fem),
    noun("bottle", "bottles", "flasche", "flaschen", Fem),
    noun("box", "boxes", "kiste", "kisten", Fem),
    noun("card", "cards", "karte", "karten", Fem),
    noun("chain", "chains", "kette", "ketten", Fem),
    noun("plant", "plants", "pflanze", "pflanzen", Fem),
    noun("wall", "walls", "wand", "waende", Fem),
    noun("bridge", "bridges", "bruecke", "bruecken", Fem),
    noun("bell", "bells", "glocke", "glocken", Fem),
    noun("jacket", "jackets", "jacke", "jacken", Fem),
    noun("fork", "forks", "gabel", "gabeln", Fem),
    noun("book", "books", "buch", "buecher", Neut),
    noun("house", "houses", "haus", "haeuser", Neut),
    noun("window", "windows", "fenster", "fensters", Neut),
    noun("bed", "beds", "bett", "betten", Neut),
    noun("glass", "glasses", "glas", "glaeser", Neut),
    noun("picture", "pictures", "bild", "bilder", Neut),
    noun("knife", "knives", "messer", "messern", Neut),
    noun("boat", "boats", "boot", "boote", Neut),
    noun("shirt", "shirts", "hemd", "hemden", Neut),
    noun("egg", "eggs", "ei", "eier", Neut),
    noun("phone", "phones", "telefon", "telefone", Neut),
    noun("bike", "bikes", "fahrrad", "fahrraeder", Neut),
    noun("bread", "breads", "brot", "brote", Neut),
    noun("roof", "roofs", "dach", "daecher", Neut),
    noun("cloth", "cloths", "tuch", "tuecher", Neut),
    noun("field", "fields", "feld", "felder", Neut),
];

const PERSONS: [(&str, &str, Gender); 6] = [
    ("man", "mann", Masc),
    ("woman", "frau", Fem),
    ("child", "kind", Neut),
    ("boy", "junge", Masc),
    ("girl", "maedchen", Neut),
    ("teacher", "lehrerin", Fem),
];

const TRANSITIVE: [(&str, &str); 6] = [
    ("sees", "sieht"),
    ("buys", "kauft"),
    ("likes", "mag"),
    ("finds", "findet"),
    ("sells", "verkauft"),
    ("paints", "malt"),
];

const INTRANSITIVE: [(&str, &str); 4] = [
    ("sleeps", "schlaeft"),
    ("laughs", "lacht"),
    ("waits", "wartet"),
    ("sings", "singt"),
];

const ADJECTIVES: [(&str, &str); 8] = [
    ("broken", "kaputt"),
    ("new", "neu"),
    ("old", "alt"),
    ("red", "rot"),
    ("small", "klein"),
    ("big", "gross"),
    ("clean", "sauber"),
    ("heavy", "schwer"),
];

const FUNCTION_WORDS: [(&str, &str, &str); 4] = [
    ("is", "ist", "AUX"),
    ("are", "sind", "AUX"),
    ("and", "und", "CCONJ"),
    (".", ".", "PUNCT"),
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Case {
    Nom,
    Acc,
}

fn definite(g: Gender, n: Number, c: Case) -> &'static str {
    match (n, g, c) {
        (Number::Pl, _, _) => "die",
        (_, Masc, Case::Nom) => "der",
        (_, Masc, Case::Acc) => "den",
        (_, Fem, _) => "die",
        (_, Neut, _) => "das",
    }
}

fn indefinite(g: Gender, c: Case) -> &'static str {
    match (g, c) {
        (Masc, Case::Acc) => "einen",
        (Fem, _) => "eine",
        _ => "ein",
    }
}

/// Everything a source word can mean in the toy grammar.
#[derive(Clone, Copy)]
enum Word {
    Det { definite: bool },
    Noun { idx: usize, number: Number },
    Person(usize),
    Transitive(usize),
    Intransitive(usize),
    Adj(usize),
    Func(usize),
    It,
    They,
}

fn lookup(w: &str) -> Option<Word> {
    match w {
        "the" => return Some(Word::Det { definite: true }),
        "a" => return Some(Word::Det { definite: false }),
        "it" => return Some(Word::It),
        "they" => return Some(Word::They),
        _ => {}
    }
    if let Some(i) = NOUNS.iter().position(|n| n.en == w) {
        return Some(Word::Noun { idx: i, number: Number::Sg });
    }
    if let Some(i) = NOUNS.iter().position(|n| n.en_pl == w) {
        return Some(Word::Noun { idx: i, number: Number::Pl });
    }
    let pos = |t: &[(&str, &str)]| t.iter().position(|e| e.0 == w);
    if let Some(i) = PERSONS.iter().position(|p| p.0 == w) {
        return Some(Word::Person(i));
    }
    if let Some(i) = pos(&TRANSITIVE) {
        return Some(Word::Transitive(i));
    }
    if let Some(i) = pos(&INTRANSITIVE) {
        return Some(Word::Intransitive(i));
    }
    if let Some(i) = pos(&ADJECTIVES) {
        return Some(Word::Adj(i));
    }
    FUNCTION_WORDS.iter().position(|e| e.0 == w).map(Word::Func)
}

/// Deterministic lexicon tagger for the toy source language.
pub fn pos_tag(word: &str) -> &'static str {
    match lookup(word) {
        Some(Word::Det { .. }) => "DET",
        Some(Word::Noun { .. } | Word::Person(_)) => "NOUN",
        Some(Word::Transitive(_) | Word::Intransitive(_)) => "VERB",
        Some(Word::Adj(_)) => "ADJ",
        Some(Word::Func(i)) => FUNCTION_WORDS[i].2,
        Some(Word::It | Word::They) => "PRON",
        None => "X",
    }
}

/// Translates a toy source sentence by rule: articles agree with the
/// following noun, objects of transitive verbs are accusative, and each
/// pronoun takes the gender of the most recent inanimate noun of its number.
pub fn oracle_translate<S: AsRef<str>>(src: &[S]) -> Result<Vec<String>> {
    let words: Vec<Word> = src
        .iter()
        .map(|w| lookup(w.as_ref()).ok_or_else(|| Error::Input(format!("unknown toy word {:?}", w.as_ref()))))
        .collect::<Result<_>>()?;
    let mut last = [None::<Gender>; 2];
    let mut out = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let case = if i > 0 && matches!(words[i - 1], Word::Transitive(_)) {
            Case::Acc
        } else {
            Case::Nom
        };
        let t: &str = match *w {
            Word::Det { definite: d } => {
                let (g, n) = match words.get(i + 1) {
                    Some(Word::Noun { idx, number }) => (NOUNS[*idx].gender, *number),
                    Some(Word::Person(p)) => (PERSONS[*p].2, Number::Sg),
                    _ => return Err(Error::Input(format!("article at {i} not followed by a noun"))),
                };
                if d {
                    definite(g, n, case)
                } else if n == Number::Pl {
                    return Err(Error::Input("indefinite plural is not in the toy grammar".into()));
                } else {
                    indefinite(g, case)
                }
            }
            Word::Noun { idx, number } => {
                let n = &NOUNS[idx];
                last[(number == Number::Pl) as usize] = Some(n.gender);
                if number == Number::Sg {
                    n.de
                } else {
                    n.de_pl
                }
            }
            Word::Person(p) => PERSONS[p].1,
            Word::Transitive(v) => TRANSITIVE[v].1,
            Word::Intransitive(v) => INTRANSITIVE[v].1,
            Word::Adj(a) => ADJECTIVES[a].1,
            Word::Func(f) => FUNCTION_WORDS[f].1,
            Word::It => {
                let g = last[0].ok_or_else(|| Error::Input(format!("`it` at {i} has no antecedent")))?;
                let slot = if case == Case::Acc { Slot::ObjSg } else { Slot::SubjSg };
                slot.form(g)
            }
            Word::They => {
                let g = last[1].ok_or_else(|| Error::Input(format!("`they` at {i} has no antecedent")))?;
                Slot::SubjPl.form(g)
            }
        };
        out.push(t.to_string());
    }
    Ok(out)
}

/// Source word → every target word it can translate to.
pub fn dictionary() -> BTreeMap<String, BTreeSet<String>> {
    let mut d: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut add = |s: &str, t: &str| {
        d.entry(s.to_string()).or_default().insert(t.to_string());
    };
    for g in Gender::ALL {
        for n in [Number::Sg, Number::Pl] {
            for c in [Case::Nom, Case::Acc] {
                add("the", definite(g, n, c));
            }
        }
        for c in [Case::Nom, Case::Acc] {
            add("a", indefinite(g, c));
        }
        add("it", Slot::SubjSg.form(g));
        add("it", Slot::ObjSg.form(g));
        add("they", Slot::SubjPl.form(g));
    }
    for n in &NOUNS {
        add(n.en, n.de);
        add(n.en_pl, n.de_pl);
    }
    for p in &PERSONS {
        add(p.0, p.1);
    }
    for (s, t) in TRANSITIVE.iter().chain(&INTRANSITIVE).chain(&ADJECTIVES) {
        add(s, t);
    }
    for (s, t, _) in &FUNCTION_WORDS {
        add(s, t);
    }
    d
}

/// Aligns a source sentence to an arbitrary candidate using the dictionary.
/// Each source word takes the unused candidate position holding one of its
/// translations that lies closest to its length-scaled diagonal position.
pub fn dictionary_align<S: AsRef<str>, T: AsRef<str>>(
    src: &[S],
    cand: &[T],
    dict: &BTreeMap<String, BTreeSet<String>>,
) -> Alignment {
    let mut used = vec![false; cand.len()];
    let mut pairs = Vec::new();
    let scale = if src.is_empty() { 0.0 } else { cand.len() as f64 / src.len() as f64 };
    for (i, s) in src.iter().enumerate() {
        let Some(options) = dict.get(s.as_ref()) else { continue };
        let diag = i as f64 * scale;
        let best = cand
            .iter()
            .enumerate()
            .filter(|(j, t)| !used[*j] && options.contains(t.as_ref()))
            .min_by(|a, b| {
                let da = (a.0 as f64 - diag).abs();
                let db = (b.0 as f64 - diag).abs();
                da.total_cmp(&db).then(a.0.cmp(&b.0))
            })
            .map(|(j, _)| j);
        if let Some(j) = best {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    Alignment(pairs)
}

/// A tracked pronoun inside a generated pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounInfo {
    pub index: usize,
    pub word: String,
    pub slot: Slot,
    pub antecedent: Gender,
    /// Sentences between antecedent and pronoun.
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub pos: Vec<&'static str>,
    pub pronoun: Option<PronounInfo>,
}

impl SynthPair {
    pub fn src_line(&self) -> String {
        self.src.join(" ")
    }

    pub fn tgt_line(&self) -> String {
        self.tgt.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub contrastive: usize,
    /// Share of train/dev/test pairs containing a pronoun.
    pub pronoun_rate: f64,
    /// Share of pronouns that are `they`.
    pub plural_rate: f64,
    /// Requested proportions of distances 0, 1 and >1.
    pub distance_mix: [f64; 3],
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            train: 20_000,
            dev: 1_000,
            test: 1_000,
            contrastive: 1_000,
            pronoun_rate: 0.6,
            plural_rate: 0.3,
            distance_mix: [0.4, 0.3, 0.3],
        }
    }
}

/// Splits `n` by `mix` with the largest-remainder rule, so every count is
/// within one of `n · share`.
pub fn allocate(n: usize, mix: &[f64; 3]) -> [usize; 3] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|m| n as f64 * m / total).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Builds sentences token by token on both sides at once.
struct Builder {
    src: Vec<String>,
    tgt: Vec<String>,
    pos: Vec<&'static str>,
}

impl Builder {
    fn new() -> Self {
        Builder { src: vec![], tgt: vec![], pos: vec![] }
    }

    fn push(&mut self, s: &str, t: &str, p: &'static str) {
        self.src.push(s.into());
        self.tgt.push(t.into());
        self.pos.push(p);
    }

    fn func(&mut self, w: &str) {
        let (s, t, p) = FUNCTION_WORDS.iter().find(|e| e.0 == w).expect("function word");
        self.push(s, t, p);
    }

    fn person(&mut self, rng: &mut ChaCha8Rng) {
        let (en, de, g) = *PERSONS.choose(rng).unwrap();
        self.push("the", definite(g, Number::Sg, Case::Nom), "DET");
        self.push(en, de, "NOUN");
    }

    fn noun_phrase(&mut self, idx: usize, number: Number, case: Case, rng: &mut ChaCha8Rng) {
        let n = &NOUNS[idx];
        if number == Number::Sg && rng.random_bool(0.3) {
            self.push("a", indefinite(n.gender, case), "DET");
        } else {
            self.push("the", definite(n.gender, number, case), "DET");
        }
        match number {
            Number::Sg => self.push(n.en, n.de, "NOUN"),
            Number::Pl => self.push(n.en_pl, n.de_pl, "NOUN"),
        }
    }

    fn transitive(&mut self, rng: &mut ChaCha8Rng) {
        let (s, t) = *TRANSITIVE.choose(rng).unwrap();
        self.push(s, t, "VERB");
    }

    fn adjective(&mut self, rng: &mut ChaCha8Rng) {
        let (s, t) = *ADJECTIVES.choose(rng).unwrap();
        self.push(s, t, "ADJ");
    }

    fn copula(&mut self, number: Number) {
        self.func(if number == Number::Sg { "is" } else { "are" });
    }

    /// A clause mentioning `nouns` in order (last one most recent).
    fn noun_clause(&mut self, nouns: &[(usize, Number)], rng: &mut ChaCha8Rng) {
        if nouns.len() == 1 && rng.random_bool(0.35) {
            let (i, n) = nouns[0];
            self.noun_phrase(i, n, Case::Nom, rng);
            self.copula(n);
            self.adjective(rng);
            return;
        }
        self.person(rng);
        self.transitive(rng);
        for (k, &(i, n)) in nouns.iter().enumerate() {
            if k > 0 {
                self.func("and");
            }
            // only the first conjunct directly follows the verb
            let case = if k == 0 { Case::Acc } else { Case::Nom };
            self.noun_phrase(i, n, case, rng);
        }
    }

    /// A clause with no inanimate noun.
    fn filler(&mut self, rng: &mut ChaCha8Rng) {
        self.person(rng);
        let (s, t) = *INTRANSITIVE.choose(rng).unwrap();
        self.push(s, t, "VERB");
    }

    /// Returns the pronoun's source index.
    fn pronoun_clause(&mut self, g: Gender, number: Number, rng: &mut ChaCha8Rng) -> (usize, Slot) {
        if number == Number::Sg && rng.random_bool(0.4) {
            self.person(rng);
            self.transitive(rng);
            let at = self.src.len();
            self.push("it", Slot::ObjSg.form(g), "PRON");
            return (at, Slot::ObjSg);
        }
        let at = self.src.len();
        let slot = match number {
            Number::Sg => {
                self.push("it", Slot::SubjSg.form(g), "PRON");
                Slot::SubjSg
            }
            Number::Pl => {
                self.push("they", Slot::SubjPl.form(g), "PRON");
                Slot::SubjPl
            }
        };
        self.copula(number);
        self.adjective(rng);
        (at, slot)
    }

    fn finish(self, pronoun: Option<PronounInfo>) -> SynthPair {
        SynthPair { src: self.src, tgt: self.tgt, pos: self.pos, pronoun }
    }
}

fn random_noun(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(0..NOUNS.len())
}

/// A noun of a different gender from `g`.
fn distractor(g: Gender, rng: &mut ChaCha8Rng) -> usize {
    loop {
        let i = random_noun(rng);
        if NOUNS[i].gender != g {
            return i;
        }
    }
}

/// One pair whose pronoun sits `distance` sentences after its antecedent.
pub fn pronoun_pair(distance: usize, number: Number, rng: &mut ChaCha8Rng) -> SynthPair {
    let ante = random_noun(rng);
    let g = NOUNS[ante].gender;
    let mut nouns = vec![];
    if rng.random_bool(0.5) {
        // an earlier noun of the same number but another gender
        nouns.push((distractor(g, rng), number));
    }
    nouns.push((ante, number));
    let mut b = Builder::new();
    if rng.random_bool(0.3) {
        // a leading sentence with a noun of the other number
        let other = if number == Number::Sg { Number::Pl } else { Number::Sg };
        b.noun_clause(&[(random_noun(rng), other)], rng);
        b.func(".");
    }
    b.noun_clause(&nouns, rng);
    if distance == 0 {
        b.func("and");
    } else {
        b.func(".");
        let other = if number == Number::Sg { Number::Pl } else { Number::Sg };
        for _ in 1..distance {
            if rng.random_bool(0.5) {
                // a noun of the other number cannot be the antecedent
                b.noun_clause(&[(random_noun(rng), other)], rng);
            } else {
                b.filler(rng);
            }
            b.func(".");
        }
    }
    let (at, slot) = b.pronoun_clause(g, number, rng);
    b.func(".");
    let word = b.src[at].clone();
    b.finish(Some(PronounInfo { index: at, word, slot, antecedent: g, distance }))
}

/// One pair without pronouns.
pub fn plain_pair(rng: &mut ChaCha8Rng) -> SynthPair {
    let mut b = Builder::new();
    for k in 0..rng.random_range(1..=2) {
        if k > 0 {
            b.func(".");
        }
        if rng.random_bool(0.25) {
            b.filler(rng);
        } else {
            let number = if rng.random_bool(0.3) { Number::Pl } else { Number::Sg };
            let nouns: Vec<_> = (0..rng.random_range(1..=2)).map(|_| (random_noun(rng), number)).collect();
            b.noun_clause(&nouns, rng);
        }
    }
    b.func(".");
    b.finish(None)
}

fn sample_distance(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let u = rng.random::<f64>() * total;
    let bucket = if u < mix[0] {
        0
    } else if u < mix[0] + mix[1] {
        1
    } else {
        2
    };
    match bucket {
        0 => 0,
        1 => 1,
        _ => rng.random_range(2..=MAX_DISTANCE),
    }
}

fn sample_number(plural_rate: f64, rng: &mut ChaCha8Rng) -> Number {
    if rng.random_bool(plural_rate) {
        Number::Pl
    } else {
        Number::Sg
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn make_split(n: usize, sizes: &SynthSizes, rng: &mut ChaCha8Rng) -> Vec<SynthPair> {
    (0..n)
        .map(|_| {
            if rng.random_bool(sizes.pronoun_rate) {
                let d = sample_distance(&sizes.distance_mix, rng);
                let num = sample_number(sizes.plural_rate, rng);
                pronoun_pair(d, num, rng)
            } else {
                plain_pair(rng)
            }
        })
        .collect()
}

/// Contrastive sets with exactly `allocate(n, distance_mix)` items per bucket.
pub fn make_contrastive(n: usize, sizes: &SynthSizes, rng: &mut ChaCha8Rng) -> Vec<ContrastiveSet> {
    let counts = allocate(n, &sizes.distance_mix);
    let mut out = Vec::with_capacity(n);
    for (bucket, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let d = if bucket < 2 { bucket } else { rng.random_range(2..=MAX_DISTANCE) };
            let num = sample_number(sizes.plural_rate, rng);
            let p = pronoun_pair(d, num, rng);
            out.push(contrastive_from(&p));
        }
    }
    out
}

/// Swaps the pronoun for every other form of its slot.
pub fn contrastive_from(p: &SynthPair) -> ContrastiveSet {
    let info = p.pronoun.as_ref().expect("pronoun pair");
    let right = info.slot.form(info.antecedent);
    let contrastive = info
        .slot
        .forms()
        .iter()
        .filter(|&&f| f != right)
        .map(|f| {
            let mut t = p.tgt.clone();
            t[info.index] = f.to_string();
            t.join(" ")
        })
        .collect();
    ContrastiveSet {
        src: p.src_line(),
        reference: p.tgt_line(),
        contrastive,
        distance: info.distance,
        pronoun: info.word.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct SynthTask {
    pub train: Vec<SynthPair>,
    pub dev: Vec<SynthPair>,
    pub test: Vec<SynthPair>,
    pub contrastive: Vec<ContrastiveSet>,
}

pub fn make_synthetic_task(seed: u64, sizes: &SynthSizes) -> SynthTask {
    SynthTask {
        train: make_split(sizes.train, sizes, &mut stream(seed, 1)),
        dev: make_split(sizes.dev, sizes, &mut stream(seed, 2)),
        test: make_split(sizes.test, sizes, &mut stream(seed, 3)),
        contrastive: make_contrastive(sizes.contrastive, sizes, &mut stream(seed, 4)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub sizes: SynthSizes,
    pub pronoun_pairs: BTreeMap<String, usize>,
    pub contrastive_by_distance: BTreeMap<String, usize>,
}

/// Largest antecedent distance generated in the `>1` bucket.
pub const MAX_DISTANCE: usize = 4;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Writes `{split}.src/.tgt`, POS files `{split}.{src,tgt}.pos`, identity
/// alignments `{split}.align`, `contrastive.jsonl`, `dictionary.json` and
/// `synth.json`.
pub fn write_synthetic_task(dir: &Path, seed: u64, sizes: &SynthSizes) -> Result<SynthTask> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let task = make_synthetic_task(seed, sizes);
    let mut pronoun_pairs = BTreeMap::new();
    for (name, split) in SPLITS.iter().zip([&task.train, &task.dev, &task.test]) {
        let src: Vec<String> = split.iter().map(SynthPair::src_line).collect();
        let tgt: Vec<String> = split.iter().map(SynthPair::tgt_line).collect();
        write_lines(&dir.join(format!("{name}.src")), &src)?;
        write_lines(&dir.join(format!("{name}.tgt")), &tgt)?;
        for (side, words) in [("src", true), ("tgt", false)] {
            let rows: Vec<Vec<(&str, &str)>> = split
                .iter()
                .map(|p| {
                    let w = if words { &p.src } else { &p.tgt };
                    w.iter().map(String::as_str).zip(p.pos.iter().copied()).collect()
                })
                .collect();
            write_tag_file(&dir.join(format!("{name}.{side}.pos")), &rows)?;
        }
        let aligns: Vec<Alignment> = split.iter().map(|p| Alignment::identity(p.src.len())).collect();
        write_alignments(&dir.join(format!("{name}.align")), &aligns)?;
        pronoun_pairs.insert(name.to_string(), split.iter().filter(|p| p.pronoun.is_some()).count());
    }
    write_sets(&dir.join("contrastive.jsonl"), &task.contrastive)?;
    std::fs::write(dir.join("dictionary.json"), serde_json::to_string_pretty(&dictionary())?)?;
    let mut by_distance = BTreeMap::new();
    for s in &task.contrastive {
        *by_distance
            .entry(super::contrastive::Bucket::of(s.distance).label().to_string())
            .or_insert(0) += 1;
    }
    let manifest = SynthManifest {
        seed,
        sizes: sizes.clone(),
        pronoun_pairs,
        contrastive_by_distance: by_distance,
    };
    std::fs::write(dir.join("synth.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(task)
}

/// Scores 0 for the rule translation and -1 for anything else.
pub struct OracleScorer;

impl SequenceScorer for OracleScorer {
    fn score(&self, src: &str, targets: &[&str]) -> Result<Vec<f64>> {
        let best = oracle_translate(&crate::text::tokenize(src))?.join(" ");
        Ok(targets.iter().map(|t| if *t == best { 0.0 } else { -1.0 }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::contrastive::{contrastive_eval, Bucket};

    fn small() -> SynthSizes {
        SynthSizes { train: 400, dev: 50, test: 50, contrastive: 101, ..Default::default() }
    }

    #[test]
    fn oracle_reproduces_every_generated_target() {
        let t = make_synthetic_task(7, &small());
        for p in t.train.iter().chain(&t.dev).chain(&t.test) {
            assert_eq!(p.src.len(), p.tgt.len());
            assert_eq!(p.src.len(), p.pos.len());
            assert_eq!(oracle_translate(&p.src).unwrap(), p.tgt, "{}", p.src_line());
            for (w, &tag) in p.src.iter().zip(&p.pos) {
                assert_eq!(pos_tag(w), tag);
            }
        }
    }

    #[test]
    fn reference_pronoun_agrees_with_antecedent() {
        let mut rng = stream(3, 9);
        for d in 0..=MAX_DISTANCE {
            for num in [Number::Sg, Number::Pl] {
                for _ in 0..50 {
                    let p = pronoun_pair(d, num, &mut rng);
                    let info = p.pronoun.as_ref().unwrap();
                    assert_eq!(p.tgt[info.index], info.slot.form(info.antecedent));
                    let dots = p.src[..info.index].iter().rev().take_while(|w| {
                        !matches!(lookup(w), Some(Word::Noun { number, .. }) if number == num)
                    });
                    let sentences = dots.filter(|w| *w == ".").count();
                    assert_eq!(sentences, d, "{}", p.src_line());
                }
            }
        }
    }

    #[test]
    fn distance_histogram_and_oracle_accuracy() {
        let sizes = small();
        let sets = make_synthetic_task(11, &sizes).contrastive;
        let want = allocate(sizes.contrastive, &sizes.distance_mix);
        for (b, w) in Bucket::ALL.iter().zip(want) {
            let got = sets.iter().filter(|s| Bucket::of(s.distance) == *b).count();
            assert_eq!(got, w);
            let exact = sizes.contrastive as f64 * sizes.distance_mix[*b as usize];
            assert!((got as f64 - exact).abs() <= 1.0);
        }
        for s in &sets {
            assert_eq!(s.contrastive.len(), 2);
            assert!(s.contrastive.iter().all(|v| *v != s.reference));
        }
        let r = contrastive_eval(&sets, &OracleScorer).unwrap();
        assert_eq!(r.overall.accuracy, Some(1.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_task(5, &small());
        let b = make_synthetic_task(5, &small());
        let c = make_synthetic_task(6, &small());
        assert_eq!(a.train, b.train);
        assert_eq!(a.contrastive, b.contrastive);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn dictionary_alignment_recovers_identity() {
        let dict = dictionary();
        let t = make_synthetic_task(2, &small());
        for p in &t.test {
            assert_eq!(dictionary_align(&p.src, &p.tgt, &dict), Alignment::identity(p.src.len()));
        }
        // a dropped pronoun stays unaligned
        let src = ["the", "lamp", "is", "red", "and", "it", "is", "old", "."];
        let cand = ["die", "lampe", "ist", "rot", "und", "ist", "alt", "."];
        let a = dictionary_align(&src, &cand, &dict);
        assert!(a.targets_of(5).is_empty());
        assert_eq!(a.targets_of(6), vec![5]);
    }

    #[test]
    fn target_words_are_unambiguous() {
        let mut seen = BTreeSet::new();
        let closed: Vec<&str> = ["der", "die", "das", "den", "ein", "eine", "einen", "er", "es", "ihn", "sie", "jene", "diese"]
            .into_iter()
            .chain(FUNCTION_WORDS.iter().map(|f| f.1))
            .collect();
        for n in &NOUNS {
            for w in [n.de, n.de_pl] {
                assert!(seen.insert(w), "duplicate target noun {w}");
                assert!(!closed.contains(&w));
            }
            assert!(lookup(n.en).is_some() && lookup(n.en_pl).is_some());
        }
        let en: BTreeSet<&str> = NOUNS.iter().flat_map(|n| [n.en, n.en_pl]).collect();
        assert_eq!(en.len(), 2 * NOUNS.len());
    }

    #[test]
    fn allocation_sums() {
        for n in [0, 1, 7, 100, 101, 1000] {
            let c = allocate(n, &[0.4, 0.3, 0.3]);
            assert_eq!(c.iter().sum::<usize>(), n);
        }
    }
}
