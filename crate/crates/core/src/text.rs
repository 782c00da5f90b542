//! Instruction vocabulary, tokenization and the token-level text encoder.
//!
//! The encoder maps a tokenized instruction to channels-first token features
//! `F_T` (`C × L`): learned token embedding plus learned position embedding,
//! followed by one multi-head self-attention layer with a residual connection.
//! PAD keys are masked out of attention, so padding never leaks into content
//! columns.

use crate::error::{Error, Result};
use crate::fusion::{multi_head_cross_attn, AttentionParams};
use crate::io::KvRecord;
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::{Graph, Var};
use rand::Rng;
use std::collections::{BTreeSet, HashMap};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, turns every non-alphanumeric character into a separator and
/// splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every token of the corpus gets an id; ids follow sorted token order so
    /// the result only depends on the set of tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("build_vocab", "empty corpus"));
        }
        let set: BTreeSet<String> = corpus.iter().flat_map(|s| normalize(s.as_ref())).collect();
        let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        tokens.extend(set);
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `token<TAB>id` per line.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut slots: Vec<Option<String>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(ln + 1, "expected token<TAB>id"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::parse(ln + 1, format!("bad id `{id}`")))?;
            if id > 10_000_000 {
                return Err(Error::parse(ln + 1, "id too large"));
            }
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::parse(ln + 1, "token must be non-empty without whitespace"));
            }
            if slots.len() <= id {
                slots.resize(id + 1, None);
            }
            if slots[id].is_some() {
                return Err(Error::parse(ln + 1, format!("duplicate id {id}")));
            }
            slots[id] = Some(tok.to_owned());
        }
        let tokens: Vec<String> = slots
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::parse(0, format!("missing id {i}"))))
            .collect::<Result<_>>()?;
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::parse(0, "ids 0 and 1 must be <pad> and <unk>"));
        }
        let v = Self::from_tokens(tokens);
        if v.ids.len() != v.tokens.len() {
            return Err(Error::parse(0, "duplicate token"));
        }
        Ok(v)
    }
}

/// Tokens padded with PAD or truncated to exactly `len` ids; the strings are
/// the normalized words (`<pad>` for padding).
pub fn tokenize(text: &str, vocab: &Vocabulary, len: usize) -> (Vec<usize>, Vec<String>) {
    let mut words = normalize(text);
    words.truncate(len);
    let mut ids: Vec<usize> = words.iter().map(|w| vocab.id(w)).collect();
    ids.resize(len, PAD);
    words.resize(len, PAD_TOKEN.to_owned());
    (ids, words)
}

/// A question paired with its structured, part-aware instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionRecord {
    pub raw: String,
    pub structured: String,
    pub affordance_id: usize,
    pub affordance_word: String,
    pub part_word: String,
    /// Token position of the focused part inside `structured`.
    pub part_index: usize,
}

impl InstructionRecord {
    pub const KEYS: [&'static str; 6] = [
        "raw",
        "structured",
        "affordance_id",
        "affordance_word",
        "part_word",
        "part_index",
    ];

    pub fn write_kv(&self, rec: &mut KvRecord) {
        rec.push("raw", &self.raw);
        rec.push("structured", &self.structured);
        rec.push("affordance_id", self.affordance_id.to_string());
        rec.push("affordance_word", &self.affordance_word);
        rec.push("part_word", &self.part_word);
        rec.push("part_index", self.part_index.to_string());
    }

    pub fn from_kv(rec: &KvRecord) -> Result<Self> {
        Ok(Self {
            raw: rec.require("raw")?.to_owned(),
            structured: rec.require("structured")?.to_owned(),
            affordance_id: rec.parse("affordance_id")?,
            affordance_word: rec.require("affordance_word")?.to_owned(),
            part_word: rec.require("part_word")?.to_owned(),
            part_index: rec.parse("part_index")?,
        })
    }

    pub fn to_line(&self) -> Result<String> {
        let mut rec = KvRecord::default();
        self.write_kv(&mut rec);
        rec.to_line()
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        Self::from_kv(&KvRecord::parse_line(line, 1)?)
    }

    /// Tokenizes the structured instruction and checks that `part_index`
    /// addresses the part word.
    pub fn encode_structured(&self, vocab: &Vocabulary, len: usize) -> Result<TokenizedText> {
        let (ids, words) = tokenize(&self.structured, vocab, len);
        match words.get(self.part_index) {
            Some(w) if *w == self.part_word && ids[self.part_index] != PAD => Ok(TokenizedText {
                ids,
                part_index: Some(self.part_index),
            }),
            _ => Err(Error::invalid(
                "instruction",
                format!(
                    "part index {} does not address `{}` in `{}`",
                    self.part_index, self.part_word, self.structured
                ),
            )),
        }
    }

    /// Tokenizes the raw question; there is no part anchor.
    pub fn encode_raw(&self, vocab: &Vocabulary, len: usize) -> TokenizedText {
        TokenizedText {
            ids: tokenize(&self.raw, vocab, len).0,
            part_index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub part_index: Option<usize>,
}

impl TokenizedText {
    pub fn keep_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }
}

/// Token-level features inside a graph.
#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `C × L`.
    pub tokens: Var,
    /// `true` for non-PAD positions.
    pub keep: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub position: ParamId,
    pub attention: AttentionParams,
    pub dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab_size: usize,
        dim: usize,
        max_len: usize,
        heads: usize,
    ) -> Result<Self> {
        let embedding = store.add("text.embedding", normal(rng, &[dim, vocab_size], 1.0));
        let position = store.add("text.position", normal(rng, &[dim, max_len], 0.1));
        let attention = AttentionParams::new(store, rng, "text.self_attn", dim, heads)?;
        Ok(Self {
            embedding,
            position,
            attention,
            dim,
            max_len,
            vocab_size,
        })
    }

    /// `F_T = X + MHA(X, X, X)` with `X` = token + position embedding.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, text: &TokenizedText) -> Result<TextFeatures> {
        let len = text.ids.len();
        if len == 0 || len > self.max_len {
            return Err(Error::invalid(
                "encode_text",
                format!("sequence length {len} outside 1..={}", self.max_len),
            ));
        }
        if let Some(&bad) = text.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::invalid(
                "encode_text",
                format!("token id {bad} >= vocabulary size {}", self.vocab_size),
            ));
        }
        let keep = text.keep_mask();
        if !keep.iter().any(|&k| k) {
            return Err(Error::invalid("encode_text", "instruction has no tokens"));
        }
        let emb = g.param(store, self.embedding);
        let tok = g.gather_cols(emb, &text.ids)?;
        let pos_all = g.param(store, self.position);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_cols(pos_all, &positions)?;
        let x = g.add(tok, pos)?;
        let attn = multi_head_cross_attn(g, store, &self.attention, x, x, x, Some(&keep))?;
        let tokens = g.add(x, attn)?;
        Ok(TextFeatures { tokens, keep })
    }
}

/// Column `index` of `F_T`, the part anchor `T_i`; PAD positions are rejected.
pub fn extract_part_embedding(g: &mut Graph, features: &TextFeatures, index: usize) -> Result<Var> {
    match features.keep.get(index) {
        Some(true) => {
            let col = g.gather_cols(features.tokens, &[index])?;
            let c = g.shape(col)[0];
            g.reshape(col, &[c])
        }
        Some(false) => Err(Error::invalid(
            "extract_part_embedding",
            format!("index {index} is a PAD position"),
        )),
        None => Err(Error::invalid(
            "extract_part_embedding",
            format!("index {index} beyond sequence length {}", features.keep.len()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BAG: &str = "A bag consists of body, strap, zipper. For grasp, I should focus on the strap.";

    #[test]
    fn vocab_counts_distinct_tokens() {
        let v = Vocabulary::build(&["one two three four five six seven eight"]).unwrap();
        assert_eq!(v.len(), 10);
    }

    #[test]
    fn vocab_is_idempotent_and_case_folded() {
        let a = Vocabulary::build(&[BAG]).unwrap();
        let b = Vocabulary::build(&[BAG, BAG]).unwrap();
        assert_eq!(a, b);
        let c = Vocabulary::build(&["Bag bag BAG"]).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.contains("bag"));
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty).is_err());
    }

    #[test]
    fn vocab_order_independent() {
        let a = Vocabulary::build(&["x y", "z w"]).unwrap();
        let b = Vocabulary::build(&["z w", "x y"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_tsv_roundtrip() {
        let v = Vocabulary::build(&[BAG]).unwrap();
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\n").is_err());
        assert!(Vocabulary::from_tsv("<pad>\t0\n<unk>\t1\nx\t1\n").is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(&[BAG]).unwrap();
        let (ids, _) = tokenize("", &v, 40);
        assert!(ids.iter().all(|&i| i == PAD));

        let forty = vec!["bag"; 40].join(" ");
        let (ids, _) = tokenize(&forty, &v, 40);
        assert!(ids.iter().all(|&i| i != PAD));
        let (ids, _) = tokenize(&format!("{forty} strap"), &v, 40);
        assert_eq!(ids.len(), 40);

        let (ids, words) = tokenize("A bag consists of body, strap, zipper.", &v, 40);
        assert_eq!(ids.iter().filter(|&&i| i != PAD).count(), 7);
        assert_eq!(ids.iter().filter(|&&i| i == PAD).count(), 33);
        assert_eq!(words[6], "zipper");

        let (ids, _) = tokenize("grip", &v, 4);
        assert_eq!(ids[0], UNK);
    }

    #[test]
    fn record_line_roundtrip() {
        let r = InstructionRecord {
            raw: "Where should you grasp the bag?".into(),
            structured: BAG.into(),
            affordance_id: 0,
            affordance_word: "grasp".into(),
            part_word: "strap".into(),
            part_index: 14,
        };
        let line = r.to_line().unwrap();
        assert_eq!(InstructionRecord::parse_line(&line).unwrap(), r);
    }

    fn encoder(vocab: usize, dim: usize, len: usize) -> (ParamStore, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &mut rng, vocab, dim, len, 2).unwrap();
        (store, enc)
    }

    #[test]
    fn pad_tail_does_not_change_content_columns() {
        let v = Vocabulary::build(&[BAG]).unwrap();
        let (store, enc) = encoder(v.len(), 8, 40);
        let short = TokenizedText { ids: tokenize(BAG, &v, 20).0, part_index: None };
        let long = TokenizedText { ids: tokenize(BAG, &v, 40).0, part_index: None };
        let mut g = Graph::new();
        let a = enc.encode(&mut g, &store, &short).unwrap();
        let b = enc.encode(&mut g, &store, &long).unwrap();
        let (ta, tb) = (g.value(a.tokens).clone(), g.value(b.tokens).clone());
        for col in 0..15 {
            let (x, y) = (ta.column(col), tb.column(col));
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() <= 1e-12, "column {col}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn encode_rejects_out_of_vocab_ids_and_empty_text() {
        let (store, enc) = encoder(5, 4, 6);
        let mut g = Graph::new();
        let bad = TokenizedText { ids: vec![2, 9, 0, 0, 0, 0], part_index: None };
        assert!(enc.encode(&mut g, &store, &bad).is_err());
        let empty = TokenizedText { ids: vec![0; 6], part_index: None };
        assert!(enc.encode(&mut g, &store, &empty).is_err());
    }

    #[test]
    fn part_embedding_is_the_indexed_column() {
        let v = Vocabulary::build(&[BAG]).unwrap();
        let (store, enc) = encoder(v.len(), 8, 20);
        let rec = InstructionRecord {
            raw: String::new(),
            structured: BAG.into(),
            affordance_id: 0,
            affordance_word: "grasp".into(),
            part_word: "strap".into(),
            part_index: 14,
        };
        let text = rec.encode_structured(&v, 20).unwrap();
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &text).unwrap();
        let t = extract_part_embedding(&mut g, &f, 14).unwrap();
        assert_eq!(g.value(t).data(), g.value(f.tokens).column(14).as_slice());
        let first = extract_part_embedding(&mut g, &f, 0).unwrap();
        assert_eq!(g.value(first).data(), g.value(f.tokens).column(0).as_slice());
        assert!(extract_part_embedding(&mut g, &f, 17).is_err());

        let mut wrong = rec.clone();
        wrong.part_index = 4;
        assert!(wrong.encode_structured(&v, 20).is_err());
    }
}
