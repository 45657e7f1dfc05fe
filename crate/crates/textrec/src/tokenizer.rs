//! Trainable byte-level BPE tokenizer.
//!
//! The base alphabet is the 256 byte values plus three reserved specials, so
//! any UTF-8 string round-trips losslessly and arbitrary product titles have
//! zero OOV. Merges never involve a token containing a newline byte; `\n` is
//! therefore always a token of its own and every byte offset right after a
//! newline is guaranteed to be a token boundary. The prompt renderer relies
//! on this to map the output-region byte offset to a loss-mask token index.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const NUM_SPECIALS: usize = 3;
/// Specials + 256 byte symbols.
pub const BASE_VOCAB: usize = NUM_SPECIALS + 256;

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    /// id -> byte string; specials are empty.
    vocab: Vec<Vec<u8>>,
    /// Learned merges in order; merge k creates id BASE_VOCAB + k.
    merges: Vec<(u32, u32)>,
    merge_map: HashMap<(u32, u32), u32>,
}

fn byte_id(b: u8) -> u32 {
    NUM_SPECIALS as u32 + b as u32
}

impl TokenizerModel {
    fn base() -> Self {
        let mut vocab: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIALS];
        for b in 0..=255u8 {
            vocab.push(vec![b]);
        }
        TokenizerModel {
            vocab,
            merges: Vec::new(),
            merge_map: HashMap::new(),
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) {
        let mut bytes = self.vocab[left as usize].clone();
        bytes.extend_from_slice(&self.vocab[right as usize]);
        let id = self.vocab.len() as u32;
        self.vocab.push(bytes);
        self.merges.push((left, right));
        self.merge_map.insert((left, right), id);
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Encode text by mapping bytes to base ids and applying merges in
    /// learned order (lowest-rank applicable pair first, all occurrences).
    pub fn encode(&self, text: &str, add_bos: bool, add_eos: bool) -> Result<Vec<u32>> {
        let mut ids: Vec<u32> = text.bytes().map(byte_id).collect();
        self.apply_merges(&mut ids);
        let mut out = Vec::with_capacity(ids.len() + 2);
        if add_bos {
            out.push(BOS_ID);
        }
        out.extend_from_slice(&ids);
        if add_eos {
            out.push(EOS_ID);
        }
        Ok(out)
    }

    fn apply_merges(&self, ids: &mut Vec<u32>) {
        loop {
            let mut best_rank: Option<u32> = None;
            for window in ids.windows(2) {
                if let Some(&merged) = self.merge_map.get(&(window[0], window[1])) {
                    let rank = merged - BASE_VOCAB as u32;
                    if best_rank.is_none_or(|r| rank < r) {
                        best_rank = Some(rank);
                    }
                }
            }
            let Some(rank) = best_rank else { break };
            let (left, right) = self.merges[rank as usize];
            let merged = BASE_VOCAB as u32 + rank;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }

    /// Decode ids back to text. Special ids are stripped; out-of-range ids
    /// are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab.len() {
                return Err(Error::data(format!(
                    "token id {id} out of range (vocab size {})",
                    self.vocab.len()
                )));
            }
            if id < NUM_SPECIALS as u32 {
                continue;
            }
            bytes.extend_from_slice(&self.vocab[id as usize]);
        }
        String::from_utf8(bytes)
            .map_err(|_| Error::data("decoded bytes are not valid UTF-8".to_string()))
    }

    /// Index of the first token of `encode(text)` (no specials) whose byte
    /// span begins at `byte_offset`. Errors if the offset is not on a token
    /// boundary, which signals a tokenizer/template mismatch.
    pub fn offset_to_token_index(&self, text: &str, byte_offset: usize) -> Result<usize> {
        let ids = self.encode(text, false, false)?;
        let mut cursor = 0usize;
        for (index, &id) in ids.iter().enumerate() {
            if cursor == byte_offset {
                return Ok(index);
            }
            if cursor > byte_offset {
                break;
            }
            cursor += self.vocab[id as usize].len();
        }
        if cursor == byte_offset {
            return Ok(ids.len());
        }
        Err(Error::data(format!(
            "byte offset {byte_offset} is not on a token boundary"
        )))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TokenizerDoc {
            vocab_size: self.vocab.len(),
            merges: self
                .merges
                .iter()
                .map(|&(l, r)| {
                    [
                        bytes_to_display(&self.vocab[l as usize]),
                        bytes_to_display(&self.vocab[r as usize]),
                    ]
                })
                .collect(),
            merge_ids: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            specials: Specials::default(),
        };
        let value = serde_json::to_value(&doc)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: TokenizerDoc = serde_json::from_str(json)?;
        if doc.specials != Specials::default() {
            return Err(Error::data(
                "tokenizer: special ids must be pad=0, bos=1, eos=2".to_string(),
            ));
        }
        if doc.merge_ids.len() != doc.merges.len() {
            return Err(Error::data(
                "tokenizer: merges and merge_ids length mismatch".to_string(),
            ));
        }
        let mut model = TokenizerModel::base();
        for (k, (&[left, right], strings)) in
            doc.merge_ids.iter().zip(doc.merges.iter()).enumerate()
        {
            let size = model.vocab.len() as u32;
            if left >= size || right >= size || left < NUM_SPECIALS as u32 || right < NUM_SPECIALS as u32 {
                return Err(Error::data(format!(
                    "tokenizer: merge {k} references invalid token ids ({left}, {right})"
                )));
            }
            if bytes_to_display(&model.vocab[left as usize]) != strings[0]
                || bytes_to_display(&model.vocab[right as usize]) != strings[1]
            {
                return Err(Error::data(format!(
                    "tokenizer: merge {k} byte strings disagree with merge ids"
                )));
            }
            model.push_merge(left, right);
        }
        if model.vocab.len() != doc.vocab_size {
            return Err(Error::data(format!(
                "tokenizer: declared vocab_size {} but merges produce {}",
                doc.vocab_size,
                model.vocab.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct Specials {
    pad: u32,
    bos: u32,
    eos: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: PAD_ID,
            bos: BOS_ID,
            eos: EOS_ID,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerDoc {
    vocab_size: usize,
    /// Merge pairs as byte strings, one code point per byte (U+0000..U+00FF).
    merges: Vec<[String; 2]>,
    /// The same merges as token-id pairs; disambiguates tokens that happen to
    /// share identical byte strings.
    merge_ids: Vec<[u32; 2]>,
    specials: Specials,
}

fn bytes_to_display(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| char::from(b)).collect()
}

/// Train by greedy highest-frequency pair merging until `vocab_size` is
/// reached or no pair occurs at least twice. Frequency ties break on the
/// lexicographically smaller (left bytes, right bytes) pair.
pub fn train_tokenizer<I, S>(corpus: I, vocab_size: usize) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < BASE_VOCAB {
        return Err(Error::config(format!(
            "vocab_size must be at least {BASE_VOCAB} (256 bytes + 3 specials), got {vocab_size}"
        )));
    }
    let mut model = TokenizerModel::base();
    let mut seqs: Vec<Vec<u32>> = corpus
        .into_iter()
        .map(|text| text.as_ref().bytes().map(byte_id).collect())
        .filter(|seq: &Vec<u32>| seq.len() >= 2)
        .collect();

    // `true` for tokens containing a newline byte; such tokens never merge.
    let mut barrier: Vec<bool> = model
        .vocab
        .iter()
        .map(|bytes| bytes.contains(&b'\n'))
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut locations: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (idx, seq) in seqs.iter().enumerate() {
        for window in seq.windows(2) {
            let pair = (window[0], window[1]);
            if barrier[pair.0 as usize] || barrier[pair.1 as usize] {
                continue;
            }
            *counts.entry(pair).or_insert(0) += 1;
            locations.entry(pair).or_default().insert(idx);
        }
    }

    while model.vocab.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|&(_, &count)| count >= 2)
            .map(|(&(l, r), &count)| {
                (
                    count,
                    &model.vocab[l as usize],
                    &model.vocab[r as usize],
                    l,
                    r,
                )
            })
            // highest count, then lexicographically smaller byte pair, then ids
            .min_by(|a, b| {
                b.0.cmp(&a.0)
                    .then_with(|| a.1.cmp(b.1))
                    .then_with(|| a.2.cmp(b.2))
                    .then_with(|| (a.3, a.4).cmp(&(b.3, b.4)))
            });
        let Some((_, _, _, left, right)) = best else {
            break;
        };
        let pair = (left, right);
        let merged = model.vocab.len() as u32;
        model.push_merge(left, right);
        barrier.push(false); // merges never contain a newline

        let mut affected: Vec<usize> = locations
            .remove(&pair)
            .map(|set| set.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for idx in affected {
            let seq = &mut seqs[idx];
            if !seq.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue; // stale location entry
            }
            // Retract this sequence's pair contributions, rewrite, re-add.
            for window in seq.windows(2) {
                let p = (window[0], window[1]);
                if barrier[p.0 as usize] || barrier[p.1 as usize] {
                    continue;
                }
                if let Some(c) = counts.get_mut(&p) {
                    *c -= 1;
                    if *c <= 0 {
                        counts.remove(&p);
                    }
                }
            }
            let mut rewritten = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
                    rewritten.push(merged);
                    i += 2;
                } else {
                    rewritten.push(seq[i]);
                    i += 1;
                }
            }
            *seq = rewritten;
            for window in seq.windows(2) {
                let p = (window[0], window[1]);
                if barrier[p.0 as usize] || barrier[p.1 as usize] {
                    continue;
                }
                *counts.entry(p).or_insert(0) += 1;
                locations.entry(p).or_default().insert(idx);
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_byte_corpus_learns_the_obvious_merge() {
        let model = train_tokenizer(["aaaa"], 260).unwrap();
        assert_eq!(model.merges().len(), 1);
        assert_eq!(model.merges()[0], (byte_id(b'a'), byte_id(b'a')));
        assert_eq!(model.vocab_size(), 260);
    }

    #[test]
    fn empty_corpus_keeps_base_vocabulary() {
        let model = train_tokenizer(Vec::<String>::new(), 300).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_size(), BASE_VOCAB);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the bat and the rat", "a cat, a hat"];
        let one = train_tokenizer(corpus, 300).unwrap();
        let two = train_tokenizer(corpus, 300).unwrap();
        assert_eq!(one.merges(), two.merges());
    }

    #[test]
    fn vocab_size_below_minimum_is_rejected() {
        assert!(train_tokenizer(["abc"], BASE_VOCAB - 1).is_err());
    }

    #[test]
    fn round_trip_title() {
        let model = train_tokenizer(["Pinocchio (1940)", "Pinocchio (1940)"], 280).unwrap();
        let ids = model.encode("Pinocchio (1940)", false, false).unwrap();
        assert_eq!(model.decode(&ids).unwrap(), "Pinocchio (1940)");
    }

    #[test]
    fn empty_string_encodings() {
        let model = TokenizerModel::base();
        assert!(model.encode("", false, false).unwrap().is_empty());
        assert_eq!(model.encode("", true, true).unwrap(), vec![BOS_ID, EOS_ID]);
    }

    #[test]
    fn decode_strips_specials() {
        let model = train_tokenizer(["hello"], 262).unwrap();
        let ids = model.encode("hello", true, true).unwrap();
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert_eq!(model.decode(&ids).unwrap(), "hello");
    }

    #[test]
    fn out_of_range_id_is_error() {
        let model = TokenizerModel::base();
        assert!(model.decode(&[BASE_VOCAB as u32 + 5]).is_err());
    }

    #[test]
    fn specials_never_appear_for_plain_text() {
        let model = train_tokenizer(["some plain text"], 280).unwrap();
        let ids = model.encode("some plain text", false, false).unwrap();
        assert!(ids.iter().all(|&id| id >= NUM_SPECIALS as u32));
    }

    #[test]
    fn offset_origin_and_end() {
        let model = train_tokenizer(["abcabc"], 264).unwrap();
        let text = "abcabc";
        assert_eq!(model.offset_to_token_index(text, 0).unwrap(), 0);
        let ids = model.encode(text, false, false).unwrap();
        assert_eq!(
            model.offset_to_token_index(text, text.len()).unwrap(),
            ids.len()
        );
    }

    #[test]
    fn offset_inside_a_token_is_error() {
        let model = train_tokenizer(["zzzz zzzz zzzz"], 270).unwrap();
        // "zz" is merged, so offset 1 falls inside a token
        let ids = model.encode("zzzz", false, false).unwrap();
        assert!(ids.len() < 4);
        assert!(model.offset_to_token_index("zzzz", 1).is_err());
    }

    #[test]
    fn newline_is_always_a_merge_barrier() {
        let corpus = vec!["ab\nab\nab\nab", "ab\nab\nab\nab", "\n\n\n\n\n\n"];
        let model = train_tokenizer(corpus, 400).unwrap();
        for id in 0..model.vocab_size() as u32 {
            let bytes = model.token_bytes(id).unwrap();
            if bytes.contains(&b'\n') {
                assert_eq!(bytes.len(), 1, "token {id} crosses a newline: {bytes:?}");
            }
        }
    }

    #[test]
    fn rendered_example_offset_marks_the_output_tokens() {
        use crate::prompt::{render_for_training, FormattedExample};
        let example = FormattedExample {
            instruction: "Given the movie viewing habits, what is the most probable movie they will choose to watch next?".into(),
            input: "Pinocchio (1940), Legends of the Fall (1994), Quiz Show (1994)".into(),
            output: "In the Line of Fire (1993)".into(),
            user_id: "u".into(),
            template_id: 0,
        };
        let (text, offset) = render_for_training(&example);
        let model = train_tokenizer([text.as_str(), "In the Line of Fire (1993)"], 320).unwrap();
        let index = model.offset_to_token_index(&text, offset).unwrap();
        let ids = model.encode(&text, false, false).unwrap();
        let tail = model.decode(&ids[index..]).unwrap();
        assert_eq!(tail, "In the Line of Fire (1993)");
        // The output-region tokens are exactly the standalone encoding of the
        // output text: the trie and the loss mask depend on this.
        let standalone = model.encode(&example.output, false, false).unwrap();
        assert_eq!(&ids[index..], &standalone[..]);
    }

    #[test]
    fn json_round_trip_preserves_behavior() {
        let corpus = ["the quick brown fox", "the quick brown fox jumps", "quick, quick"];
        let model = train_tokenizer(corpus, 300).unwrap();
        let json = model.to_json().unwrap();
        let reloaded = TokenizerModel::from_json(&json).unwrap();
        assert_eq!(model.merges(), reloaded.merges());
        for text in ["the quick brown fox", "unrelated text!"] {
            assert_eq!(
                model.encode(text, true, true).unwrap(),
                reloaded.encode(text, true, true).unwrap()
            );
        }
    }

    #[test]
    fn corrupt_json_is_rejected() {
        let model = train_tokenizer(["abab"], 262).unwrap();
        // "abab" admits exactly one merge: (a,b) twice, then no pair repeats.
        assert_eq!(model.vocab_size(), BASE_VOCAB + 1);
        let json = model.to_json().unwrap();
        let tampered = json.replace(
            &format!("\"vocab_size\": {}", BASE_VOCAB + 1),
            "\"vocab_size\": 9000",
        );
        assert_ne!(json, tampered);
        assert!(TokenizerModel::from_json(&tampered).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_arbitrary_unicode(text in "\\PC{0,60}") {
            let model = train_tokenizer(["shared training text", "more text"], 280).unwrap();
            let ids = model.encode(&text, true, true).unwrap();
            proptest::prop_assert_eq!(model.decode(&ids).unwrap(), text);
        }
    }
}
