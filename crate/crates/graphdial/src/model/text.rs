//! Whitespace tokenizer with a committed vocabulary, and the token layout
//! that positions special tokens and the gather/scatter index maps.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
/// First id assigned to a corpus word.
pub const FIRST_WORD: usize = 5;

/// Lowercased whitespace vocabulary built once from the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabWords", into = "VocabWords")]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabWords {
    words: Vec<String>,
}

impl From<VocabWords> for Vocabulary {
    fn from(v: VocabWords) -> Self {
        Vocabulary::from_words(v.words)
    }
}

impl From<Vocabulary> for VocabWords {
    fn from(v: Vocabulary) -> Self {
        VocabWords { words: v.words }
    }
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for text in texts {
            for word in text.split_whitespace() {
                set.insert(word.to_lowercase());
            }
        }
        Vocabulary::from_words(set.into_iter().collect())
    }

    fn from_words(mut words: Vec<String>) -> Self {
        words.sort_unstable();
        words.dedup();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD + i))
            .collect();
        Vocabulary { words, index }
    }

    /// Total id space including the five special tokens.
    pub fn len(&self) -> usize {
        FIRST_WORD + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn token_string(&self, id: usize) -> &str {
        match id {
            PAD => "[PAD]",
            UNK => "[UNK]",
            CLS => "[CLS]",
            SEP => "[SEP]",
            MASK => "[MASK]",
            _ => &self.words[id - FIRST_WORD],
        }
    }
}

/// Index maps of one assembled input: where the special tokens sit, which
/// span holds the current question, and which separators represent rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    /// Text token ids, starting with `[CLS]` and ending with `[SEP]`.
    pub tokens: Vec<usize>,
    /// Positions of every `[SEP]`.
    pub sep_indices: Vec<usize>,
    /// `(s_q, N_q)`: start and length of the current question span.
    pub question_span: (usize, usize),
    /// The caption's terminating separator plus one separator per completed
    /// round kept in the window; these rows feed the history graph.
    pub round_sep_indices: Vec<usize>,
    /// 1-based indices of the completed rounds that survived truncation.
    pub kept_rounds: Vec<usize>,
    /// Number of image regions (image slots excluding `[IMG]`).
    pub num_regions: usize,
}

impl TokenLayout {
    pub fn cls_index(&self) -> usize {
        0
    }

    pub fn text_len(&self) -> usize {
        self.tokens.len()
    }

    /// Image-stream slot count: `[IMG]` plus the regions.
    pub fn image_slots(&self) -> usize {
        self.num_regions + 1
    }

    /// Region rows of the image stream (the `[IMG]` slot is excluded).
    pub fn idx_v(&self) -> Vec<usize> {
        (1..=self.num_regions).collect()
    }

    /// Current-question token rows of the text stream.
    pub fn idx_q(&self) -> Vec<usize> {
        let (s, n) = self.question_span;
        (s..s + n).collect()
    }

    /// Round-separator rows of the text stream.
    pub fn idx_h(&self) -> &[usize] {
        &self.round_sep_indices
    }

    /// Positions eligible for token masking: plain words only, never
    /// `[CLS]`/`[SEP]` (and there is no `[IMG]` in the text stream).
    pub fn maskable_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= FIRST_WORD || t == UNK)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assembles `[CLS] C [SEP] Q1 [SEP] A1 [SEP] ... Qt [SEP] A~t [SEP]` and
/// records the index maps. On overflow the oldest completed rounds are
/// dropped first, then the caption is shortened; the current question and
/// candidate answer are never cut.
pub fn tokenize_and_layout(
    vocab: &Vocabulary,
    caption: &str,
    completed_rounds: &[(String, String)],
    current_question: &str,
    candidate_answer: &str,
    num_regions: usize,
    max_text_tokens: usize,
) -> Result<TokenLayout> {
    let mut cap = vocab.tokenize(caption);
    let rounds: Vec<(Vec<usize>, Vec<usize>)> = completed_rounds
        .iter()
        .map(|(q, a)| (vocab.tokenize(q), vocab.tokenize(a)))
        .collect();
    let cur_q = vocab.tokenize(current_question);
    let cand = vocab.tokenize(candidate_answer);
    if cur_q.is_empty() {
        return Err(Error::EmptyInput("current question has no tokens"));
    }
    if cand.is_empty() {
        return Err(Error::EmptyInput("candidate answer has no tokens"));
    }

    // [CLS] cap [SEP] ... cur_q [SEP] cand [SEP]
    let fixed = 1 + cap.len() + 1 + cur_q.len() + 1 + cand.len() + 1;
    let round_len = |r: &(Vec<usize>, Vec<usize>)| r.0.len() + 1 + r.1.len() + 1;
    let mut total = fixed + rounds.iter().map(round_len).sum::<usize>();
    let mut first_round = 0;
    while total > max_text_tokens && first_round < rounds.len() {
        total -= round_len(&rounds[first_round]);
        first_round += 1;
    }
    if total > max_text_tokens {
        let overflow = total - max_text_tokens;
        if overflow >= cap.len() {
            return Err(Error::InvalidConfig(format!(
                "current round alone exceeds the {max_text_tokens}-token window"
            )));
        }
        cap.truncate(cap.len() - overflow);
    }

    let mut tokens = Vec::with_capacity(total.min(max_text_tokens));
    let mut sep_indices = Vec::new();
    let mut round_sep_indices = Vec::new();

    tokens.push(CLS);
    tokens.extend_from_slice(&cap);
    sep_indices.push(tokens.len());
    round_sep_indices.push(tokens.len());
    tokens.push(SEP);

    let mut kept_rounds = Vec::new();
    for (i, (q, a)) in rounds.iter().enumerate().skip(first_round) {
        kept_rounds.push(i + 1);
        tokens.extend_from_slice(q);
        sep_indices.push(tokens.len());
        tokens.push(SEP);
        tokens.extend_from_slice(a);
        sep_indices.push(tokens.len());
        round_sep_indices.push(tokens.len());
        tokens.push(SEP);
    }

    let s_q = tokens.len();
    tokens.extend_from_slice(&cur_q);
    sep_indices.push(tokens.len());
    tokens.push(SEP);
    tokens.extend_from_slice(&cand);
    sep_indices.push(tokens.len());
    tokens.push(SEP);

    debug_assert!(tokens.len() <= max_text_tokens);
    Ok(TokenLayout {
        tokens,
        sep_indices,
        question_span: (s_q, cur_q.len()),
        round_sep_indices,
        kept_rounds,
        num_regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build([
            "a cat sits on the mat",
            "is the cat black",
            "yes it is",
            "how many cats",
            "two",
            "what color",
            "black and white",
        ])
    }

    #[test]
    fn vocabulary_is_sorted_and_stable() {
        let v = vocab();
        assert!(v.len() > FIRST_WORD);
        assert_eq!(v.id("CAT"), v.id("cat"));
        assert_eq!(v.id("zebra"), UNK);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("cat"), v.id("cat"));
    }

    #[test]
    fn first_round_layout() {
        let v = vocab();
        let layout = tokenize_and_layout(&v, "a cat sits", &[], "is the cat black", "yes", 3, 64)
            .unwrap();
        // [CLS] a cat sits [SEP] is the cat black [SEP] yes [SEP]
        assert_eq!(layout.tokens.len(), 12);
        assert_eq!(layout.tokens[0], CLS);
        assert_eq!(layout.round_sep_indices, vec![4]);
        assert_eq!(layout.question_span, (5, 4));
        assert_eq!(layout.idx_q(), vec![5, 6, 7, 8]);
        assert_eq!(layout.idx_v(), vec![1, 2, 3]);
        assert_eq!(layout.sep_indices, vec![4, 9, 11]);
        assert!(layout.kept_rounds.is_empty());
    }

    #[test]
    fn round_separator_count_equals_round_index() {
        let v = vocab();
        let rounds = vec![
            ("is the cat black".to_string(), "yes it is".to_string()),
            ("how many cats".to_string(), "two".to_string()),
        ];
        let layout =
            tokenize_and_layout(&v, "a cat sits", &rounds, "what color", "black and white", 3, 64)
                .unwrap();
        // t = 3: caption separator plus one per completed round
        assert_eq!(layout.round_sep_indices.len(), 3);
        assert_eq!(layout.kept_rounds, vec![1, 2]);
        // question span covers exactly the current question
        let (s, n) = layout.question_span;
        assert_eq!(n, 2);
        for (k, idx) in (s..s + n).enumerate() {
            assert_eq!(layout.tokens[idx], v.tokenize("what color")[k]);
        }
        // index maps are disjoint
        let idx_q = layout.idx_q();
        for h in layout.idx_h() {
            assert!(!idx_q.contains(h));
        }
    }

    #[test]
    fn truncation_drops_oldest_rounds_first() {
        let v = vocab();
        let rounds = vec![
            ("is the cat black".to_string(), "yes it is".to_string()),
            ("how many cats".to_string(), "two".to_string()),
        ];
        // fixed part: 1 + 3 + 1 + 2 + 1 + 3 + 1 = 12; round1 = 9, round2 = 6
        let layout = tokenize_and_layout(
            &v,
            "a cat sits",
            &rounds,
            "what color",
            "black and white",
            3,
            20,
        )
        .unwrap();
        assert_eq!(layout.kept_rounds, vec![2]);
        assert!(layout.tokens.len() <= 20);
        // current question/answer survive
        let (s, n) = layout.question_span;
        assert_eq!(&layout.tokens[s..s + n], v.tokenize("what color").as_slice());
    }

    #[test]
    fn truncation_falls_back_to_caption() {
        let v = vocab();
        let layout = tokenize_and_layout(
            &v,
            "a cat sits on the mat",
            &[],
            "is the cat black",
            "yes",
            2,
            13,
        )
        .unwrap();
        // caption shortened from 6 tokens to 4
        assert_eq!(layout.tokens.len(), 13);
        assert_eq!(layout.round_sep_indices, vec![5]);
        let err = tokenize_and_layout(&v, "a", &[], "is the cat black very long", "x", 2, 8);
        assert!(err.is_err());
    }

    #[test]
    fn maskable_positions_exclude_specials() {
        let v = vocab();
        let layout =
            tokenize_and_layout(&v, "a cat", &[], "is the cat black", "yes", 2, 64).unwrap();
        let maskable = layout.maskable_positions();
        for &p in &maskable {
            assert!(layout.tokens[p] >= FIRST_WORD || layout.tokens[p] == UNK);
        }
        for sep in &layout.sep_indices {
            assert!(!maskable.contains(sep));
        }
        assert!(!maskable.contains(&0));
    }
}
