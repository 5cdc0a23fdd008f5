use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;

const RESERVED: [&str; 3] = ["<unk>", "<bos>", "<pad>"];
pub const OPTION_LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

/// Renders the question and its five options into the single text the
/// classifier reads:
/// `Question: {q} Options: A. {o1} B. {o2} C. {o3} D. {o4} E. {o5}`.
pub fn render_prompt(question: &str, options: &[String]) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::Input("question is empty".into()));
    }
    if options.len() != 5 {
        return Err(Error::Input(format!("expected 5 options, got {}", options.len())));
    }
    let mut s = format!("Question: {question} Options:");
    for (letter, opt) in OPTION_LETTERS.iter().zip(options) {
        write!(s, " {letter}. {opt}").unwrap();
    }
    Ok(s)
}

/// Text for one candidate answer, scored on its own by the matching head.
pub fn render_option(option: &str) -> String {
    format!("Answer: {option}")
}

/// Lower-cases and splits into runs of alphanumerics; every other
/// non-whitespace character is a token by itself.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Word-level vocabulary with reserved ids `0 = <unk>`, `1 = <bos>`,
/// `2 = <pad>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary of at most `capacity` entries (reserved ids
    /// included) from the most frequent words in `texts`; frequency ties are
    /// broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, capacity: usize) -> Result<Self> {
        if capacity < RESERVED.len() {
            return Err(Error::Input(format!("vocabulary capacity {capacity} is below the 3 reserved ids")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        for r in RESERVED {
            counts.remove(r);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(capacity)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!("id {id} out of sequence, expected {}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "vocabulary must start with <unk>, <bos>, <pad>".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// Token ids with a validity mask. Always starts with `<bos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Input(format!("{} ids but {} mask entries", ids.len(), mask.len())));
        }
        if ids.first() != Some(&BOS_ID) {
            return Err(Error::Input("token sequence must start with <bos>".into()));
        }
        Ok(Self { ids, mask })
    }

    /// Encodes `words` as `<bos> w1 w2 ...`, truncated or padded to `len`.
    pub fn encode(vocab: &Vocab, words: &[String], len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("sequence length must be positive".into()));
        }
        let mut ids: Vec<u32> = std::iter::once(BOS_ID)
            .chain(words.iter().map(|w| vocab.id(w)))
            .take(len)
            .collect();
        let valid = ids.len();
        ids.resize(len, PAD_ID);
        let mask = (0..len).map(|i| i < valid).collect();
        Ok(Self { ids, mask })
    }

    /// Overwrites one id without touching the mask.
    pub fn with_id(mut self, pos: usize, id: u32) -> Self {
        self.ids[pos] = id;
        self
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Tokenizes a question with its five options into a fixed-length sequence.
pub fn tokenize(vocab: &Vocab, question: &str, options: &[String], max_seq_len: usize) -> Result<TokenSequence> {
    let text = render_prompt(question, options)?;
    TokenSequence::encode(vocab, &split_words(&text), max_seq_len)
}

/// Tokenizes a single option for the matching head.
pub fn tokenize_option(vocab: &Vocab, option: &str, len: usize) -> Result<TokenSequence> {
    TokenSequence::encode(vocab, &split_words(&render_option(option)), len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(xs: [&str; 5]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            split_words("Question: How many?  A. 7"),
            ["question", ":", "how", "many", "?", "a", ".", "7"]
        );
    }

    #[test]
    fn figure_one_prompt() {
        let options = opts(["7", "8", "1", "4", "9"]);
        let q = "Answer the question in the figure.";
        let text = render_prompt(q, &options).unwrap();
        assert_eq!(
            text,
            "Question: Answer the question in the figure. Options: A. 7 B. 8 C. 1 D. 4 E. 9"
        );
        let vocab = Vocab::build([text.as_str()], 512).unwrap();
        let seq = tokenize(&vocab, q, &options, 64).unwrap();
        assert_eq!(seq.ids()[0], BOS_ID);
        assert_eq!(vocab.token(seq.ids()[1]), Some("question"));
        assert_eq!(vocab.token(seq.ids()[2]), Some(":"));
        let words = split_words(&text);
        assert_eq!(seq.valid_positions().len(), words.len() + 1);
        assert!(seq.ids()[1..=words.len()].iter().all(|&id| id != UNK_ID));
    }

    #[test]
    fn deterministic() {
        let vocab = Vocab::build(["how many squares"], 64).unwrap();
        let o = opts(["1", "2", "3", "4", "5"]);
        assert_eq!(
            tokenize(&vocab, "how many squares", &o, 32).unwrap(),
            tokenize(&vocab, "how many squares", &o, 32).unwrap()
        );
    }

    #[test]
    fn empty_option_keeps_five_slots() {
        let o = opts(["1", "2", "", "4", "5"]);
        let text = render_prompt("q?", &o).unwrap();
        let vocab = Vocab::build([text.as_str()], 64).unwrap();
        let seq = tokenize(&vocab, "q?", &o, 32).unwrap();
        let valid = seq.valid_positions();
        // Letters a..e all present.
        let letters: Vec<_> = valid
            .iter()
            .filter_map(|&i| vocab.token(seq.ids()[i]))
            .filter(|t| ["a", "b", "c", "d", "e"].contains(t))
            .collect();
        assert_eq!(letters, ["a", "b", "c", "d", "e"]);
        assert!(valid.iter().all(|&i| seq.ids()[i] != UNK_ID));
        for (i, &m) in seq.mask().iter().enumerate() {
            if !m {
                assert_eq!(seq.ids()[i], PAD_ID);
            }
        }
    }

    #[test]
    fn wrong_option_count_is_input_error() {
        let vocab = Vocab::build(["x"], 16).unwrap();
        let four = opts(["1", "2", "3", "4", "5"])[..4].to_vec();
        assert!(matches!(tokenize(&vocab, "q", &four, 16), Err(Error::Input(_))));
        assert!(matches!(tokenize(&vocab, " ", &opts(["1"; 5]), 16), Err(Error::Input(_))));
    }

    #[test]
    fn oov_maps_to_unk_and_truncation_keeps_bos() {
        let vocab = Vocab::build(["alpha"], 16).unwrap();
        let seq = TokenSequence::encode(&vocab, &["alpha".into(), "beta".into(), "alpha".into()], 3).unwrap();
        assert_eq!(seq.ids(), &[BOS_ID, vocab.id("alpha"), UNK_ID]);
        assert!(seq.mask().iter().all(|&m| m));
    }

    #[test]
    fn vocab_capacity_and_tie_break() {
        let vocab = Vocab::build(["b a c c"], 5).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.token(3), Some("c"));
        assert_eq!(vocab.token(4), Some("a"));
        assert_eq!(vocab.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let vocab = Vocab::build(["how many red squares ?"], 64).unwrap();
        let tsv = vocab.to_tsv();
        assert!(tsv.starts_with("<unk>\t0\n<bos>\t1\n<pad>\t2\n"));
        assert_eq!(Vocab::from_tsv(&tsv, Path::new("v.tsv")).unwrap(), vocab);
        assert!(Vocab::from_tsv("x\t0\n", Path::new("v.tsv")).is_err());
    }
}
