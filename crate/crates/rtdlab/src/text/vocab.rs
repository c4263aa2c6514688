use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const N_SPECIALS: usize = 5;

const SPECIAL_PIECES: [&str; N_SPECIALS] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Word-piece vocabulary. Indices are stable: specials occupy 0..5 in the
/// order PAD, CLS, SEP, MASK, UNK, then learned pieces in build order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    lookup: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            if lookup.insert(p.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate piece {p:?}")));
            }
            let body = p.strip_prefix("##").unwrap_or(p);
            max_piece_chars = max_piece_chars.max(body.chars().count());
        }
        for (i, s) in SPECIAL_PIECES.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocab(format!("piece {i} must be {s}")));
            }
        }
        Ok(Vocab { pieces, lookup, max_piece_chars })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.lookup.get(piece).copied()
    }

    /// One piece per line, index = line number.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pieces: Vec<String> = text.lines().map(str::to_owned).collect();
        if pieces.len() < N_SPECIALS {
            return Err(Error::Vocab("vocab file shorter than the special block".into()));
        }
        Self::from_pieces(pieces)
    }

    /// Greedy longest-match encoding of one normalized word. Any word that
    /// cannot be covered start to end collapses to a single UNK.
    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let limit = chars.len().min(pos + self.max_piece_chars);
            let mut found = None;
            for end in (pos + 1..=limit).rev() {
                let body: String = chars[pos..end].iter().collect();
                let key = if pos == 0 { body } else { format!("##{body}") };
                if let Some(&id) = self.lookup.get(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    ids.push(id);
                    pos = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(ids);
    }

    /// Lowercases, splits on whitespace, and emits piece ids without any
    /// special-token framing.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Inverse of `encode` up to normalization: continuation pieces glue onto
    /// the current word, everything else starts a new space-separated word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id);
            if let Some(cont) = piece.strip_prefix("##") {
                out.push_str(cont);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
        out
    }
}

/// Frequency-ranked word-piece vocabulary over a whitespace corpus.
///
/// Single characters (word-initial and continuation forms) come first so any
/// word over the seen alphabet stays encodable, then whole words by
/// descending frequency until `target_size` learned pieces. Ties break on
/// the string so the result is a pure function of the corpus text.
pub fn build_vocab(corpus: &str, target_size: usize) -> Result<Vocab> {
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for word in corpus.to_lowercase().split_whitespace() {
        *word_counts.entry(word.to_owned()).or_insert(0) += 1;
    }
    if word_counts.is_empty() {
        return Err(Error::Corpus("corpus has no tokens".into()));
    }

    let mut char_counts: BTreeMap<String, u64> = BTreeMap::new();
    for (word, n) in &word_counts {
        for (i, c) in word.chars().enumerate() {
            let key = if i == 0 { c.to_string() } else { format!("##{c}") };
            *char_counts.entry(key).or_insert(0) += n;
        }
    }

    let mut ranked: Vec<(&String, u64)> = char_counts.iter().map(|(k, &n)| (k, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut word_ranked: Vec<(&String, u64)> = word_counts
        .iter()
        .filter(|(w, _)| w.chars().count() > 1)
        .map(|(k, &n)| (k, n))
        .collect();
    word_ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.extend(word_ranked);

    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(ranked.into_iter().take(target_size).map(|(p, _)| p.clone()));
    Vocab::from_pieces(pieces)
}

/// One encoded document: CLS, pieces, SEP, truncated to `max_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Corpus("sequence must start with CLS".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::IndexOutOfRange { op: "token_sequence", index: bad, bound: vocab_size });
        }
        Ok(TokenSequence { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_sequence(vocab: &Vocab, text: &str, max_seq_len: usize) -> TokenSequence {
    let mut body = vocab.encode(text);
    body.truncate(max_seq_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(CLS);
    ids.extend(body);
    ids.push(SEP);
    TokenSequence { ids }
}
