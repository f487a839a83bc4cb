//! Text normalization, tokenization and stopword handling shared by
//! ingestion, term extraction and the hashing embedder.

use std::collections::HashSet;

use unicode_normalization::UnicodeNormalization;

/// Version tag of the bundled stopword lists. Bump when a list changes.
pub const STOPWORDS_VERSION: &str = "1";

const EN_STOPWORDS: &str = include_str!("stopwords/en.txt");
const DE_STOPWORDS: &str = include_str!("stopwords/de.txt");

/// Normalizes a document body: Unicode NFC, CRLF (and lone CR) to LF, and
/// runs of more than two newlines collapsed to exactly two.
pub fn normalize_body(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let unix = nfc.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unix.len());
    let mut newlines = 0usize;
    for ch in unix.chars() {
        if ch == '\n' {
            newlines += 1;
            if newlines <= 2 {
                out.push('\n');
            }
        } else {
            newlines = 0;
            out.push(ch);
        }
    }
    out
}

/// Normalizes a term surface: NFC, lowercase, internal whitespace collapsed.
pub fn normalize_term(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase().nfc().collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase().nfc().collect();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Sentence spans (byte offsets into `text`) inside `start..end`.
///
/// A sentence ends at `.`, `?` or `!` followed by whitespace. Spans never
/// start or end on whitespace.
pub fn sentence_spans(text: &str, start: usize, end: usize) -> Vec<(usize, usize)> {
    let slice = &text[start..end];
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let mut iter = slice.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if open.is_none() {
            if c.is_whitespace() {
                continue;
            }
            open = Some(i);
        }
        if matches!(c, '.' | '?' | '!') {
            if let Some(&(_, next)) = iter.peek() {
                if next.is_whitespace() {
                    spans.push((start + open.take().unwrap(), start + i + c.len_utf8()));
                }
            }
        }
    }
    if let Some(s) = open {
        let tail = slice[s..].trim_end();
        if !tail.is_empty() {
            spans.push((start + s, start + s + tail.len()));
        }
    }
    spans
}

/// A set of lowercase stopwords.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stopwords {
    words: HashSet<String>,
}

impl Stopwords {
    /// Bundled lists for the given language tags. Unknown tags are ignored.
    pub fn builtin(languages: &[&str]) -> Self {
        let mut words = HashSet::new();
        for lang in languages {
            let list = match primary_subtag(lang).as_str() {
                "en" => EN_STOPWORDS,
                "de" => DE_STOPWORDS,
                _ => continue,
            };
            words.extend(parse_list(list));
        }
        Self { words }
    }

    /// English and German, the languages of the bundled fixtures.
    pub fn default_set() -> Self {
        Self::builtin(&["en", "de"])
    }

    pub fn extend<I: IntoIterator<Item = S>, S: AsRef<str>>(&mut self, extra: I) {
        self.words
            .extend(extra.into_iter().map(|w| normalize_term(w.as_ref())));
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn parse_list(list: &str) -> impl Iterator<Item = String> + '_ {
    list.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
}

/// `"de-AT"` -> `"de"`.
pub fn primary_subtag(tag: &str) -> String {
    tag.split(['-', '_']).next().unwrap_or("").to_ascii_lowercase()
}
