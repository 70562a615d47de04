//! Grounded descriptions: plain text with inline `[x1, y1, x2, y2]` boxes.
//!
//! Parsing removes every well-formed coordinate group (and one adjacent space),
//! converts it to the full-image pixel frame, and attaches it to the phrase
//! right before it. The phrase is the longest run of word tokens ending at the
//! group, stopped by punctuation, conjunctions, prepositions and a few
//! auxiliary verbs, and capped at [`MAX_PHRASE_TOKENS`]. Malformed groups stay
//! in the text and are reported as diagnostics.
//!
//! Anchor spans are UTF-8 byte offsets into `plain_text`.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const MAX_PHRASE_TOKENS: usize = 6;

const STOP_WORDS: &[&str] = &[
    // conjunctions
    "and",
    "or",
    "but",
    "nor",
    "so",
    "yet",
    "while",
    "whereas",
    "as",
    "than",
    "then",
    // prepositions
    "about",
    "above",
    "across",
    "against",
    "along",
    "among",
    "around",
    "at",
    "behind",
    "below",
    "beneath",
    "beside",
    "besides",
    "between",
    "beyond",
    "by",
    "down",
    "during",
    "for",
    "from",
    "in",
    "inside",
    "into",
    "near",
    "next",
    "on",
    "onto",
    "outside",
    "over",
    "past",
    "through",
    "to",
    "toward",
    "towards",
    "under",
    "underneath",
    "up",
    "upon",
    "with",
    "within",
    "without",
    // auxiliaries and relatives
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "has",
    "have",
    "had",
    "there",
    "here",
    "which",
    "who",
    "whom",
    "whose",
    "that",
    "where",
    "when",
    "it",
    "they",
    "we",
    "he",
    "she",
];

const ARTICLES: &[&str] = &["a", "an", "the"];

/// How coordinates are written in text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Absolute pixels, written as integers.
    Pixel,
    /// Integers in `0..=999` scaled by image width/height.
    #[default]
    Norm999,
    /// Fractions in `[0, 1]` with three decimals.
    Unit,
}

impl Convention {
    fn scale(self, width: f64, height: f64) -> (f64, f64) {
        match self {
            Convention::Pixel => (1.0, 1.0),
            Convention::Norm999 => (width / 999.0, height / 999.0),
            Convention::Unit => (width, height),
        }
    }

    fn max_value(self, width: f64, height: f64) -> (f64, f64) {
        match self {
            Convention::Pixel => (width, height),
            Convention::Norm999 => (999.0, 999.0),
            Convention::Unit => (1.0, 1.0),
        }
    }

    /// Textual values to pixel box.
    pub fn to_pixels(self, v: [f64; 4], width: u32, height: u32) -> Result<BBox> {
        let (w, h) = (width as f64, height as f64);
        let (mx, my) = self.max_value(w, h);
        if v[0] < 0.0 || v[1] < 0.0 || v[2] > mx || v[3] > my {
            return Err(Error::InvalidBox {
                x1: v[0],
                y1: v[1],
                x2: v[2],
                y2: v[3],
                reason: "outside the coordinate range",
            });
        }
        let (sx, sy) = self.scale(w, h);
        BBox::new(v[0] * sx, v[1] * sy, v[2] * sx, v[3] * sy)
    }

    /// Pixel box to its canonical textual form, e.g. `[12, 40, 300, 512]`.
    pub fn format_box(self, b: &BBox, width: u32, height: u32) -> String {
        let (w, h) = (width as f64, height as f64);
        match self {
            Convention::Pixel => {
                let (x1, x2) = int_pair(b.x1(), b.x2(), w.round());
                let (y1, y2) = int_pair(b.y1(), b.y2(), h.round());
                format!("[{x1}, {y1}, {x2}, {y2}]")
            }
            Convention::Norm999 => {
                let (x1, x2) = int_pair(b.x1() / w * 999.0, b.x2() / w * 999.0, 999.0);
                let (y1, y2) = int_pair(b.y1() / h * 999.0, b.y2() / h * 999.0, 999.0);
                format!("[{x1}, {y1}, {x2}, {y2}]")
            }
            Convention::Unit => {
                let (x1, x2) = milli_pair(b.x1() / w, b.x2() / w);
                let (y1, y2) = milli_pair(b.y1() / h, b.y2() / h);
                format!(
                    "[{:.3}, {:.3}, {:.3}, {:.3}]",
                    x1 as f64 / 1000.0,
                    y1 as f64 / 1000.0,
                    x2 as f64 / 1000.0,
                    y2 as f64 / 1000.0
                )
            }
        }
    }
}

/// Rounds a coordinate pair to integers in `[0, max]`, keeping `lo < hi`.
fn int_pair(lo: f64, hi: f64, max: f64) -> (i64, i64) {
    let max = max as i64;
    let mut a = (lo.round() as i64).clamp(0, max);
    let mut b = (hi.round() as i64).clamp(0, max);
    if b <= a {
        if a < max {
            b = a + 1;
        } else {
            a = b - 1;
        }
    }
    (a, b)
}

fn milli_pair(lo: f64, hi: f64) -> (i64, i64) {
    int_pair(lo * 1000.0, hi * 1000.0, 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFrame {
    pub convention: Convention,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundAnchor {
    pub phrase: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedDescription {
    pub plain_text: String,
    pub anchors: Vec<GroundAnchor>,
    pub source_frame: SourceFrame,
}

impl GroundedDescription {
    pub fn new(plain_text: impl Into<String>, source_frame: SourceFrame) -> Self {
        Self {
            plain_text: plain_text.into(),
            anchors: Vec::new(),
            source_frame,
        }
    }

    pub fn anchor_boxes(&self) -> Vec<BBox> {
        self.anchors.iter().map(|a| a.bbox).collect()
    }

    /// Checks span validity, phrase/span agreement and ordering.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, a) in self.anchors.iter().enumerate() {
            let bad = |reason: &str| Error::Schema {
                field: format!("anchors[{i}]"),
                message: reason.to_string(),
            };
            if a.start >= a.end || a.end > self.plain_text.len() {
                return Err(bad("span out of range"));
            }
            if a.start < prev_end {
                return Err(bad("anchors overlap or are out of order"));
            }
            if self.plain_text.get(a.start..a.end) != Some(a.phrase.as_str()) {
                return Err(bad("phrase does not match its span"));
            }
            prev_end = a.end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DiagnosticKind {
    WrongArity {
        found: usize,
    },
    NonNumeric,
    OutOfRange,
    Inverted,
    /// Well-formed group with no preceding word to attach to; removed from the text.
    Unanchored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Byte offset of the group in the raw input.
    pub offset: usize,
    pub raw: String,
    #[serde(flatten)]
    pub kind: DiagnosticKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedText {
    pub description: GroundedDescription,
    pub diagnostics: Vec<Diagnostic>,
    /// Every well-formed box in textual order, anchored or not.
    pub boxes: Vec<BBox>,
}

fn group_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("static regex"))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '\''
}

fn is_stop_word(w: &str) -> bool {
    let lower = w.to_ascii_lowercase();
    STOP_WORDS.contains(&lower.as_str())
}

fn parse_values(inner: &str) -> std::result::Result<[f64; 4], DiagnosticKind> {
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(DiagnosticKind::WrongArity { found: parts.len() });
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or(DiagnosticKind::NonNumeric)?;
    }
    Ok(v)
}

fn classify(v: [f64; 4], frame: &SourceFrame) -> std::result::Result<BBox, DiagnosticKind> {
    if v[0] >= v[2] || v[1] >= v[3] {
        return Err(DiagnosticKind::Inverted);
    }
    frame
        .convention
        .to_pixels(v, frame.width, frame.height)
        .map_err(|_| DiagnosticKind::OutOfRange)
}

/// Start offset of the word ending at byte `end` of `text`, if `text[..end]` ends in a word char.
fn word_start(text: &str, end: usize) -> Option<usize> {
    let mut start = end;
    for (i, c) in text[..end].char_indices().rev() {
        if is_word_char(c) {
            start = i;
        } else {
            break;
        }
    }
    (start < end).then_some(start)
}

/// Phrase span ending at `end`, not reaching before `floor`.
pub(crate) fn phrase_before(text: &str, end: usize, floor: usize) -> Option<(usize, usize)> {
    let mut cursor = end;
    let mut phrase_start = None;
    let mut tokens = 0;
    while let Some(ws) = word_start(text, cursor) {
        if ws < floor || is_stop_word(&text[ws..cursor]) {
            break;
        }
        phrase_start = Some(ws);
        tokens += 1;
        if tokens == MAX_PHRASE_TOKENS {
            break;
        }
        // continue only across a single space
        if ws >= 1 && text.as_bytes()[ws - 1] == b' ' && ws - 1 > floor {
            cursor = ws - 1;
        } else {
            break;
        }
    }
    if let Some(s) = phrase_start {
        return Some((s, end));
    }
    // fallback: the closest preceding word
    let trimmed = text[..end].trim_end_matches(|c: char| !is_word_char(c));
    let we = trimmed.len();
    let ws = word_start(text, we)?;
    (ws >= floor).then_some((ws, we))
}

pub fn parse_grounded(text: &str, width: u32, height: u32, convention: Convention) -> ParsedText {
    let frame = SourceFrame {
        convention,
        width,
        height,
    };
    let mut plain = String::with_capacity(text.len());
    let mut anchors = Vec::new();
    let mut diagnostics = Vec::new();
    let mut boxes = Vec::new();
    let mut last = 0;
    let mut skip_space = false;

    for m in group_regex().captures_iter(text) {
        let whole = m.get(0).expect("group 0 always present");
        let mut between = &text[last..whole.start()];
        if skip_space {
            between = between.strip_prefix(' ').unwrap_or(between);
            skip_space = false;
        }
        plain.push_str(between);
        last = whole.end();

        let parsed = parse_values(&m[1]).and_then(|v| classify(v, &frame));
        let bbox = match parsed {
            Ok(b) => b,
            Err(kind) => {
                diagnostics.push(Diagnostic {
                    offset: whole.start(),
                    raw: whole.as_str().to_string(),
                    kind,
                });
                plain.push_str(whole.as_str());
                continue;
            }
        };
        boxes.push(bbox);

        if plain.ends_with(' ') {
            plain.pop();
        } else if plain.is_empty() || plain.ends_with(char::is_whitespace) {
            skip_space = true;
        }

        let floor = anchors.last().map_or(0, |a: &GroundAnchor| a.end);
        match phrase_before(&plain, plain.len(), floor) {
            Some((s, e)) => anchors.push(GroundAnchor {
                phrase: plain[s..e].to_string(),
                start: s,
                end: e,
                bbox,
            }),
            None => diagnostics.push(Diagnostic {
                offset: whole.start(),
                raw: whole.as_str().to_string(),
                kind: DiagnosticKind::Unanchored,
            }),
        }
    }
    let mut rest = &text[last..];
    if skip_space {
        rest = rest.strip_prefix(' ').unwrap_or(rest);
    }
    plain.push_str(rest);

    ParsedText {
        description: GroundedDescription {
            plain_text: plain,
            anchors,
            source_frame: frame,
        },
        diagnostics,
        boxes,
    }
}

/// Reinserts ` [x1, y1, x2, y2]` right after each anchor's phrase.
pub fn serialize_grounded(desc: &GroundedDescription, convention: Convention) -> String {
    let SourceFrame { width, height, .. } = desc.source_frame;
    let mut out = String::with_capacity(desc.plain_text.len() + desc.anchors.len() * 24);
    let mut last = 0;
    for a in &desc.anchors {
        out.push_str(&desc.plain_text[last..a.end]);
        let _ = write!(out, " {}", convention.format_box(&a.bbox, width, height));
        last = a.end;
    }
    out.push_str(&desc.plain_text[last..]);
    out
}

/// Lowercased, whitespace-collapsed phrase with surrounding punctuation and a leading article removed.
pub fn normalize_phrase(s: &str) -> String {
    let tokens: Vec<String> = s
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !is_word_char(c)).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    let skip = usize::from(tokens.first().is_some_and(|t| ARTICLES.contains(&t.as_str())));
    tokens[skip..].join(" ")
}

/// First case-insensitive, whole-word occurrence of `needle` in `haystack`.
pub fn find_whole_word(haystack: &str, needle: &str) -> Option<usize> {
    let needle = needle.trim();
    if needle.is_empty() {
        return None;
    }
    let hay = haystack.to_ascii_lowercase();
    let pat = needle.to_ascii_lowercase();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&pat) {
        let s = from + pos;
        let e = s + pat.len();
        let before_ok = hay[..s].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = hay[e..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return Some(s);
        }
        from = s + hay[s..].chars().next().map_or(1, char::len_utf8);
    }
    None
}
