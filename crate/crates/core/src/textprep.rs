//! German text normalization and sentinel-token context fusion.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub const LINK: &str = "LINK";
pub const TITEL: &str = "TITEL";
pub const KOMMENTAR: &str = "KOMMENTAR";
pub const SENTINELS: [&str; 3] = [LINK, TITEL, KOMMENTAR];

pub const DEFAULT_MAX_LEN: usize = 256;

const BUILTIN_STOPWORDS: &str = include_str!("../resources/stopwords_de.txt");
const BUILTIN_LEMMAS: &str = include_str!("../resources/lemmas_de.tsv");

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("lemmatizer `{provider}` failed on text {text_id:?}: {reason}")]
    Lemma {
        provider: String,
        text_id: Option<i64>,
        reason: String,
    },
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error("cannot read {path}: {reason}")]
    Resource { path: String, reason: String },
}

impl PrepError {
    pub fn with_text_id(self, id: i64) -> Self {
        match self {
            PrepError::Lemma { provider, reason, .. } => PrepError::Lemma {
                provider,
                text_id: Some(id),
                reason,
            },
            other => other,
        }
    }
}

pub fn is_sentinel(token: &str) -> bool {
    SENTINELS.contains(&token)
}

/// Lowercases, replaces every non-letter with a space, collapses runs of
/// spaces and trims.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.chars() {
        if c.is_alphabetic() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Maps a normalized sentence to its lemmatized form.
///
/// Implementations must be free of cross-call mutable state.
pub trait Lemmatizer: Send + Sync {
    fn name(&self) -> &str;
    fn lemmatize(&self, text: &str) -> Result<String, String>;
}

#[derive(Debug, Default, Clone)]
pub struct IdentityLemmatizer;

impl Lemmatizer for IdentityLemmatizer {
    fn name(&self) -> &str {
        "identity"
    }

    fn lemmatize(&self, text: &str) -> Result<String, String> {
        Ok(text.to_string())
    }
}

/// Word-by-word lookup lemmatizer; unknown forms pass through unchanged.
#[derive(Debug, Clone)]
pub struct DictionaryLemmatizer {
    name: String,
    forms: HashMap<String, String>,
}

impl DictionaryLemmatizer {
    /// The bundled German form → lemma table.
    pub fn builtin_de() -> Self {
        Self::parse("de-dict", BUILTIN_LEMMAS).expect("bundled lemma table is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, PrepError> {
        let text = fs::read_to_string(path).map_err(|e| PrepError::Resource {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&format!("dict:{}", path.display()), &text)
    }

    /// Parses `form<TAB>lemma` lines. Both sides must be normalized words.
    pub fn parse(name: &str, text: &str) -> Result<Self, PrepError> {
        let mut forms = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || PrepError::Config(format!("{name}: line {} is not `form<TAB>lemma`", i + 1));
            let (form, lemma) = line.split_once('\t').ok_or_else(bad)?;
            let valid = |w: &str| !w.is_empty() && normalize(w) == w && !w.contains(' ');
            if !valid(form) || !valid(lemma) {
                return Err(bad());
            }
            forms.insert(form.to_string(), lemma.to_string());
        }
        Ok(Self {
            name: name.to_string(),
            forms,
        })
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn lookup<'a>(&'a self, word: &'a str) -> &'a str {
        self.forms.get(word).map(String::as_str).unwrap_or(word)
    }
}

impl Lemmatizer for DictionaryLemmatizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn lemmatize(&self, text: &str) -> Result<String, String> {
        Ok(text
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.lookup(w))
            .collect::<Vec<_>>()
            .join(" "))
    }
}

#[derive(Debug, Clone)]
pub struct StopwordList {
    pub name: String,
    words: HashSet<String>,
}

impl StopwordList {
    pub fn builtin_de() -> Self {
        Self::parse("de-builtin", BUILTIN_STOPWORDS)
    }

    /// One token per line, UTF-8.
    pub fn from_file(path: &Path) -> Result<Self, PrepError> {
        let text = fs::read_to_string(path).map_err(|e| PrepError::Resource {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Self::parse(&format!("file:{}", path.display()), &text))
    }

    pub fn parse(name: &str, text: &str) -> Self {
        let words = text
            .lines()
            .map(|l| normalize(l.trim()))
            .filter(|w| !w.is_empty())
            .collect();
        Self {
            name: name.to_string(),
            words,
        }
    }

    pub fn empty() -> Self {
        Self {
            name: "none".into(),
            words: HashSet::new(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone)]
pub struct PrepConfig {
    pub lemmatize: bool,
    pub remove_stopwords: bool,
    pub stopwords: Arc<StopwordList>,
    pub lemmatizer: Arc<dyn Lemmatizer>,
    /// Upper bound on the fused sequence length, sentinels included.
    pub max_len: usize,
}

impl fmt::Debug for PrepConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrepConfig")
            .field("lemmatize", &self.lemmatize)
            .field("remove_stopwords", &self.remove_stopwords)
            .field("stopwords", &self.stopwords.name)
            .field("lemmatizer", &self.lemmatizer.name())
            .field("max_len", &self.max_len)
            .finish()
    }
}

impl Default for PrepConfig {
    /// German defaults: bundled lemma table and stopword list, both enabled.
    fn default() -> Self {
        Self {
            lemmatize: true,
            remove_stopwords: true,
            stopwords: Arc::new(StopwordList::builtin_de()),
            lemmatizer: Arc::new(DictionaryLemmatizer::builtin_de()),
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl PrepConfig {
    /// Normalization and tokenization only.
    pub fn plain() -> Self {
        Self {
            lemmatize: false,
            remove_stopwords: false,
            stopwords: Arc::new(StopwordList::empty()),
            lemmatizer: Arc::new(IdentityLemmatizer),
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        if self.remove_stopwords && self.stopwords.is_empty() {
            return Err(PrepError::Config(
                "stopword removal enabled with an empty stopword list".into(),
            ));
        }
        if self.max_len < SENTINELS.len() + 1 {
            return Err(PrepError::Config(format!(
                "max_len {} leaves no room for content",
                self.max_len
            )));
        }
        Ok(())
    }

    /// Provider names recorded in run metadata.
    pub fn provider_names(&self) -> (String, String) {
        (self.lemmatizer.name().to_string(), self.stopwords.name.clone())
    }
}

/// normalize → lemmatize (optional) → whitespace tokenize → stopword removal (optional).
pub fn pipeline(text: &str, cfg: &PrepConfig) -> Result<Vec<String>, PrepError> {
    let mut clean = normalize(text);
    if cfg.lemmatize {
        let lemmatized = cfg.lemmatizer.lemmatize(&clean).map_err(|reason| PrepError::Lemma {
            provider: cfg.lemmatizer.name().to_string(),
            text_id: None,
            reason,
        })?;
        // keep the token alphabet closed even for external providers
        clean = normalize(&lemmatized);
    }
    Ok(clean
        .split(' ')
        .filter(|t| !t.is_empty())
        .filter(|t| !(cfg.remove_stopwords && cfg.stopwords.contains(t)))
        .map(str::to_string)
        .collect())
}

/// A fused token sequence. Sentinels are uppercase, content tokens lowercase.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Content tokens following the KOMMENTAR sentinel.
    pub fn comment_tokens(&self) -> &[String] {
        match self.tokens.iter().position(|t| t == KOMMENTAR) {
            Some(i) => &self.tokens[i + 1..],
            None => &self.tokens,
        }
    }
}

/// Concatenates `[LINK] path [TITEL] title [KOMMENTAR] comment`, omitting
/// absent context segments, then truncates to `cfg.max_len`.
///
/// Path separators `/` become spaces before preprocessing.
pub fn compose_input(
    path: Option<&str>,
    title: Option<&str>,
    comment: &str,
    cfg: &PrepConfig,
) -> Result<TokenSequence, PrepError> {
    let path_tokens = path.map(|p| pipeline(&p.replace('/', " "), cfg)).transpose()?;
    let title_tokens = title.map(|t| pipeline(t, cfg)).transpose()?;
    let comment_tokens = pipeline(comment, cfg)?;
    Ok(fuse(path_tokens, title_tokens, comment_tokens, cfg.max_len))
}

fn fuse(
    mut path: Option<Vec<String>>,
    mut title: Option<Vec<String>>,
    mut comment: Vec<String>,
    max_len: usize,
) -> TokenSequence {
    let sentinels = 1 + path.is_some() as usize + title.is_some() as usize;
    let content = |p: &Option<Vec<String>>, t: &Option<Vec<String>>, c: &Vec<String>| {
        p.as_ref().map_or(0, Vec::len) + t.as_ref().map_or(0, Vec::len) + c.len()
    };
    let budget = max_len.saturating_sub(sentinels);
    let mut excess = content(&path, &title, &comment).saturating_sub(budget);
    // comment loses its oldest tokens first, then title, then path
    for seg in [Some(&mut comment), title.as_mut(), path.as_mut()]
        .into_iter()
        .flatten()
    {
        let cut = excess.min(seg.len());
        seg.drain(..cut);
        excess -= cut;
    }

    let mut tokens = Vec::with_capacity(max_len.min(budget + sentinels));
    if let Some(p) = path {
        tokens.push(LINK.to_string());
        tokens.extend(p);
    }
    if let Some(t) = title {
        tokens.push(TITEL.to_string());
        tokens.extend(t);
    }
    tokens.push(KOMMENTAR.to_string());
    tokens.extend(comment);
    TokenSequence { tokens }
}

/// Serializes a prep cache: one `post_id,space-joined tokens` line per row.
pub fn write_prep_cache<'a>(rows: impl IntoIterator<Item = (i64, &'a TokenSequence)>) -> String {
    let mut out = String::new();
    for (id, seq) in rows {
        out.push_str(&format!("{id},{}\n", seq.tokens.join(" ")));
    }
    out
}

pub fn read_prep_cache(text: &str) -> Result<Vec<(i64, TokenSequence)>, PrepError> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (id, toks) = line
                .split_once(',')
                .ok_or_else(|| PrepError::Config(format!("prep cache line {}", i + 1)))?;
            let id = id
                .parse()
                .map_err(|_| PrepError::Config(format!("prep cache line {}: bad id", i + 1)))?;
            let tokens = toks.split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
            Ok((id, TokenSequence { tokens }))
        })
        .collect()
}
