//! Corpus ingestion, label merging and leakage-safe balanced splits.
//!
//! Two storage layouts are understood:
//!
//! * a directory holding `articles.csv` and `posts.csv` whose headers are the
//!   snake_case field names of [`Article`] and [`Post`];
//! * an SQLite database with `Articles` / `Posts` tables using the column
//!   names of the original One Million Posts dump (`ID_Post`, `ID_Article`,
//!   ...). Requires the `sqlite` feature.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{KEEP, REMOVE};

/// Identifier of the RNG and shuffle procedure used by [`balance_and_split`].
pub const SPLIT_RNG: &str = "chacha8-fisher-yates-v1";

pub const ARTICLE_FIELDS: [&str; 5] = ["article_id", "path", "date", "title", "body"];
pub const POST_FIELDS: [&str; 10] = [
    "post_id",
    "article_id",
    "parent_post_id",
    "user_id",
    "headline",
    "body",
    "timestamp",
    "positive_votes",
    "negative_votes",
    "status",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: table `{table}` is missing")]
    MissingTable { table: String },
    #[error("schema error: table `{table}` is missing column `{field}`")]
    MissingColumn { table: String, field: String },
    #[error("{table} row {row}: cannot parse `{field}` from {value:?}")]
    Parse {
        table: String,
        row: usize,
        field: String,
        value: String,
    },
    #[error("integrity error: posts reference unknown articles: {post_ids:?}")]
    Integrity { post_ids: Vec<i64> },
    #[error("article {article_id} has an empty path")]
    EmptyPath { article_id: i64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[cfg(feature = "sqlite")]
    #[error("sqlite error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("unsupported store uri `{0}`")]
    UnsupportedStore(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("split fractions must satisfy 0 < val + test < 1 (got val={val}, test={test})")]
    Fractions { val: f64, test: f64 },
    #[error("both classes need at least one example (online={online}, deleted={deleted})")]
    MissingClass { online: usize, deleted: usize },
    #[error("cannot balance: {online} online < {deleted} deleted; only online rows are dropped")]
    Balance { online: usize, deleted: usize },
    #[error("duplicate post id {0}")]
    DuplicatePost(i64),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest header is missing or malformed: {0:?}")]
    Header(String),
    #[error("manifest line {line}: {reason}")]
    Line { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Online,
    Deleted,
}

impl Status {
    pub fn label(self) -> u8 {
        match self {
            Status::Online => KEEP,
            Status::Deleted => REMOVE,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "online" => Some(Status::Online),
            "deleted" => Some(Status::Deleted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: i64,
    pub article_id: i64,
    pub parent_post_id: Option<i64>,
    pub user_id: i64,
    pub headline: Option<String>,
    pub body: Option<String>,
    pub timestamp: NaiveDateTime,
    pub positive_votes: u32,
    pub negative_votes: u32,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: i64,
    /// Breadcrumb trail, `/`-separated.
    pub path: String,
    pub date: NaiveDateTime,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub articles: Vec<Article>,
    pub posts: Vec<Post>,
}

/// Raw class counts as stored, before any filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub articles: usize,
    pub posts: usize,
    pub online: usize,
    pub deleted: usize,
}

impl Corpus {
    pub fn counts(&self) -> CorpusCounts {
        let deleted = self.posts.iter().filter(|p| p.status == Status::Deleted).count();
        CorpusCounts {
            articles: self.articles.len(),
            posts: self.posts.len(),
            online: self.posts.len() - deleted,
            deleted,
        }
    }
}

/// One model-ready row: merged comment text plus article context and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub post_id: i64,
    pub user_id: i64,
    pub comment: String,
    pub title: String,
    pub path: String,
    pub label: u8,
}

/// Output of [`make_examples`]: kept rows plus the ids dropped for lack of text.
#[derive(Debug, Clone, Default)]
pub struct MergedExamples {
    pub examples: Vec<LabeledExample>,
    pub dropped: Vec<i64>,
}

/// Loads a corpus from a CSV directory or an SQLite file.
///
/// `store_uri` may be `csv:DIR`, `sqlite:FILE`, a directory, or a file ending
/// in `.sqlite`, `.sqlite3` or `.db`.
pub fn load_corpus(store_uri: &str) -> Result<Corpus, CorpusError> {
    let corpus = if let Some(dir) = store_uri.strip_prefix("csv:") {
        load_csv_dir(Path::new(dir))?
    } else if let Some(file) = store_uri.strip_prefix("sqlite:") {
        load_sqlite(Path::new(file))?
    } else {
        let p = Path::new(store_uri);
        let is_db = matches!(
            p.extension().and_then(|e| e.to_str()),
            Some("sqlite" | "sqlite3" | "db")
        );
        if is_db {
            load_sqlite(p)?
        } else if p.is_dir() {
            load_csv_dir(p)?
        } else {
            return Err(CorpusError::UnsupportedStore(store_uri.to_string()));
        }
    };
    check_integrity(&corpus)?;
    Ok(corpus)
}

fn check_integrity(corpus: &Corpus) -> Result<(), CorpusError> {
    for a in &corpus.articles {
        if a.path.trim().is_empty() {
            return Err(CorpusError::EmptyPath {
                article_id: a.article_id,
            });
        }
    }
    let ids: BTreeSet<i64> = corpus.articles.iter().map(|a| a.article_id).collect();
    let dangling: Vec<i64> = corpus
        .posts
        .iter()
        .filter(|p| !ids.contains(&p.article_id))
        .map(|p| p.post_id)
        .collect();
    if dangling.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::Integrity { post_ids: dangling })
    }
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn optional(s: &str) -> Option<String> {
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

/// Column lookup for one CSV table, validated against the expected header.
struct Columns {
    table: &'static str,
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(table: &'static str, headers: &csv::StringRecord, required: &[&str]) -> Result<Self, CorpusError> {
        let index: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for field in required {
            if !index.contains_key(*field) {
                return Err(CorpusError::MissingColumn {
                    table: table.to_string(),
                    field: field.to_string(),
                });
            }
        }
        Ok(Self { table, index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, field: &str) -> &'r str {
        rec.get(self.index[field]).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, rec: &csv::StringRecord, row: usize, field: &str) -> Result<T, CorpusError> {
        let raw = self.get(rec, field);
        raw.trim().parse().map_err(|_| self.bad(row, field, raw))
    }

    fn parse_opt<T: std::str::FromStr>(
        &self,
        rec: &csv::StringRecord,
        row: usize,
        field: &str,
    ) -> Result<Option<T>, CorpusError> {
        let raw = self.get(rec, field);
        if raw.trim().is_empty() {
            return Ok(None);
        }
        raw.trim().parse().map(Some).map_err(|_| self.bad(row, field, raw))
    }

    fn datetime(&self, rec: &csv::StringRecord, row: usize, field: &str) -> Result<NaiveDateTime, CorpusError> {
        let raw = self.get(rec, field);
        parse_datetime(raw).ok_or_else(|| self.bad(row, field, raw))
    }

    fn bad(&self, row: usize, field: &str, value: &str) -> CorpusError {
        CorpusError::Parse {
            table: self.table.to_string(),
            row,
            field: field.to_string(),
            value: value.to_string(),
        }
    }
}

fn open_csv(dir: &Path, name: &str) -> Result<csv::Reader<fs::File>, CorpusError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CorpusError::MissingTable {
            table: path.display().to_string(),
        });
    }
    let file = fs::File::open(&path).map_err(|source| CorpusError::Io { path, source })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn load_csv_dir(dir: &Path) -> Result<Corpus, CorpusError> {
    let mut rdr = open_csv(dir, "articles.csv")?;
    let cols = Columns::new("articles", rdr.headers()?, &ARTICLE_FIELDS)?;
    let mut articles = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        articles.push(Article {
            article_id: cols.parse(&rec, row, "article_id")?,
            path: cols.get(&rec, "path").to_string(),
            date: cols.datetime(&rec, row, "date")?,
            title: cols.get(&rec, "title").to_string(),
            body: cols.get(&rec, "body").to_string(),
        });
    }

    let mut rdr = open_csv(dir, "posts.csv")?;
    let cols = Columns::new("posts", rdr.headers()?, &POST_FIELDS)?;
    let mut posts = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let status_raw = cols.get(&rec, "status");
        posts.push(Post {
            post_id: cols.parse(&rec, row, "post_id")?,
            article_id: cols.parse(&rec, row, "article_id")?,
            parent_post_id: cols.parse_opt(&rec, row, "parent_post_id")?,
            user_id: cols.parse(&rec, row, "user_id")?,
            headline: optional(cols.get(&rec, "headline")),
            body: optional(cols.get(&rec, "body")),
            timestamp: cols.datetime(&rec, row, "timestamp")?,
            positive_votes: cols.parse(&rec, row, "positive_votes")?,
            negative_votes: cols.parse(&rec, row, "negative_votes")?,
            status: Status::parse(status_raw).ok_or_else(|| cols.bad(row, "status", status_raw))?,
        });
    }
    Ok(Corpus { articles, posts })
}

/// Writes a corpus in the CSV-directory layout read by [`load_corpus`].
pub fn write_csv_dir(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let ts = |t: &NaiveDateTime| t.format("%Y-%m-%d %H:%M:%S%.3f").to_string();

    let mut w = csv::Writer::from_path(dir.join("articles.csv"))?;
    w.write_record(ARTICLE_FIELDS)?;
    for a in &corpus.articles {
        w.write_record([
            a.article_id.to_string(),
            a.path.clone(),
            ts(&a.date),
            a.title.clone(),
            a.body.clone(),
        ])?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: dir.join("articles.csv"),
        source,
    })?;

    let mut w = csv::Writer::from_path(dir.join("posts.csv"))?;
    w.write_record(POST_FIELDS)?;
    for p in &corpus.posts {
        w.write_record([
            p.post_id.to_string(),
            p.article_id.to_string(),
            p.parent_post_id.map(|x| x.to_string()).unwrap_or_default(),
            p.user_id.to_string(),
            p.headline.clone().unwrap_or_default(),
            p.body.clone().unwrap_or_default(),
            ts(&p.timestamp),
            p.positive_votes.to_string(),
            p.negative_votes.to_string(),
            match p.status {
                Status::Online => "online".to_string(),
                Status::Deleted => "deleted".to_string(),
            },
        ])?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: dir.join("posts.csv"),
        source,
    })?;
    Ok(())
}

#[cfg(feature = "sqlite")]
fn load_sqlite(path: &Path) -> Result<Corpus, CorpusError> {
    use rusqlite::{Connection, OpenFlags};

    if !path.exists() {
        return Err(CorpusError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
    }
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;

    let columns = |table: &str| -> Result<BTreeSet<String>, CorpusError> {
        let mut stmt = conn.prepare(&format!("PRAGMA table_info({table})"))?;
        let names = stmt
            .query_map([], |r| r.get::<_, String>(1))?
            .collect::<Result<BTreeSet<_>, _>>()?;
        if names.is_empty() {
            return Err(CorpusError::MissingTable {
                table: table.to_string(),
            });
        }
        Ok(names)
    };
    let require = |table: &str, have: &BTreeSet<String>, want: &[&str]| {
        for f in want {
            if !have.contains(*f) {
                return Err(CorpusError::MissingColumn {
                    table: table.to_string(),
                    field: f.to_string(),
                });
            }
        }
        Ok(())
    };

    const A_COLS: [&str; 5] = ["ID_Article", "Path", "publishingDate", "Title", "Body"];
    const P_COLS: [&str; 10] = [
        "ID_Post",
        "ID_Article",
        "ID_Parent_Post",
        "ID_User",
        "Headline",
        "Body",
        "CreatedAt",
        "PositiveVotes",
        "NegativeVotes",
        "Status",
    ];
    require("Articles", &columns("Articles")?, &A_COLS)?;
    require("Posts", &columns("Posts")?, &P_COLS)?;

    let bad = |table: &str, row: usize, field: &str, value: String| CorpusError::Parse {
        table: table.to_string(),
        row,
        field: field.to_string(),
        value,
    };

    let mut articles = Vec::new();
    let mut stmt = conn.prepare(&format!("SELECT {} FROM Articles", A_COLS.join(", ")))?;
    let mut rows = stmt.query([])?;
    let mut n = 0;
    while let Some(r) = rows.next()? {
        n += 1;
        let date: String = r.get(2)?;
        articles.push(Article {
            article_id: r.get(0)?,
            path: r.get::<_, Option<String>>(1)?.unwrap_or_default(),
            date: parse_datetime(&date).ok_or_else(|| bad("Articles", n, "publishingDate", date))?,
            title: r.get::<_, Option<String>>(3)?.unwrap_or_default(),
            body: r.get::<_, Option<String>>(4)?.unwrap_or_default(),
        });
    }

    let mut posts = Vec::new();
    let mut stmt = conn.prepare(&format!("SELECT {} FROM Posts", P_COLS.join(", ")))?;
    let mut rows = stmt.query([])?;
    let mut n = 0;
    while let Some(r) = rows.next()? {
        n += 1;
        let created: String = r.get(6)?;
        let status: String = r.get(9)?;
        posts.push(Post {
            post_id: r.get(0)?,
            article_id: r.get(1)?,
            parent_post_id: r.get(2)?,
            user_id: r.get(3)?,
            headline: r.get::<_, Option<String>>(4)?.filter(|s| !s.is_empty()),
            body: r.get::<_, Option<String>>(5)?.filter(|s| !s.is_empty()),
            timestamp: parse_datetime(&created).ok_or_else(|| bad("Posts", n, "CreatedAt", created))?,
            positive_votes: r.get::<_, Option<u32>>(7)?.unwrap_or(0),
            negative_votes: r.get::<_, Option<u32>>(8)?.unwrap_or(0),
            status: Status::parse(&status).ok_or_else(|| bad("Posts", n, "Status", status))?,
        });
    }
    Ok(Corpus { articles, posts })
}

#[cfg(not(feature = "sqlite"))]
fn load_sqlite(path: &Path) -> Result<Corpus, CorpusError> {
    Err(CorpusError::UnsupportedStore(format!(
        "{} (built without the `sqlite` feature)",
        path.display()
    )))
}

/// Merges headline and body into one comment and attaches article context.
///
/// Headline and body are joined with a single space; rows where both are
/// absent (or blank) are dropped and their ids reported in `dropped`.
pub fn make_examples(articles: &[Article], posts: &[Post]) -> MergedExamples {
    let by_id: HashMap<i64, &Article> = articles.iter().map(|a| (a.article_id, a)).collect();
    let mut out = MergedExamples::default();
    for p in posts {
        let comment = merge_comment(p.headline.as_deref(), p.body.as_deref());
        if comment.trim().is_empty() {
            out.dropped.push(p.post_id);
            continue;
        }
        let (title, path) = by_id
            .get(&p.article_id)
            .map(|a| (a.title.clone(), a.path.clone()))
            .unwrap_or_default();
        out.examples.push(LabeledExample {
            post_id: p.post_id,
            user_id: p.user_id,
            comment,
            title,
            path,
            label: p.status.label(),
        });
    }
    out
}

fn merge_comment(headline: Option<&str>, body: Option<&str>) -> String {
    match (headline.filter(|s| !s.is_empty()), body.filter(|s| !s.is_empty())) {
        (Some(h), Some(b)) => format!("{h} {b}"),
        (Some(h), None) => h.to_string(),
        (None, Some(b)) => b.to_string(),
        (None, None) => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
    /// Online rows dropped while balancing.
    Ds,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
            Partition::Ds => "ds",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            "ds" => Ok(Partition::Ds),
            other => Err(format!("unknown partition `{other}`")),
        }
    }
}

/// Balanced train/val/test partition plus the downsample pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: BTreeSet<i64>,
    pub val: BTreeSet<i64>,
    pub test: BTreeSet<i64>,
    pub ds_pool: BTreeSet<i64>,
    pub seed: u64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub rng: String,
}

impl SplitPlan {
    pub fn partition_of(&self, post_id: i64) -> Option<Partition> {
        if self.train.contains(&post_id) {
            Some(Partition::Train)
        } else if self.val.contains(&post_id) {
            Some(Partition::Val)
        } else if self.test.contains(&post_id) {
            Some(Partition::Test)
        } else if self.ds_pool.contains(&post_id) {
            Some(Partition::Ds)
        } else {
            None
        }
    }

    pub fn is_held_out(&self, post_id: i64) -> bool {
        self.val.contains(&post_id) || self.test.contains(&post_id)
    }

    pub fn retained_len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Selects the examples of one partition, in input order.
    pub fn select<'a>(&self, examples: &'a [LabeledExample], part: Partition) -> Vec<&'a LabeledExample> {
        examples
            .iter()
            .filter(|e| self.partition_of(e.post_id) == Some(part))
            .collect()
    }

    /// Flat text manifest: one header line, then `post_id,partition` sorted by id.
    pub fn to_manifest(&self) -> String {
        let mut rows: BTreeMap<i64, Partition> = BTreeMap::new();
        for (set, p) in [
            (&self.train, Partition::Train),
            (&self.val, Partition::Val),
            (&self.test, Partition::Test),
            (&self.ds_pool, Partition::Ds),
        ] {
            rows.extend(set.iter().map(|&id| (id, p)));
        }
        let mut out = format!(
            "#seed={},val_frac={},test_frac={},rng={}\n",
            self.seed, self.val_frac, self.test_frac, self.rng
        );
        for (id, p) in rows {
            out.push_str(&format!("{id},{p}\n"));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, ManifestError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let fields: HashMap<&str, &str> = header
            .strip_prefix('#')
            .ok_or_else(|| ManifestError::Header(header.to_string()))?
            .split(',')
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| ManifestError::Header(header.to_string()))
        };
        let parse_f = |k: &str| -> Result<f64, ManifestError> {
            get(k)?.parse().map_err(|_| ManifestError::Header(header.to_string()))
        };
        let mut plan = SplitPlan {
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
            ds_pool: BTreeSet::new(),
            seed: get("seed")?
                .parse()
                .map_err(|_| ManifestError::Header(header.to_string()))?,
            val_frac: parse_f("val_frac")?,
            test_frac: parse_f("test_frac")?,
            rng: get("rng")?.to_string(),
        };
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| ManifestError::Line { line: i + 2, reason };
            let (id, part) = line
                .split_once(',')
                .ok_or_else(|| bad("expected `post_id,partition`".into()))?;
            let id: i64 = id.parse().map_err(|_| bad(format!("bad post id {id:?}")))?;
            let part: Partition = part.parse().map_err(bad)?;
            let set = match part {
                Partition::Train => &mut plan.train,
                Partition::Val => &mut plan.val,
                Partition::Test => &mut plan.test,
                Partition::Ds => &mut plan.ds_pool,
            };
            set.insert(id);
        }
        Ok(plan)
    }
}

/// In-place Fisher-Yates shuffle: for `i` from `n-1` down to 1, swap `i`
/// with `gen_range(0..=i)`.
pub(crate) fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Per-class sizes of the (test, val) slices for a class of `n` retained rows.
fn holdout_sizes(n: usize, val_frac: f64, test_frac: f64) -> (usize, usize) {
    let n_test = ((test_frac * n as f64).round() as usize).min(n);
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_test);
    (n_test, n_val)
}

/// Balances classes by dropping random online rows, then splits the retained
/// rows stratified by label.
///
/// Procedure (seeded with `ChaCha8Rng::seed_from_u64(seed)`):
/// 1. collect online and deleted post ids, each sorted ascending;
/// 2. shuffle the online ids, then the deleted ids, with [`fisher_yates`];
/// 3. the first `n_deleted` shuffled online ids are retained, the rest form
///    the downsample pool;
/// 4. within each class (shuffled order) the first `round(test_frac * n)`
///    ids go to test, the next `round(val_frac * n)` to val, the rest to train.
pub fn balance_and_split(
    examples: &[LabeledExample],
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    let total = val_frac + test_frac;
    if !(val_frac >= 0.0 && test_frac >= 0.0 && total > 0.0 && total < 1.0) {
        return Err(SplitError::Fractions {
            val: val_frac,
            test: test_frac,
        });
    }
    let mut seen = BTreeSet::new();
    let mut online = Vec::new();
    let mut deleted = Vec::new();
    for e in examples {
        if !seen.insert(e.post_id) {
            return Err(SplitError::DuplicatePost(e.post_id));
        }
        if e.label == REMOVE {
            deleted.push(e.post_id);
        } else {
            online.push(e.post_id);
        }
    }
    if online.is_empty() || deleted.is_empty() {
        return Err(SplitError::MissingClass {
            online: online.len(),
            deleted: deleted.len(),
        });
    }
    if online.len() < deleted.len() {
        return Err(SplitError::Balance {
            online: online.len(),
            deleted: deleted.len(),
        });
    }
    online.sort_unstable();
    deleted.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fisher_yates(&mut online, &mut rng);
    fisher_yates(&mut deleted, &mut rng);

    let ds_pool: BTreeSet<i64> = online.split_off(deleted.len()).into_iter().collect();

    let mut plan = SplitPlan {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
        ds_pool,
        seed,
        val_frac,
        test_frac,
        rng: SPLIT_RNG.to_string(),
    };
    for class in [&online, &deleted] {
        let (n_test, n_val) = holdout_sizes(class.len(), val_frac, test_frac);
        plan.test.extend(&class[..n_test]);
        plan.val.extend(&class[n_test..n_test + n_val]);
        plan.train.extend(&class[n_test + n_val..]);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: i64, label: u8) -> LabeledExample {
        LabeledExample {
            post_id: id,
            user_id: id % 3,
            comment: format!("c{id}"),
            title: String::new(),
            path: "a".into(),
            label,
        }
    }

    fn post(id: i64, headline: Option<&str>, body: Option<&str>, status: Status) -> Post {
        Post {
            post_id: id,
            article_id: 1212,
            parent_post_id: None,
            user_id: 7721,
            headline: headline.map(String::from),
            body: body.map(String::from),
            timestamp: parse_datetime("2015-07-02 12:25:53.553").unwrap(),
            positive_votes: 0,
            negative_votes: 0,
            status,
        }
    }

    fn article() -> Article {
        Article {
            article_id: 1212,
            path: "Newsroom/Panorama/Chronik".into(),
            date: parse_datetime("2015-07-02 05:30:00.00").unwrap(),
            title: "Damenstift in Innsbruck: Adelsfrauen, die täglich für den Kaiser beten".into(),
            body: String::new(),
        }
    }

    #[test]
    fn merge_rules() {
        let posts = vec![
            post(
                81085,
                None,
                Some("Drei Packerl Karten á 36 Blatt pro Jahr"),
                Status::Online,
            ),
            post(2, Some("A"), Some("B"), Status::Deleted),
            post(3, None, None, Status::Online),
        ];
        let merged = make_examples(&[article()], &posts);
        assert_eq!(merged.dropped, vec![3]);
        assert_eq!(merged.examples.len(), 2);
        let first = &merged.examples[0];
        assert_eq!(first.comment, "Drei Packerl Karten á 36 Blatt pro Jahr");
        assert_eq!(first.label, 0);
        assert_eq!(first.path, "Newsroom/Panorama/Chronik");
        assert_eq!(merged.examples[1].comment, "A B");
        assert_eq!(merged.examples[1].label, 1);
    }

    #[test]
    fn balanced_input_keeps_everything() {
        let xs: Vec<_> = (0..8).map(|i| ex(i, (i % 2) as u8)).collect();
        let plan = balance_and_split(&xs, 0.1, 0.1, 1).unwrap();
        assert!(plan.ds_pool.is_empty());
        assert_eq!(plan.retained_len(), 8);
    }

    #[test]
    fn split_preconditions() {
        let xs: Vec<_> = (0..8).map(|i| ex(i, (i < 6) as u8)).collect();
        assert_eq!(
            balance_and_split(&xs, 0.1, 0.1, 1),
            Err(SplitError::Balance { online: 2, deleted: 6 })
        );
        let ys: Vec<_> = (0..4).map(|i| ex(i, 0)).collect();
        assert!(matches!(
            balance_and_split(&ys, 0.1, 0.1, 1),
            Err(SplitError::MissingClass { .. })
        ));
        assert!(matches!(
            balance_and_split(&xs, 0.5, 0.5, 1),
            Err(SplitError::Fractions { .. })
        ));
        let dup = vec![ex(1, 0), ex(1, 1)];
        assert_eq!(balance_and_split(&dup, 0.1, 0.1, 1), Err(SplitError::DuplicatePost(1)));
    }

    #[test]
    fn manifest_round_trip() {
        let xs: Vec<_> = (0..30).map(|i| ex(i, (i % 3 == 0) as u8)).collect();
        let plan = balance_and_split(&xs, 0.2, 0.2, 11).unwrap();
        let text = plan.to_manifest();
        assert!(text.starts_with("#seed=11,val_frac=0.2,test_frac=0.2,rng=chacha8-fisher-yates-v1\n"));
        assert_eq!(text.lines().count(), 31);
        assert_eq!(SplitPlan::from_manifest(&text).unwrap(), plan);
        assert!(SplitPlan::from_manifest("0,train\n").is_err());
    }

    #[test]
    fn datetime_formats() {
        assert!(parse_datetime("2015-07-02 12:25:53.553").is_some());
        assert!(parse_datetime("2015-07-02T05:30:00").is_some());
        assert!(parse_datetime("2015-07-02").is_some());
        assert!(parse_datetime("yesterday").is_none());
    }
}
