//! Deterministic synthetic forum data for demos, tests and benchmarks.
//!
//! Users are either regulars or trolls. A troll's comments are removed far
//! more often, while comment wording is only weakly tied to the label, so the
//! user's history carries most of the signal.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Article, Corpus, Post, Status};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub articles: usize,
    pub users: usize,
    pub posts: usize,
    /// Share of users that are trolls.
    pub troll_share: f64,
    pub troll_remove: f64,
    pub regular_remove: f64,
    /// Chance that a comment carries an insult, by outcome.
    pub insult_if_removed: f64,
    pub insult_if_kept: f64,
    /// Share of posts with only a headline and no body.
    pub headline_only: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 2023,
            articles: 40,
            users: 200,
            posts: 5000,
            troll_share: 0.3,
            troll_remove: 0.8,
            regular_remove: 0.1,
            insult_if_removed: 0.3,
            insult_if_kept: 0.1,
            headline_only: 0.05,
        }
    }
}

impl SynthConfig {
    /// Small corpus used by the offline demo.
    pub fn demo() -> Self {
        Self {
            articles: 12,
            users: 60,
            posts: 1200,
            ..Self::default()
        }
    }
}

const NEUTRAL: &[&str] = &[
    "artikel",
    "meinung",
    "frage",
    "antwort",
    "beispiel",
    "problem",
    "thema",
    "zeitung",
    "land",
    "stadt",
    "regierung",
    "partei",
    "politik",
    "wahl",
    "bericht",
    "zahl",
    "prozent",
    "jahr",
    "woche",
    "monat",
    "arbeit",
    "geld",
    "steuer",
    "schule",
    "kind",
    "familie",
    "wohnung",
    "miete",
    "verkehr",
    "auto",
    "bahn",
    "wetter",
    "sommer",
    "winter",
    "spiel",
    "mannschaft",
    "trainer",
    "tor",
    "saison",
    "musik",
    "film",
    "buch",
    "kunst",
    "wissenschaft",
    "forschung",
    "studie",
    "daten",
    "internet",
    "handy",
    "firma",
    "markt",
    "preis",
    "idee",
    "vorschlag",
    "kritik",
    "lob",
    "recht",
    "gesetz",
    "gericht",
    "polizei",
    "europa",
    "wien",
    "grenze",
    "sprache",
    "geschichte",
    "zukunft",
    "sicher",
    "wichtig",
    "richtig",
    "falsch",
    "interessant",
    "genau",
    "leider",
    "endlich",
    "vielleicht",
    "wirklich",
    "eigentlich",
    "danke",
    "gut",
    "schlecht",
];

const INSULTS: &[&str] = &[
    "idiot",
    "trottel",
    "depp",
    "vollpfosten",
    "schwachsinn",
    "dummkopf",
    "lügenpresse",
    "gesindel",
    "pack",
    "hetze",
    "versager",
    "lump",
];

const SECTIONS: &[(&str, &[&str])] = &[
    ("Newsroom/Inland/Politik", &["regierung", "wahl", "partei", "minister"]),
    (
        "Newsroom/International/Europa",
        &["europa", "grenze", "gipfel", "union"],
    ),
    ("Newsroom/Sport/Fussball", &["mannschaft", "tor", "trainer", "saison"]),
    ("Newsroom/Wirtschaft/Finanzen", &["markt", "preis", "steuer", "firma"]),
    (
        "Newsroom/Wissenschaft/Forschung",
        &["studie", "forschung", "daten", "klima"],
    ),
    ("Newsroom/Kultur/Musik", &["musik", "konzert", "festival", "album"]),
];

/// Every word the generator can emit, in a fixed order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = NEUTRAL.iter().chain(INSULTS).copied().collect();
    for (_, words) in SECTIONS {
        v.extend(words.iter().copied());
    }
    v.extend([
        "newsroom",
        "inland",
        "international",
        "sport",
        "fussball",
        "wirtschaft",
        "finanzen",
        "wissenschaft",
        "kultur",
    ]);
    v.sort_unstable();
    v.dedup();
    v
}

pub fn is_insult(word: &str) -> bool {
    INSULTS.contains(&word)
}

fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2016, 1, 1)
        .and_then(|d| d.and_hms_opt(6, 0, 0))
        .expect("valid date")
}

fn sentence(rng: &mut ChaCha8Rng, topic: &[&str], insult: bool) -> String {
    let len = rng.gen_range(4..=10);
    let mut words: Vec<&str> = (0..len)
        .map(|_| {
            if rng.gen_bool(0.25) {
                *topic.choose(rng).expect("topic words")
            } else {
                *NEUTRAL.choose(rng).expect("neutral words")
            }
        })
        .collect();
    if insult {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, INSULTS.choose(rng).expect("insults"));
    }
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        s.replace_range(..1, &first.to_uppercase());
    }
    s.push(if rng.gen_bool(0.2) { '!' } else { '.' });
    s
}

pub fn generate_corpus(cfg: &SynthConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let articles: Vec<Article> = (0..cfg.articles)
        .map(|i| {
            let (path, topic) = SECTIONS[i % SECTIONS.len()];
            let title_words: Vec<&str> = (0..rng.gen_range(3..=6))
                .map(|_| *topic.choose(&mut rng).expect("topic words"))
                .collect();
            let mut title = title_words.join(" ");
            title.replace_range(..1, &title[..1].to_uppercase());
            Article {
                article_id: 1000 + i as i64,
                path: path.to_string(),
                date: epoch() + Duration::hours(6 * i as i64),
                title,
                body: sentence(&mut rng, topic, false),
            }
        })
        .collect();
    let trolls: Vec<bool> = (0..cfg.users).map(|_| rng.gen_bool(cfg.troll_share)).collect();
    let mut posts = Vec::with_capacity(cfg.posts);
    for i in 0..cfg.posts {
        let a = rng.gen_range(0..articles.len());
        let user = rng.gen_range(0..cfg.users);
        let p_remove = if trolls[user] {
            cfg.troll_remove
        } else {
            cfg.regular_remove
        };
        let removed = rng.gen_bool(p_remove);
        let p_insult = if removed {
            cfg.insult_if_removed
        } else {
            cfg.insult_if_kept
        };
        let insult = rng.gen_bool(p_insult);
        let topic = SECTIONS[a % SECTIONS.len()].1;
        let headline_only = rng.gen_bool(cfg.headline_only);
        let headline = (headline_only || rng.gen_bool(0.3)).then(|| sentence(&mut rng, topic, insult && headline_only));
        let body = (!headline_only).then(|| sentence(&mut rng, topic, insult));
        let parent = (i > 0 && rng.gen_bool(0.2)).then(|| 1 + rng.gen_range(0..i) as i64);
        posts.push(Post {
            post_id: 1 + i as i64,
            article_id: articles[a].article_id,
            parent_post_id: parent,
            user_id: 500 + user as i64,
            headline,
            body,
            timestamp: articles[a].date + Duration::minutes(i as i64),
            positive_votes: rng.gen_range(0..20),
            negative_votes: rng.gen_range(0..if removed { 30 } else { 10 }),
            status: if removed { Status::Deleted } else { Status::Online },
        });
    }
    Corpus { articles, posts }
}

/// Word vectors for [`vocabulary`] in fastText text format.
///
/// Insults share one direction, section words another, so the vectors carry
/// enough structure for the sequence models to exploit.
pub fn generate_embeddings(seed: u64, dim: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let center = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let insult_center = center(&mut rng);
    let section_centers: Vec<Vec<f64>> = SECTIONS.iter().map(|_| center(&mut rng)).collect();
    let vocab = vocabulary();
    let mut out = format!("{} {dim}\n", vocab.len());
    for word in vocab {
        let base: Option<&Vec<f64>> = if is_insult(word) {
            Some(&insult_center)
        } else {
            SECTIONS
                .iter()
                .position(|(_, ws)| ws.contains(&word))
                .map(|k| &section_centers[k])
        };
        out.push_str(word);
        for j in 0..dim {
            let noise: f64 = rng.gen_range(-0.5..0.5);
            let v = base.map_or(0.0, |b| b[j]) + noise;
            out.push_str(&format!(" {v:.5}"));
        }
        out.push('\n');
    }
    out
}
