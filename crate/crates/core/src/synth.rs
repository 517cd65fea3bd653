//! Seeded synthetic corpora for demos, benchmarks and tests.
//!
//! Texts are built from a small per-class vocabulary plus shared filler, so
//! items of one class sit close together under any bag-of-words embedding.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classify::LabeledExample;
use crate::store::{FeedbackRecord, RecordStore, StoreError};

const FILLER: &[&str] = &[
    "app", "today", "again", "really", "phone", "version", "update", "please", "screen", "still",
    "after", "when", "every", "time", "since", "open", "use", "work", "new", "my",
];

/// Label frequencies of an 18-class long-tail corpus of 300 items.
pub const LONG_TAIL_COUNTS: [usize; 18] = [
    40, 35, 30, 27, 24, 22, 20, 18, 16, 14, 12, 10, 8, 7, 6, 5, 4, 2,
];

pub fn long_tail_labels() -> Vec<String> {
    (0..LONG_TAIL_COUNTS.len())
        .map(|i| format!("class {}", (b'a' + i as u8) as char))
        .collect()
}

fn class_words(label: &str) -> [String; 3] {
    let slug: String = label.chars().filter(|c| c.is_alphanumeric()).collect();
    [
        format!("{slug}alpha"),
        format!("{slug}beta"),
        format!("{slug}gamma"),
    ]
}

fn sentence(rng: &mut ChaCha8Rng, label: &str, id: usize) -> String {
    let words = class_words(label);
    let mut parts: Vec<String> = vec![format!("item{id:04}")];
    for _ in 0..3 {
        parts.push(words.choose(rng).expect("non-empty").clone());
    }
    for _ in 0..rng.random_range(2..5) {
        parts.push(FILLER.choose(rng).expect("non-empty").to_string());
    }
    parts.join(" ")
}

/// `counts[i]` items labeled `labels[i]`, ids `r0000..`, interleaved by a
/// seeded shuffle.
pub fn labeled_corpus(labels: &[String], counts: &[usize], seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pending: Vec<&String> = labels
        .iter()
        .zip(counts)
        .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
        .collect();
    rand::seq::SliceRandom::shuffle(pending.as_mut_slice(), &mut rng);
    pending
        .into_iter()
        .enumerate()
        .map(|(i, label)| LabeledExample {
            id: format!("r{i:04}"),
            text: sentence(&mut rng, label, i),
            label: label.clone(),
        })
        .collect()
}

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

/// Feedback records over `topics`, one per hour from a fixed epoch. Returns
/// the records and the topic index each was drawn from.
pub fn topic_records(topics: &[&str], n: usize, seed: u64) -> (Vec<FeedbackRecord>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0..topics.len());
        let mut r = FeedbackRecord::new(
            format!("f{i:04}"),
            sentence(&mut rng, topics[t], i),
            epoch() + Duration::hours(i as i64),
        );
        r.source = "synthetic".into();
        records.push(r);
        truth.push(t);
    }
    (records, truth)
}

/// Topics of the app-review corpus, most frequent first.
pub const REVIEW_TOPICS: [&str; 7] = [
    "crash",
    "login",
    "performance",
    "battery",
    "ui",
    "notifications",
    "payments",
];
const REVIEW_WEIGHTS: [u32; 7] = [24, 19, 15, 12, 11, 10, 9];
const REVIEW_SOURCES: [&str; 3] = ["app store", "forum", "twitter"];

fn review_text(rng: &mut ChaCha8Rng, topic: &str, sentiment: &str) -> String {
    let (neg, neu, pos): (&[&str], &[&str], &[&str]) = match topic {
        "crash" => (
            &[
                "The app crashes every time I open the camera",
                "Crashes right after the latest update",
                "It keeps crashing when I switch tabs",
            ],
            &[
                "Had one crash this week, otherwise fine",
                "Crashed once while uploading a photo",
            ],
            &["No more crashes since the fix, thank you"],
        ),
        "login" => (
            &[
                "I cannot log in with my Google account",
                "Login fails with an unknown error",
                "Two factor codes never arrive so I cannot sign in",
            ],
            &["Login asks for my password every day"],
            &["Signing in with a passkey is quick now"],
        ),
        "performance" => (
            &[
                "Scrolling the feed is painfully slow",
                "The app takes ages to load my messages",
            ],
            &["Loading is a bit slow on older phones"],
            &["Much faster than the previous version"],
        ),
        "battery" => (
            &[
                "Battery drains fast while the app runs in the background",
                "My phone gets hot and the battery dies by noon",
            ],
            &["Battery use seems higher than before"],
            &["Battery life improved after the update"],
        ),
        "ui" => (
            &[
                "The new layout hides the settings menu",
                "Buttons are too small to tap",
            ],
            &["Dark mode colours could use more contrast"],
            &[
                "Love the new dark mode",
                "The redesign looks clean and simple",
            ],
        ),
        "notifications" => (
            &[
                "Notifications arrive hours late",
                "I get duplicate notifications for every message",
            ],
            &["Please add a way to mute notifications per chat"],
            &["Notification settings are easy to find now"],
        ),
        _ => (
            &[
                "I was charged twice for my subscription",
                "The payment page rejects my card",
            ],
            &["Please support more payment methods"],
            &["Paying with the wallet works smoothly"],
        ),
    };
    let pool = match sentiment {
        "negative" => neg,
        "neutral" => neu,
        _ => pos,
    };
    pool.choose(rng).expect("non-empty pool").to_string()
}

/// One synthetic app review with the annotations it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSample {
    pub record: FeedbackRecord,
    pub topics: Vec<String>,
    pub sentiment: String,
}

/// `n` readable app reviews over [`REVIEW_TOPICS`], spread across April and
/// May 2024. About one in six mentions a second topic.
pub fn review_samples(n: usize, seed: u64) -> Vec<ReviewSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: u32 = REVIEW_WEIGHTS.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut x = rng.random_range(0..total);
        for (i, w) in REVIEW_WEIGHTS.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        REVIEW_WEIGHTS.len() - 1
    };
    let start = Utc.with_ymd_and_hms(2024, 4, 1, 0, 0, 0).unwrap();
    let span_minutes = 61 * 24 * 60;
    let mut offsets: Vec<i64> = (0..n).map(|_| rng.random_range(0..span_minutes)).collect();
    offsets.sort_unstable();
    (0..n)
        .map(|i| {
            let t = pick(&mut rng);
            let sentiment = match rng.random_range(0..10) {
                0..=5 => "negative",
                6..=7 => "neutral",
                _ => "positive",
            };
            let mut topics = vec![REVIEW_TOPICS[t].to_string()];
            let mut text = review_text(&mut rng, REVIEW_TOPICS[t], sentiment);
            if rng.random_range(0..6) == 0 {
                let u = pick(&mut rng);
                if u != t {
                    topics.push(REVIEW_TOPICS[u].to_string());
                    text = format!(
                        "{text}. Also: {}",
                        review_text(&mut rng, REVIEW_TOPICS[u], "negative").to_lowercase()
                    );
                }
            }
            let mut record = FeedbackRecord::new(
                format!("rv{i:04}"),
                text,
                start + Duration::minutes(offsets[i]),
            );
            record.language = "en".into();
            record.source = REVIEW_SOURCES
                .choose(&mut rng)
                .expect("non-empty")
                .to_string();
            ReviewSample {
                record,
                topics,
                sentiment: sentiment.into(),
            }
        })
        .collect()
}

/// An in-memory store of [`review_samples`] with a `sentiment` dimension and
/// second-round topics filled in.
pub fn review_store(n: usize, seed: u64) -> Result<RecordStore, StoreError> {
    let samples = review_samples(n, seed);
    let store = RecordStore::in_memory();
    store.declare_dimension(
        "sentiment",
        &["negative".into(), "neutral".into(), "positive".into()],
    )?;
    store.insert_records(samples.iter().map(|s| s.record.clone()).collect())?;
    let labels: Vec<(String, String)> = samples
        .iter()
        .map(|s| (s.record.id.clone(), s.sentiment.clone()))
        .collect();
    store.annotate_many(&labels, "sentiment")?;
    let topics: Vec<(String, Vec<String>)> = samples
        .iter()
        .map(|s| (s.record.id.clone(), s.topics.clone()))
        .collect();
    store.set_topics_many(&topics, 2)?;
    Ok(store)
}
