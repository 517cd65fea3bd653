//! Kernel-side implementations of the built-in analysis plugins.
//!
//! Both render deterministic SVG so artifacts are byte-stable across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use feedlens_core::text::{is_stopword, tokenize};

use super::value::{Table, Value};

/// Module path each built-in plugin is importable from.
pub const BUILTIN_PLUGINS: &[(&str, &str)] = &[
    ("issue_river", "feedlens.plugins.issue_river"),
    ("word_cloud", "feedlens.plugins.word_cloud"),
];

const PALETTE: &[&str] = &[
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const LEGEND: f64 = 180.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn split_topics(cell: &Value) -> Vec<String> {
    cell.to_str()
        .split(';')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiverSummary {
    pub svg: String,
    pub topics: Vec<String>,
    pub periods: Vec<String>,
}

/// Stacked areas of per-period topic counts for the `top_n` most frequent
/// topics. Periods are timestamp prefixes: `hour`, `day`, `month` or `year`.
pub fn issue_river(
    table: &Table,
    topic_column: &str,
    time_column: &str,
    top_n: usize,
    bucket: &str,
) -> Result<RiverSummary, String> {
    let ti = table
        .column_index(topic_column)
        .ok_or_else(|| format!("KeyError: '{topic_column}'"))?;
    let ci = table
        .column_index(time_column)
        .ok_or_else(|| format!("KeyError: '{time_column}'"))?;
    let prefix = match bucket {
        "hour" => 13,
        "day" => 10,
        "month" => 7,
        "year" => 4,
        other => {
            return Err(format!(
                "ValueError: unknown bucket '{other}'; use hour, day, month or year"
            ))
        }
    };
    if top_n == 0 {
        return Err("ValueError: top_n must be positive".into());
    }
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    let mut grid: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for row in &table.rows {
        let ts = row[ci].to_str();
        let period: String = ts.chars().take(prefix).collect();
        if period.is_empty() {
            continue;
        }
        for t in split_topics(&row[ti]) {
            if t == "others" {
                continue;
            }
            *totals.entry(t.clone()).or_default() += 1;
            *grid
                .entry(period.clone())
                .or_default()
                .entry(t)
                .or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let topics: Vec<String> = ranked.into_iter().take(top_n).map(|(t, _)| t).collect();
    let periods: Vec<String> = grid.keys().cloned().collect();

    let counts: Vec<Vec<f64>> = periods
        .iter()
        .map(|p| {
            topics
                .iter()
                .map(|t| grid[p].get(t).copied().unwrap_or(0) as f64)
                .collect()
        })
        .collect();
    let max_stack = counts
        .iter()
        .map(|c| c.iter().sum::<f64>())
        .fold(0.0, f64::max)
        .max(1.0);
    let plot_w = WIDTH - LEGEND - 40.0;
    let x = |i: usize| {
        20.0 + if periods.len() > 1 {
            plot_w * i as f64 / (periods.len() - 1) as f64
        } else {
            plot_w / 2.0
        }
    };
    let y_scale = (HEIGHT - 60.0) / max_stack;
    let mid = HEIGHT / 2.0 - 10.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    // centred stacking: each period's stack is balanced around the midline
    let mut lower: Vec<f64> = counts
        .iter()
        .map(|c| mid - c.iter().sum::<f64>() * y_scale / 2.0)
        .collect();
    for (k, topic) in topics.iter().enumerate() {
        let upper: Vec<f64> = lower
            .iter()
            .zip(&counts)
            .map(|(l, c)| l + c[k] * y_scale)
            .collect();
        let mut points: Vec<String> = (0..periods.len())
            .map(|i| format!("{:.2},{:.2}", x(i), upper[i]))
            .collect();
        points.extend(
            (0..periods.len())
                .rev()
                .map(|i| format!("{:.2},{:.2}", x(i), lower[i])),
        );
        let _ = writeln!(
            svg,
            "<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.85\"><title>{}</title></polygon>",
            points.join(" "),
            PALETTE[k % PALETTE.len()],
            esc(topic)
        );
        lower = upper;
    }
    for (i, p) in periods.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            x(i),
            HEIGHT - 8.0,
            esc(p)
        );
    }
    for (k, topic) in topics.iter().enumerate() {
        let ly = 24.0 + 18.0 * k as f64;
        let lx = WIDTH - LEGEND;
        let _ = writeln!(
            svg,
            "<rect x=\"{lx}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>",
            ly - 10.0,
            PALETTE[k % PALETTE.len()]
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"12\">{}</text>",
            lx + 18.0,
            esc(topic)
        );
    }
    svg.push_str("</svg>\n");
    Ok(RiverSummary {
        svg,
        topics,
        periods,
    })
}

/// The `top_n` most frequent content words sized by frequency.
pub fn word_cloud(
    table: &Table,
    text_column: &str,
    top_n: usize,
) -> Result<(String, Vec<(String, usize)>), String> {
    let ci = table
        .column_index(text_column)
        .ok_or_else(|| format!("KeyError: '{text_column}'"))?;
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for row in &table.rows {
        for t in tokenize(&row[ci].to_str()) {
            if !is_stopword(&t) && t.chars().any(char::is_alphabetic) {
                *tf.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = tf.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    let max = ranked.first().map(|(_, c)| *c).unwrap_or(1) as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let (mut cx, mut cy, mut row_h) = (10.0f64, 10.0f64, 0.0f64);
    for (k, (word, count)) in ranked.iter().enumerate() {
        let size = 12.0 + 36.0 * (*count as f64 / max);
        let w = size * 0.6 * word.chars().count() as f64 + 12.0;
        if cx + w > WIDTH - 10.0 {
            cx = 10.0;
            cy += row_h + 6.0;
            row_h = 0.0;
        }
        if cy + size > HEIGHT {
            break;
        }
        let _ = writeln!(
            svg,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" font-size=\"{size:.1}\" fill=\"{}\">{}</text>",
            cy + size,
            PALETTE[k % PALETTE.len()],
            esc(word)
        );
        cx += w;
        row_h = row_h.max(size);
    }
    svg.push_str("</svg>\n");
    Ok((svg, ranked))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &str)]) -> Table {
        Table {
            columns: vec!["topics".into(), "timestamp".into(), "text".into()],
            rows: rows
                .iter()
                .map(|(t, ts)| {
                    vec![
                        Value::Str(t.to_string()),
                        Value::Str(ts.to_string()),
                        Value::Str(format!("{t} here")),
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn river_ranks_and_buckets() {
        let t = table(&[
            ("crash; login", "2024-01-01T01:00:00Z"),
            ("crash", "2024-01-02T01:00:00Z"),
            ("ui", "2024-01-02T05:00:00Z"),
            ("others", "2024-01-03T05:00:00Z"),
        ]);
        let r = issue_river(&t, "topics", "timestamp", 2, "day").unwrap();
        assert_eq!(r.topics, ["crash", "login"]);
        assert_eq!(r.periods, ["2024-01-01", "2024-01-02"]);
        assert_eq!(r.svg.matches("<polygon").count(), 2);
        assert_eq!(
            r.svg,
            issue_river(&t, "topics", "timestamp", 2, "day")
                .unwrap()
                .svg
        );
        assert!(issue_river(&t, "nope", "timestamp", 2, "day")
            .unwrap_err()
            .starts_with("KeyError"));
        assert!(issue_river(&t, "topics", "timestamp", 2, "week").is_err());
    }

    #[test]
    fn cloud_counts_content_words() {
        let t = table(&[("crash", "x"), ("crash", "y"), ("login", "z")]);
        let (svg, words) = word_cloud(&t, "text", 10).unwrap();
        assert_eq!(words[0], ("crash".to_string(), 2));
        assert!(svg.contains(">login<"));
    }
}
