//! Needle-in-a-haystack grids.
//!
//! A haystack is a deterministic filler essay with one needle sentence placed
//! at a sentence boundary near the requested depth. A grid runs the pipeline
//! once per `(length, depth)` cell and records whether the needle sentence
//! reached the final cache and how well the generated answer matches.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{self, PipelineConfig, RunTrace};
use crate::provider::{AttentionProvider, PlantedOracle, PlantedOracleSpec, TargetSpan};
use crate::textseg::{segment_sentences, Sentence};
use crate::tokenizer::{ByteTokenizer, Tokenizer};

pub const DEFAULT_NEEDLE: &str =
    "The best thing to do in San Francisco is eat a sandwich and sit in Dolores Park on a sunny day.";
pub const DEFAULT_QUESTION: &str = "What is the best thing to do in San Francisco?";
pub const DEFAULT_ANSWER: &str = "eat a sandwich and sit in Dolores Park on a sunny day";

const SUBJECTS: &[&str] = &[
    "founders",
    "investors",
    "users",
    "programmers",
    "startups",
    "students",
    "writers",
    "companies",
    "engineers",
    "customers",
    "people",
    "teams",
    "hackers",
    "cities",
    "schools",
    "markets",
];
const VERBS: &[&str] = &[
    "build",
    "notice",
    "ignore",
    "underestimate",
    "learn",
    "change",
    "measure",
    "copy",
    "fund",
    "make",
    "abandon",
    "explore",
    "release",
    "question",
    "discover",
    "want",
];
const OBJECTS: &[&str] = &[
    "small projects",
    "new ideas",
    "hard problems",
    "good software",
    "early prototypes",
    "unusual markets",
    "growth",
    "their mistakes",
    "simple tools",
    "odd questions",
    "the wrong things",
    "ambitious plans",
    "boring details",
    "long essays",
    "fast feedback",
    "real demand",
];
const TAILS: &[&str] = &[
    "when nobody is watching",
    "long before it seems reasonable",
    "because the default is to wait",
    "in the first few months",
    "without asking for permission",
    "more often than they admit",
    "as soon as they can",
    "even when the numbers look bad",
    "after talking to a few users",
    "while the rest of the world argues",
    "for reasons that only make sense later",
    "in ways that are easy to miss",
];

/// Deterministic essay-like filler sentences, each ending in `.`.
#[derive(Debug, Clone)]
pub struct FillerGenerator {
    rng: ChaCha8Rng,
}

impl FillerGenerator {
    pub fn new(seed: u64) -> Self {
        FillerGenerator {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_sentence(&mut self) -> String {
        let pick = |rng: &mut ChaCha8Rng, list: &[&'static str]| *list.choose(rng).expect("non-empty list");
        let subject = pick(&mut self.rng, SUBJECTS);
        let verb = pick(&mut self.rng, VERBS);
        let object = pick(&mut self.rng, OBJECTS);
        let mut s = String::new();
        if self.rng.random_bool(0.3) {
            let _ = write!(s, "Most {subject} {verb} {object}");
        } else {
            let mut chars = subject.chars();
            let first = chars.next().expect("non-empty word").to_ascii_uppercase();
            let _ = write!(s, "{first}{} {verb} {object}", chars.as_str());
        }
        if self.rng.random_bool(0.7) {
            let _ = write!(s, " {}", pick(&mut self.rng, TAILS));
        }
        if self.rng.random_bool(0.25) {
            let _ = write!(
                s,
                ", and {} {} {}",
                pick(&mut self.rng, SUBJECTS),
                pick(&mut self.rng, VERBS),
                pick(&mut self.rng, OBJECTS)
            );
        }
        s.push('.');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSetup {
    pub needle: String,
    pub question: String,
    pub expected_answer: String,
    pub filler_seed: u64,
}

impl Default for NeedleSetup {
    fn default() -> Self {
        NeedleSetup {
            needle: DEFAULT_NEEDLE.into(),
            question: DEFAULT_QUESTION.into(),
            expected_answer: DEFAULT_ANSWER.into(),
            filler_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaystackSpec {
    /// Approximate document length in tokens.
    pub target_length: usize,
    pub filler_seed: u64,
    pub needle: String,
    /// Needle position as a percentage of the filler, 0 = start, 100 = end.
    pub depth_percent: f64,
}

#[derive(Debug, Clone)]
pub struct Haystack {
    pub document: String,
    pub sentences: Vec<Sentence>,
    pub needle_sentence_id: usize,
    pub document_tokens: usize,
}

impl Haystack {
    pub fn needle(&self) -> &Sentence {
        &self.sentences[self.needle_sentence_id]
    }
}

fn validate_needle(needle: &str, tokenizer: &dyn Tokenizer) -> Result<Vec<crate::tokenizer::TokenId>> {
    let needle = needle.trim();
    let sentences = segment_sentences(needle, tokenizer)?;
    let ends_cleanly = needle.ends_with(['.', '!', '?', '。', '！', '？']);
    if sentences.len() != 1 || !ends_cleanly {
        return Err(Error::config(
            "needle",
            format!(
                "needle must be exactly one sentence ending in a terminator, found {} piece(s)",
                sentences.len()
            ),
        ));
    }
    Ok(sentences[0].tokens.clone())
}

/// Filler sentences up to `target_length` tokens with the needle at the
/// sentence boundary closest to `depth_percent` of the filler.
pub fn build_haystack(spec: &HaystackSpec, tokenizer: &dyn Tokenizer) -> Result<Haystack> {
    if !(0.0..=100.0).contains(&spec.depth_percent) {
        return Err(Error::config(
            "depth",
            format!("{} is outside 0..=100", spec.depth_percent),
        ));
    }
    let needle = spec.needle.trim();
    let needle_tokens = validate_needle(needle, tokenizer)?.len();

    let mut generator = FillerGenerator::new(spec.filler_seed);
    let mut filler: Vec<String> = Vec::new();
    // boundaries[i] = filler tokens before sentence i, counting the joining space
    let mut boundaries = vec![0usize];
    let mut total = 0usize;
    loop {
        let sentence = generator.next_sentence();
        let len = tokenizer.encode(&format!(" {sentence}"))?.len();
        if total + len + needle_tokens + 1 > spec.target_length && filler.len() >= 2 {
            break;
        }
        if total + len + needle_tokens + 1 > spec.target_length {
            return Err(Error::config(
                "length",
                format!(
                    "{} tokens cannot hold the needle ({needle_tokens} tokens) plus filler",
                    spec.target_length
                ),
            ));
        }
        total += len;
        filler.push(sentence);
        boundaries.push(total);
    }

    let goal = spec.depth_percent / 100.0 * total as f64;
    let slot = boundaries
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            let da = (**a as f64 - goal).abs();
            let db = (**b as f64 - goal).abs();
            da.total_cmp(&db).then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .expect("at least one boundary");

    let mut pieces: Vec<&str> = filler.iter().map(String::as_str).collect();
    pieces.insert(slot, needle);
    let document = pieces.join(" ");
    let sentences = segment_sentences(&document, tokenizer)?;
    if sentences.len() != pieces.len() || sentences[slot].text.trim() != needle {
        return Err(Error::Logic(format!(
            "needle did not land as sentence {slot}: got {} sentences",
            sentences.len()
        )));
    }
    let document_tokens = sentences.iter().map(Sentence::token_len).sum();
    Ok(Haystack {
        document,
        sentences,
        needle_sentence_id: slot,
        document_tokens,
    })
}

/// Planted oracle whose only target is the needle.
pub fn oracle_for_needle(needle: &str) -> Result<PlantedOracle> {
    PlantedOracle::new(PlantedOracleSpec {
        targets: vec![TargetSpan::from_text(needle.trim(), &ByteTokenizer, 1.0)?],
        ..PlantedOracleSpec::default()
    })
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 1.0 if the expected answer appears verbatim (case-insensitive); otherwise
/// the share of its words that appear in the generated text.
pub fn answer_match(generated: &str, expected: &str) -> f64 {
    let expected_words = words(expected);
    if expected_words.is_empty() {
        return 1.0;
    }
    if generated.to_lowercase().contains(&expected.trim().to_lowercase()) {
        return 1.0;
    }
    let got = words(generated);
    let hits = expected_words.iter().filter(|w| got.contains(w)).count();
    hits as f64 / expected_words.len() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct NihCell {
    pub length: usize,
    pub depth: f64,
    pub document_tokens: usize,
    pub needle_sentence_id: Option<usize>,
    /// The needle sentence is in the final cache.
    pub recall_hit: bool,
    pub answer_match: f64,
    pub answer: String,
    pub trace: Option<RunTrace>,
    pub error: Option<String>,
}

impl NihCell {
    /// The heatmap value: answer match, or recall when no answer was produced.
    pub fn score(&self) -> f64 {
        if self.error.is_some() {
            0.0
        } else if self.answer.is_empty() {
            if self.recall_hit {
                1.0
            } else {
                0.0
            }
        } else {
            self.answer_match
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NihGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// Row-major by length, then depth.
    pub cells: Vec<NihCell>,
}

impl NihGrid {
    pub fn recall(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.cells.iter().filter(|c| c.recall_hit).count() as f64 / self.cells.len() as f64
    }

    pub fn cell(&self, length: usize, depth: f64) -> Option<&NihCell> {
        self.cells.iter().find(|c| c.length == length && c.depth == depth)
    }
}

fn run_cell(
    provider: &dyn AttentionProvider,
    setup: &NeedleSetup,
    config: &PipelineConfig,
    length: usize,
    depth: f64,
) -> NihCell {
    let mut cell = NihCell {
        length,
        depth,
        document_tokens: 0,
        needle_sentence_id: None,
        recall_hit: false,
        answer_match: 0.0,
        answer: String::new(),
        trace: None,
        error: None,
    };
    let spec = HaystackSpec {
        target_length: length,
        filler_seed: setup.filler_seed,
        needle: setup.needle.clone(),
        depth_percent: depth,
    };
    let outcome = build_haystack(&spec, provider.tokenizer()).and_then(|hay| {
        cell.document_tokens = hay.document_tokens;
        cell.needle_sentence_id = Some(hay.needle_sentence_id);
        pipeline::run(provider, &hay.document, &setup.question, config).map(|out| (hay, out))
    });
    match outcome {
        Ok((hay, out)) => {
            cell.recall_hit = out.cache.contains(hay.needle_sentence_id);
            cell.answer_match = answer_match(&out.answer, &setup.expected_answer);
            cell.answer = out.answer;
            cell.trace = Some(out.trace);
        }
        Err(e) => {
            log::warn!("cell length={length} depth={depth}: {e}");
            cell.error = Some(e.to_string());
        }
    }
    cell
}

/// Runs every `(length, depth)` cell on `jobs` worker threads.
///
/// Per-cell failures are recorded in the cell; only invalid grid parameters
/// fail the whole call.
pub fn run_grid(
    provider: &dyn AttentionProvider,
    setup: &NeedleSetup,
    lengths: &[usize],
    depths: &[f64],
    config: &PipelineConfig,
    jobs: usize,
) -> Result<NihGrid> {
    config.validate()?;
    validate_needle(&setup.needle, provider.tokenizer())?;
    if lengths.is_empty() || depths.is_empty() {
        return Err(Error::config("grid", "needs at least one length and one depth"));
    }
    if let Some(d) = depths.iter().find(|d| !(0.0..=100.0).contains(*d)) {
        return Err(Error::config("depth", format!("{d} is outside 0..=100")));
    }
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    let mut depths = depths.to_vec();
    depths.sort_by(f64::total_cmp);
    depths.dedup();

    let coords: Vec<(usize, f64)> = lengths
        .iter()
        .flat_map(|&l| depths.iter().map(move |&d| (l, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let cells = pool.install(|| {
        coords
            .par_iter()
            .map(|&(l, d)| run_cell(provider, setup, config, l, d))
            .collect()
    });
    Ok(NihGrid { lengths, depths, cells })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CsvRow {
    pub length: usize,
    pub depth: f64,
    pub document_tokens: usize,
    pub recall_hit: u8,
    pub answer_match: f64,
    pub score: f64,
    pub iterations: usize,
    pub forward_passes: usize,
    pub max_merged_len: usize,
    pub final_cache_tokens: usize,
    pub fed_ratio: f64,
    pub error: String,
}

pub fn grid_to_csv(grid: &NihGrid) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &grid.cells {
        let t = c.trace.as_ref();
        w.serialize(CsvRow {
            length: c.length,
            depth: c.depth,
            document_tokens: c.document_tokens,
            recall_hit: c.recall_hit as u8,
            answer_match: c.answer_match,
            score: c.score(),
            iterations: t.map_or(0, |t| t.iterations.len()),
            forward_passes: t.map_or(0, |t| t.forward_passes),
            max_merged_len: t.map_or(0, |t| t.max_merged_len),
            final_cache_tokens: t.map_or(0, |t| t.final_cache_tokens),
            fed_ratio: t.map_or(0.0, |t| t.fed_ratio),
            error: c.error.clone().unwrap_or_default(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Logic(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

const RED: (f64, f64, f64) = (215.0, 48.0, 39.0);
const YELLOW: (f64, f64, f64) = (254.0, 224.0, 139.0);
const GREEN: (f64, f64, f64) = (26.0, 152.0, 80.0);

/// Red at 0, yellow at 0.5, green at 1.
pub fn score_color(score: f64) -> String {
    let s = if score.is_nan() { 0.0 } else { score.clamp(0.0, 1.0) };
    let (from, to, t) = if s <= 0.5 {
        (RED, YELLOW, s * 2.0)
    } else {
        (YELLOW, GREEN, (s - 0.5) * 2.0)
    };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(from.0, to.0),
        lerp(from.1, to.1),
        lerp(from.2, to.2)
    )
}

const CELL_W: usize = 56;
const CELL_H: usize = 22;
const LEFT: usize = 64;
const TOP: usize = 36;

fn length_label(length: usize) -> String {
    if length >= 1000 && length.is_multiple_of(1000) {
        format!("{}k", length / 1000)
    } else if length >= 1024 && length.is_multiple_of(1024) {
        format!("{}Ki", length / 1024)
    } else {
        length.to_string()
    }
}

/// Lengths along x, depths along y (0% at the top).
pub fn grid_to_svg(grid: &NihGrid) -> String {
    let width = LEFT + CELL_W * grid.lengths.len() + 16;
    let height = TOP + CELL_H * grid.depths.len() + 40;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="16" text-anchor="middle">recall {:.3}</text>"#,
        width / 2,
        grid.recall()
    );
    for (yi, &depth) in grid.depths.iter().enumerate() {
        let y = TOP + yi * CELL_H;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{depth}%</text>"#,
            LEFT - 6,
            y + CELL_H / 2 + 4
        );
        for (xi, &length) in grid.lengths.iter().enumerate() {
            let score = grid.cell(length, depth).map_or(0.0, NihCell::score);
            let _ = writeln!(
                svg,
                r##"<rect x="{}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="#ffffff" data-length="{length}" data-depth="{depth}" data-score="{score}"/>"##,
                LEFT + xi * CELL_W,
                score_color(score)
            );
        }
    }
    let label_y = TOP + grid.depths.len() * CELL_H + 16;
    for (xi, &length) in grid.lengths.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{label_y}" text-anchor="middle">{}</text>"#,
            LEFT + xi * CELL_W + CELL_W / 2,
            length_label(length)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">context length (tokens)</text>"#,
        width / 2,
        label_y + 18
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes the grid CSV to `csv_path` and the heatmap next to it as `.svg`.
pub fn emit_heatmap(grid: &NihGrid, csv_path: &Path) -> Result<(PathBuf, PathBuf)> {
    let svg_path = csv_path.with_extension("svg");
    fs::write(csv_path, grid_to_csv(grid)?)?;
    fs::write(&svg_path, grid_to_svg(grid))?;
    Ok((csv_path.to_path_buf(), svg_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(length: usize, depth: f64) -> HaystackSpec {
        HaystackSpec {
            target_length: length,
            filler_seed: 7,
            needle: DEFAULT_NEEDLE.into(),
            depth_percent: depth,
        }
    }

    #[test]
    fn filler_is_deterministic_and_terminated() {
        let mut a = FillerGenerator::new(3);
        let mut b = FillerGenerator::new(3);
        for _ in 0..50 {
            let s = a.next_sentence();
            assert_eq!(s, b.next_sentence());
            assert!(s.ends_with('.'));
            assert_eq!(s.matches('.').count(), 1);
        }
        assert_ne!(
            FillerGenerator::new(4).next_sentence(),
            FillerGenerator::new(3).next_sentence()
        );
    }

    #[test]
    fn needle_lands_near_requested_depth() {
        let hay = build_haystack(&spec(10_000, 50.0), &ByteTokenizer).unwrap();
        assert!(hay.document_tokens <= 10_000 && hay.document_tokens > 9_800);
        let max_sentence = hay.sentences.iter().map(Sentence::token_len).max().unwrap();
        let filler_tokens = hay.document_tokens - hay.needle().token_len();
        let mid = filler_tokens / 2;
        assert!(hay.needle().token_start.abs_diff(mid) <= max_sentence);
        assert_eq!(hay.needle().text.trim(), DEFAULT_NEEDLE);
    }

    #[test]
    fn depth_extremes_are_first_and_last() {
        let first = build_haystack(&spec(3_000, 0.0), &ByteTokenizer).unwrap();
        assert_eq!(first.needle_sentence_id, 0);
        let last = build_haystack(&spec(3_000, 100.0), &ByteTokenizer).unwrap();
        assert_eq!(last.needle_sentence_id, last.sentences.len() - 1);
    }

    #[test]
    fn haystack_is_reproducible() {
        let a = build_haystack(&spec(4_000, 30.0), &ByteTokenizer).unwrap();
        let b = build_haystack(&spec(4_000, 30.0), &ByteTokenizer).unwrap();
        assert_eq!(a.document, b.document);
    }

    #[test]
    fn too_short_or_bad_needle_is_a_config_error() {
        assert!(matches!(
            build_haystack(&spec(50, 50.0), &ByteTokenizer),
            Err(Error::Config { field: "length", .. })
        ));
        let two = HaystackSpec {
            needle: "One. Two.".into(),
            ..spec(5_000, 50.0)
        };
        assert!(matches!(
            build_haystack(&two, &ByteTokenizer),
            Err(Error::Config { field: "needle", .. })
        ));
        let open = HaystackSpec {
            needle: "no terminator".into(),
            ..spec(5_000, 50.0)
        };
        assert!(matches!(
            build_haystack(&open, &ByteTokenizer),
            Err(Error::Config { field: "needle", .. })
        ));
        assert!(build_haystack(&spec(5_000, 101.0), &ByteTokenizer).is_err());
    }

    #[test]
    fn answer_match_scores() {
        assert_eq!(
            answer_match(
                "You should eat a sandwich and sit in Dolores Park on a sunny day.",
                DEFAULT_ANSWER
            ),
            1.0
        );
        assert_eq!(answer_match(DEFAULT_NEEDLE, DEFAULT_ANSWER), 1.0);
        let partial = answer_match("eat a sandwich", DEFAULT_ANSWER);
        assert!(partial > 0.0 && partial < 1.0);
        assert_eq!(answer_match("nothing relevant", "xyz"), 0.0);
    }

    #[test]
    fn score_colors_hit_the_anchors() {
        assert_eq!(score_color(0.0), "#d73027");
        assert_eq!(score_color(0.5), "#fee08b");
        assert_eq!(score_color(1.0), "#1a9850");
        assert_eq!(score_color(f64::NAN), "#d73027");
    }

    #[test]
    fn oracle_grid_recalls_and_renders() {
        let oracle = oracle_for_needle(DEFAULT_NEEDLE).unwrap();
        let config = PipelineConfig {
            chunk_size: 512,
            top_k: 100,
            ..PipelineConfig::default()
        };
        let grid = run_grid(
            &oracle,
            &NeedleSetup::default(),
            &[4000, 2000],
            &[0.0, 50.0, 100.0],
            &config,
            2,
        )
        .unwrap();
        assert_eq!(grid.lengths, vec![2000, 4000]);
        assert_eq!(grid.cells.len(), 6);
        assert_eq!(grid.recall(), 1.0);
        assert!(grid.cells.iter().all(|c| c.answer_match == 1.0));

        let rows = parse_csv(&grid_to_csv(&grid).unwrap()).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.recall_hit == 1 && r.error.is_empty()));
        let svg = grid_to_svg(&grid);
        assert_eq!(svg.matches("<rect").count(), 6);
        assert_eq!(svg.matches(r##"fill="#1a9850""##).count(), 6);
    }

    #[test]
    fn grid_parameter_errors() {
        let oracle = oracle_for_needle(DEFAULT_NEEDLE).unwrap();
        let config = PipelineConfig::default();
        let setup = NeedleSetup::default();
        assert!(run_grid(&oracle, &setup, &[], &[0.0], &config, 1).is_err());
        assert!(run_grid(&oracle, &setup, &[2000], &[-1.0], &config, 1).is_err());
        let bad = PipelineConfig { top_k: 0, ..config };
        assert!(run_grid(&oracle, &setup, &[2000], &[0.0], &bad, 1).is_err());
    }

    #[test]
    fn failing_cells_are_recorded_not_fatal() {
        let oracle = oracle_for_needle(DEFAULT_NEEDLE).unwrap();
        let grid = run_grid(
            &oracle,
            &NeedleSetup::default(),
            &[40, 3000],
            &[50.0],
            &PipelineConfig::default(),
            1,
        )
        .unwrap();
        assert!(grid.cell(40, 50.0).unwrap().error.is_some());
        assert!(grid.cell(3000, 50.0).unwrap().recall_hit);
    }
}
