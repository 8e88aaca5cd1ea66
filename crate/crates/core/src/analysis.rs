//! Diagnostics: attention heatmaps, per-layer retrieval sweeps and the
//! cache-mode comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attnkernel::AggregatedAttention;
use crate::error::{Error, Result};
use crate::nih::{answer_match, build_haystack, HaystackSpec};
use crate::pipeline::{self, CacheMode, PipelineConfig};
use crate::provider::{AttentionProvider, LayerSel, TargetSpan};
use crate::textseg::segment_sentences;
use crate::tokenizer::Tokenizer;

fn check_labels(matrix: &Array2<f64>, rows: &[String], cols: &[String]) -> Result<()> {
    if matrix.nrows() != rows.len() || matrix.ncols() != cols.len() {
        return Err(Error::Shape(format!(
            "matrix is {}x{} but got {} query and {} key labels",
            matrix.nrows(),
            matrix.ncols(),
            rows.len(),
            cols.len()
        )));
    }
    if matrix.is_empty() {
        return Err(Error::Shape("attention matrix is empty".into()));
    }
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// White at 0 to dark blue at the matrix maximum.
fn intensity_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |hi: f64| (255.0 + (hi - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(8.0), lerp(48.0), lerp(107.0))
}

pub fn attention_svg(
    attention: &AggregatedAttention,
    query_labels: &[String],
    key_labels: &[String],
) -> Result<String> {
    let m = &attention.matrix;
    check_labels(m, query_labels, key_labels)?;
    let max = m.iter().copied().fold(0.0_f64, f64::max);
    const CELL: usize = 14;
    let left = 8 + 7 * query_labels
        .iter()
        .map(|l| l.chars().count())
        .max()
        .unwrap_or(1)
        .min(24);
    let top = 8 + 7 * key_labels.iter().map(|l| l.chars().count()).max().unwrap_or(1).min(24);
    let width = left + CELL * m.ncols() + 8;
    let height = top + CELL * m.nrows() + 8;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    for (j, label) in key_labels.iter().enumerate() {
        let x = left + j * CELL + CELL / 2;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" transform="rotate(-90 {x} {})" >{}</text>"#,
            top - 4,
            top - 4,
            xml_escape(label)
        );
    }
    for (i, row) in m.rows().into_iter().enumerate() {
        let y = top + i * CELL;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 4,
            y + CELL - 3,
            xml_escape(&query_labels[i])
        );
        for (j, &v) in row.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" data-row="{i}" data-col="{j}" data-value="{v}"/>"#,
                left + j * CELL,
                intensity_color(t)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Header row of key labels; each following row is a query label then its weights.
pub fn attention_csv(
    attention: &AggregatedAttention,
    query_labels: &[String],
    key_labels: &[String],
) -> Result<String> {
    let m = &attention.matrix;
    check_labels(m, query_labels, key_labels)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::from("query")];
    header.extend(key_labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in query_labels.iter().zip(m.rows()) {
        let mut record = vec![label.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Logic(e.to_string()))
}

/// Reads back the values written by [`attention_csv`].
pub fn parse_attention_csv(text: &str) -> Result<Array2<f64>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let cols = reader.headers()?.len().saturating_sub(1);
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        if record.len() != cols + 1 {
            return Err(Error::Input(format!(
                "row {rows} has {} fields, expected {}",
                record.len(),
                cols + 1
            )));
        }
        for field in record.iter().skip(1) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Input(format!("bad value {field:?}: {e}")))?,
            );
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}

/// Writes `svg_path` and a `.csv` of the same weights beside it.
pub fn export_attention_heatmap(
    attention: &AggregatedAttention,
    query_labels: &[String],
    key_labels: &[String],
    svg_path: &Path,
) -> Result<()> {
    let svg = attention_svg(attention, query_labels, key_labels)?;
    let csv = attention_csv(attention, query_labels, key_labels)?;
    fs::write(svg_path, svg)?;
    fs::write(svg_path.with_extension("csv"), csv)?;
    Ok(())
}

/// Readable labels for a token sequence, one per token.
pub fn token_labels(tokens: &[crate::tokenizer::TokenId], tokenizer: &dyn Tokenizer) -> Result<Vec<String>> {
    tokens
        .iter()
        .map(|&t| {
            let s = tokenizer.decode(&[t])?;
            Ok(match s.as_str() {
                " " => "␣".to_string(),
                "\n" => "⏎".to_string(),
                _ => s,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QaSample {
    pub document: String,
    pub question: String,
    /// Must occur verbatim in the document.
    pub answer: String,
}

impl QaSample {
    /// Ids of the sentences overlapping the first occurrence of the answer.
    pub fn answer_sentences(&self, tokenizer: &dyn Tokenizer) -> Result<Option<Vec<usize>>> {
        let Some(byte_at) = self.document.find(self.answer.trim()) else {
            return Ok(None);
        };
        let start = self.document[..byte_at].chars().count();
        let end = start + self.answer.trim().chars().count();
        let sentences = segment_sentences(&self.document, tokenizer)?;
        let ids = sentences
            .iter()
            .filter(|s| {
                let s_end = s.char_start + s.text.chars().count();
                s.char_start < end && start < s_end
            })
            .map(|s| s.id)
            .collect();
        Ok(Some(ids))
    }
}

const PROJECTS: &[&str] = &[
    "Aurora", "Basalt", "Cinder", "Dune", "Ember", "Fjord", "Granite", "Harbor", "Iris", "Juniper", "Kestrel", "Lumen",
    "Meadow", "Nimbus", "Onyx", "Prairie", "Quartz", "Raven", "Sable", "Tundra",
];
const CODES: &[&str] = &[
    "falcon", "copper", "violet", "marble", "thistle", "lantern", "pebble", "orchid",
];

/// `count` haystacks of about `length` tokens, each hiding a distinct
/// "secret code" sentence at a random depth.
pub fn synthetic_qa(count: usize, length: usize, seed: u64, tokenizer: &dyn Tokenizer) -> Result<Vec<QaSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let project = format!(
                "{}{}",
                PROJECTS[i % PROJECTS.len()],
                if i >= PROJECTS.len() {
                    (i / PROJECTS.len()).to_string()
                } else {
                    String::new()
                }
            );
            let code = format!(
                "{}{}",
                CODES[rng.random_range(0..CODES.len())],
                rng.random_range(100..1000)
            );
            let needle = format!("The secret code for project {project} is {code}.");
            let hay = build_haystack(
                &HaystackSpec {
                    target_length: length,
                    filler_seed: seed.wrapping_add(i as u64 + 1),
                    needle,
                    depth_percent: rng.random_range(0..=100) as f64,
                },
                tokenizer,
            )?;
            Ok(QaSample {
                document: hay.document,
                question: format!("What is the secret code for project {project}?"),
                answer: code,
            })
        })
        .collect()
}

/// Oracle targets: every sample's answer sentence.
pub fn planted_targets(samples: &[QaSample], tokenizer: &dyn Tokenizer) -> Result<Vec<TargetSpan>> {
    samples
        .iter()
        .filter_map(|s| {
            let ids = s.answer_sentences(tokenizer).transpose()?;
            Some(ids.and_then(|ids| {
                let sentences = segment_sentences(&s.document, tokenizer)?;
                let text: String = ids.iter().map(|&i| sentences[i].text.as_str()).collect();
                TargetSpan::from_text(text.trim(), tokenizer, 1.0)
            }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScore {
    pub layer: usize,
    pub hits: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweep {
    pub layers: Vec<LayerScore>,
    pub evaluated: usize,
    /// Samples whose answer does not occur in the document.
    pub skipped: usize,
    /// Highest accuracy; ties go to the lower layer.
    pub best_layer: usize,
}

/// Retrieval accuracy at each layer: a hit means the final cache holds a
/// sentence overlapping the answer.
pub fn layer_sweep(
    provider: &dyn AttentionProvider,
    samples: &[QaSample],
    config: &PipelineConfig,
) -> Result<LayerSweep> {
    let tokenizer = provider.tokenizer();
    let mut usable = Vec::new();
    let mut skipped = 0;
    for s in samples {
        match s.answer_sentences(tokenizer)? {
            Some(ids) if !ids.is_empty() => usable.push((s, ids)),
            _ => {
                log::warn!("answer {:?} not found in its document; skipping", s.answer);
                skipped += 1;
            }
        }
    }
    if usable.is_empty() {
        return Err(Error::Input("no sample has its answer in the document".into()));
    }

    let mut layers = Vec::new();
    for layer in 0..provider.info().layers {
        let cfg = PipelineConfig {
            layer: LayerSel::Index(layer),
            answer_budget: 1,
            ..config.clone()
        };
        let mut hits = 0;
        for (s, ids) in &usable {
            let out = pipeline::run(provider, &s.document, &s.question, &cfg)?;
            if ids.iter().any(|&id| out.cache.contains(id)) {
                hits += 1;
            }
        }
        layers.push(LayerScore {
            layer,
            hits,
            accuracy: hits as f64 / usable.len() as f64,
        });
    }
    let best_layer = layers
        .iter()
        .fold(&layers[0], |best, l| if l.hits > best.hits { l } else { best })
        .layer;
    Ok(LayerSweep {
        layers,
        evaluated: usable.len(),
        skipped,
        best_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeScore {
    pub cache_mode: CacheMode,
    /// Share of samples whose answer sentence is in the final cache.
    pub recall: f64,
    pub mean_answer_match: f64,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub samples: usize,
    pub modes: Vec<ModeScore>,
}

/// Runs every sample once per cache mode.
pub fn cache_mode_ablation(
    provider: &dyn AttentionProvider,
    samples: &[QaSample],
    config: &PipelineConfig,
) -> Result<AblationReport> {
    let tokenizer = provider.tokenizer();
    let mut truth = Vec::with_capacity(samples.len());
    for s in samples {
        truth.push(s.answer_sentences(tokenizer)?.unwrap_or_default());
    }
    let mut modes = Vec::new();
    for mode in [CacheMode::TokenIds, CacheMode::PastState] {
        let cfg = PipelineConfig {
            cache_mode: mode,
            ..config.clone()
        };
        let (mut hits, mut matched, mut errors) = (0usize, 0.0, 0usize);
        for (s, ids) in samples.iter().zip(&truth) {
            match pipeline::run(provider, &s.document, &s.question, &cfg) {
                Ok(out) => {
                    if ids.iter().any(|&id| out.cache.contains(id)) {
                        hits += 1;
                    }
                    matched += answer_match(&out.answer, &s.answer);
                }
                Err(e @ Error::UnsupportedMode(_)) => return Err(e),
                Err(e) => {
                    log::warn!("{mode} sample failed: {e}");
                    errors += 1;
                }
            }
        }
        let n = samples.len().max(1) as f64;
        modes.push(ModeScore {
            cache_mode: mode,
            recall: hits as f64 / n,
            mean_answer_match: matched / n,
            errors,
        });
    }
    Ok(AblationReport {
        samples: samples.len(),
        modes,
    })
}
