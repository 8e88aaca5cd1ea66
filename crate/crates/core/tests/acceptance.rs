//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use infiniretri::analysis::{cache_mode_ablation, layer_sweep, planted_targets, synthetic_qa};
use infiniretri::attnkernel::{aggregate_heads, toy_forward, AggregatedAttention, ToyModelSpec};
use infiniretri::nih::{self, oracle_for_needle, NeedleSetup, NihGrid};
use infiniretri::pipeline::{run, PipelineConfig};
use infiniretri::provider::{AttentionProvider, PlantedOracle, PlantedOracleSpec, ProviderRequest, ToyProvider};
use infiniretri::retrieval::{phrase_importance, select_top_k, token_importance, ImportanceVector};
use infiniretri::textseg::{build_chunks, segment_sentences};
use infiniretri::tokenizer::{ByteTokenizer, Tokenizer};

const FEATURE_TOLERANCE: f64 = 1e-9;
const FEATURE_TIME_LIMIT: Duration = Duration::from_secs(10);
const ROW_SUM_TOLERANCE: f64 = 1e-5;
const HEAD_SUM_TOLERANCE: f64 = 1e-4;
const NIH_TIME_LIMIT: Duration = Duration::from_secs(300);
const NIH_LENGTHS: [usize; 6] = [2_000, 4_000, 8_000, 16_000, 32_000, 64_000];
const SWEEP_LAYERS: usize = 6;
const SWEEP_NOISE: f64 = 1000.0;
const SWEEP_TOP_K: usize = 15;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn nih_depths() -> Vec<f64> {
    (0..=10).map(|d| d as f64 * 10.0).collect()
}

fn nih_config() -> PipelineConfig {
    PipelineConfig {
        chunk_size: 1024,
        top_k: 300,
        phrase_token_num: 15,
        ..PipelineConfig::default()
    }
}

fn nih_grid() -> Result<(NihGrid, Duration), String> {
    let oracle = oracle_for_needle(nih::DEFAULT_NEEDLE).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let grid = nih::run_grid(
        &oracle,
        &NeedleSetup::default(),
        &NIH_LENGTHS,
        &nih_depths(),
        &nih_config(),
        4,
    )
    .map_err(|e| e.to_string())?;
    Ok((grid, started.elapsed()))
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random::<f64>())
}

/// Nested-loop phrase features and token scores, written without reference to the library.
fn feature_oracle(a: &Array2<f64>, k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, m) = a.dim();
    let mut t = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for u in 0..k {
                if j + u < m {
                    acc += a[[i, j + u]];
                }
            }
            t[i][j] = acc;
        }
    }
    let mut s = vec![0.0; m];
    for row in &t {
        for (col, v) in row.iter().enumerate() {
            s[col] += v;
        }
    }
    (t, s)
}

fn phrase_and_token_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let m = rng.random_range(1..=64);
        let k = [1, 2, 15][case % 3];
        let a = random_matrix(&mut rng, n, m);
        let features = phrase_importance(&AggregatedAttention { matrix: a.clone() }, k).map_err(|e| e.to_string())?;
        let scores = token_importance(&features).map_err(|e| e.to_string())?;
        let (t, s) = feature_oracle(&a, k);
        for i in 0..n {
            for j in 0..m {
                worst = worst.max((features.values[[i, j]] - t[i][j]).abs());
            }
        }
        for (j, want) in s.iter().enumerate() {
            worst = worst.max((scores.scores[j] - want).abs());
        }
        ensure(worst <= FEATURE_TOLERANCE, || {
            format!("case {case} (n={n} m={m} k={k}) deviates by {worst:e}")
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < FEATURE_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("1000 matrices, max deviation {worst:e}, {elapsed:.2?}"))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa77e);
    let mut checked_rows = 0usize;
    for case in 0..100 {
        let spec = ToyModelSpec {
            layers: rng.random_range(1..=3),
            heads: rng.random_range(1..=4),
            head_dim: [4, 8, 16][rng.random_range(0..3)],
            hidden_dim: 32,
            seed: rng.random(),
            ..ToyModelSpec::default()
        };
        let m = rng.random_range(1..=96);
        let tokens: Vec<u32> = (0..m).map(|_| rng.random_range(0..256)).collect();
        let q_start = rng.random_range(0..m);
        let layers: Vec<usize> = (0..spec.layers).collect();
        let (tensors, _) = toy_forward(&spec, &tokens, &layers, q_start..m).map_err(|e| e.to_string())?;
        for t in &tensors {
            for head in &t.heads {
                for (r, row) in head.rows().into_iter().enumerate() {
                    let visible = q_start + r + 1;
                    let sum: f64 = row.iter().take(visible).sum();
                    ensure((sum - 1.0).abs() <= ROW_SUM_TOLERANCE, || {
                        format!("case {case}: row sum {sum}")
                    })?;
                    ensure(row.iter().skip(visible).all(|&v| v == 0.0), || {
                        format!("case {case}: non-zero above the mask")
                    })?;
                    ensure(row.iter().all(|&v| v >= 0.0), || {
                        format!("case {case}: negative weight")
                    })?;
                    checked_rows += 1;
                }
            }
            let summed = aggregate_heads(t).map_err(|e| e.to_string())?;
            let h = t.num_heads() as f64;
            for row in summed.matrix.rows() {
                let sum: f64 = row.sum();
                ensure((sum - h).abs() <= HEAD_SUM_TOLERANCE, || {
                    format!("case {case}: aggregated row sum {sum}, H={h}")
                })?;
            }
        }
    }
    Ok(format!("100 forwards, {checked_rows} head rows"))
}

fn top_k_oracle(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k);
    order.sort_unstable();
    order
}

fn top_k_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70b);
    let mut tie_cases = 0;
    for case in 0..1000 {
        let len = rng.random_range(1..=200);
        let heavy_ties = case % 2 == 0;
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if heavy_ties {
                    rng.random_range(0..3) as f64
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        tie_cases += heavy_ties as usize;
        let top_k = rng.random_range(1..=len + 5);
        let got = select_top_k(&ImportanceVector { scores: scores.clone() }, top_k);
        let want = top_k_oracle(&scores, top_k);
        ensure(got == want, || format!("case {case}: {got:?} != {want:?}"))?;
    }
    let flat = select_top_k(&ImportanceVector { scores: vec![1.0; 6] }, 2);
    ensure(flat == vec![0, 1], || format!("equal scores chose {flat:?}"))?;
    let mixed = select_top_k(
        &ImportanceVector {
            scores: vec![0.5, 2.0, 0.5, 2.0, 0.5],
        },
        3,
    );
    ensure(mixed == vec![0, 1, 3], || format!("tie-break chose {mixed:?}"))?;
    Ok(format!(
        "1000 vectors ({tie_cases} heavy-tie), earlier-position tie-break holds"
    ))
}

fn planted_nih(grid: &NihGrid, elapsed: Duration) -> Outcome {
    ensure(grid.cells.len() == NIH_LENGTHS.len() * 11, || {
        format!("{} cells", grid.cells.len())
    })?;
    for c in &grid.cells {
        ensure(c.error.is_none(), || {
            format!("cell {}x{}: {}", c.length, c.depth, c.error.clone().unwrap_or_default())
        })?;
        ensure(c.recall_hit, || {
            format!("needle lost at length {} depth {}", c.length, c.depth)
        })?;
    }
    ensure(elapsed < NIH_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cells, recall {:.3}, {elapsed:.2?}",
        grid.cells.len(),
        grid.recall()
    ))
}

fn bounded_window(grid: &NihGrid) -> Outcome {
    let config = nih_config();
    let mut fed: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    let mut worst_window = 0;
    for c in &grid.cells {
        let t = c
            .trace
            .as_ref()
            .ok_or_else(|| format!("cell {}x{} has no trace", c.length, c.depth))?;
        ensure(t.forward_passes == t.chunk_count + 1, || {
            format!("{} passes for {} chunks", t.forward_passes, t.chunk_count)
        })?;
        ensure(t.iterations.len() == t.chunk_count, || {
            "iteration count differs from chunk count".into()
        })?;
        for it in &t.iterations {
            let bound = config.chunk_size + it.cache_tokens_before + it.question_tokens;
            ensure(it.merged_len <= bound, || {
                format!("merged {} > bound {bound}", it.merged_len)
            })?;
        }
        worst_window = worst_window.max(t.max_merged_len);
        fed.entry(c.depth.to_bits()).or_default().push((c.length, t.fed_ratio));
    }
    for series in fed.values_mut() {
        series.sort_by_key(|(l, _)| *l);
        for pair in series.windows(2) {
            ensure(pair[1].1 < pair[0].1, || {
                format!("fed ratio did not fall from {:?} to {:?}", pair[0], pair[1])
            })?;
        }
    }
    let at = |len| {
        grid.cells
            .iter()
            .filter(|c| c.length == len)
            .map(|c| c.trace.as_ref().map_or(0.0, |t| t.fed_ratio))
            .sum::<f64>()
            / 11.0
    };
    Ok(format!(
        "largest window {worst_window} tokens; mean fed ratio {:.3} at 2k -> {:.4} at 64k",
        at(2_000),
        at(64_000)
    ))
}

fn no_loss_fallback() -> Outcome {
    let toy = ToyProvider::new(ToyModelSpec::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xfa11);
    let question = " What did the log say?";
    let chunk_size = 256;
    let mut checked = 0;
    for sentences in [3usize, 9, 17, 25, 30] {
        let doc: String = (0..sentences)
            .map(|i| format!("Entry {i} notes {} birds.", rng.random_range(1..500)))
            .collect::<Vec<_>>()
            .join(" ");
        let segmented = segment_sentences(&doc, &ByteTokenizer).map_err(|e| e.to_string())?;
        let chunks = build_chunks(&segmented, chunk_size).map_err(|e| e.to_string())?.len();
        ensure(chunks <= 4, || format!("{chunks} chunks"))?;
        let config = PipelineConfig {
            chunk_size,
            top_k: 100_000,
            answer_budget: 24,
            ..PipelineConfig::default()
        };
        let out = run(&toy, &doc, question, &config).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..segmented.len()).collect();
        ensure(out.cache.ids() == all, || {
            format!("cache {:?} is not every sentence", out.cache.ids())
        })?;

        let mut tokens = ByteTokenizer.encode(&doc).map_err(|e| e.to_string())?;
        tokens.extend(ByteTokenizer.encode(question).map_err(|e| e.to_string())?);
        let direct = toy
            .generate(&ProviderRequest::generate(tokens, 24))
            .map_err(|e| e.to_string())?;
        ensure(out.answer_tokens == direct, || {
            "answer differs from single-window generation".into()
        })?;
        checked += 1;
    }
    Ok(format!(
        "{checked} documents of 1-4 chunks, answers identical token for token"
    ))
}

fn sweep_recovers_peak() -> Outcome {
    let samples = synthetic_qa(20, 4000, 11, &ByteTokenizer).map_err(|e| e.to_string())?;
    let targets = planted_targets(&samples, &ByteTokenizer).map_err(|e| e.to_string())?;
    let config = PipelineConfig {
        top_k: SWEEP_TOP_K,
        ..PipelineConfig::default()
    };
    let mut summary = Vec::new();
    for peak in 0..SWEEP_LAYERS {
        let oracle = PlantedOracle::new(PlantedOracleSpec {
            targets: targets.clone(),
            noise: SWEEP_NOISE,
            seed: 5,
            layer_profile: PlantedOracleSpec::peaked_profile(SWEEP_LAYERS, peak),
            ..PlantedOracleSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let sweep = layer_sweep(&oracle, &samples, &config).map_err(|e| e.to_string())?;
        let hits: Vec<usize> = sweep.layers.iter().map(|l| l.hits).collect();
        let peak_hits = hits[peak];
        let runner_up = hits
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != peak)
            .map(|(_, &h)| h)
            .max()
            .unwrap_or(0);
        ensure(sweep.best_layer == peak && peak_hits > runner_up, || {
            format!("peak {peak}: hits {hits:?}")
        })?;
        summary.push(format!("L{peak}:{peak_hits}/{}", sweep.evaluated));
    }
    Ok(format!(
        "argmax matches the peak for all {SWEEP_LAYERS} layers ({})",
        summary.join(" ")
    ))
}

fn determinism() -> Outcome {
    let toy = ToyProvider::new(ToyModelSpec {
        seed: 3,
        ..ToyModelSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let doc = synthetic_qa(1, 5000, 4, &ByteTokenizer)
        .map_err(|e| e.to_string())?
        .remove(0);
    let config = PipelineConfig {
        answer_budget: 16,
        ..PipelineConfig::default()
    };
    let trace = || -> Result<String, String> {
        let out = run(&toy, &doc.document, &doc.question, &config).map_err(|e| e.to_string())?;
        out.trace.to_json().map_err(|e| e.to_string())
    };
    ensure(trace()? == trace()?, || "toy traces differ".into())?;

    let oracle = oracle_for_needle(nih::DEFAULT_NEEDLE).map_err(|e| e.to_string())?;
    let grid = || -> Result<(String, String), String> {
        let g = nih::run_grid(
            &oracle,
            &NeedleSetup::default(),
            &[2_000, 6_000],
            &[0.0, 35.0, 100.0],
            &nih_config(),
            3,
        )
        .map_err(|e| e.to_string())?;
        Ok((nih::grid_to_csv(&g).map_err(|e| e.to_string())?, nih::grid_to_svg(&g)))
    };
    let (csv_a, svg_a) = grid()?;
    let (csv_b, svg_b) = grid()?;
    ensure(csv_a == csv_b, || "grid CSVs differ".into())?;
    ensure(svg_a == svg_b, || "grid SVGs differ".into())?;
    Ok(format!(
        "trace, grid CSV ({} bytes) and SVG ({} bytes) byte-identical",
        csv_a.len(),
        svg_a.len()
    ))
}

fn cache_mode_comparison() -> Outcome {
    let toy = ToyProvider::new(ToyModelSpec::default()).map_err(|e| e.to_string())?;
    let samples = synthetic_qa(20, 3000, 21, &ByteTokenizer).map_err(|e| e.to_string())?;
    let report = cache_mode_ablation(&toy, &samples, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    ensure(report.modes.len() == 2, || "both modes must run".into())?;
    let line = report
        .modes
        .iter()
        .map(|m| format!("{} recall {:.2} (errors {})", m.cache_mode, m.recall, m.errors))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(report.modes.iter().all(|m| m.errors == 0), || {
        format!("runs failed: {line}")
    })?;
    Ok(format!("20 docs: {line} [reported, not asserted]"))
}

fn check(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  {name}: {why}");
            false
        }
    }
}

fn main() {
    let mut results = vec![
        check(
            "phrase features and token scores match nested-loop oracle",
            phrase_and_token_oracle,
        ),
        check(
            "attention rows stochastic, causal zeros exact, head sums equal H",
            attention_invariants,
        ),
        check(
            "top-k equals full-sort oracle with earlier-position ties",
            top_k_selection,
        ),
    ];

    let grid = nih_grid();
    results.push(check("planted-oracle needle grid recalls every cell", || {
        let (g, elapsed) = grid.as_ref().map_err(Clone::clone)?;
        planted_nih(g, *elapsed)
    }));
    results.push(check(
        "per-pass window bounded, passes = chunks + 1, fed ratio falls with length",
        || {
            let (g, _) = grid.as_ref().map_err(Clone::clone)?;
            bounded_window(g)
        },
    ));

    results.push(check(
        "no-loss fallback reproduces full-document generation",
        no_loss_fallback,
    ));
    results.push(check(
        "layer sweep argmax follows the planted peak",
        sweep_recovers_peak,
    ));
    results.push(check(
        "identical seeds give byte-identical traces, grids, SVGs",
        determinism,
    ));
    results.push(check(
        "token-id vs kv-state cache comparison completes",
        cache_mode_comparison,
    ));

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} criteria, {failed} failed", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
