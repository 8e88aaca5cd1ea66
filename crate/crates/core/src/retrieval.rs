//! Ranking context tokens by the attention the question pays them.
//!
//! Head-summed attention is smoothed along the key axis with a ones kernel of
//! width `k` (phrase-level features), summed over query rows into one score per
//! context token, and the top-scoring tokens are expanded to their sentences.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::Array2;

use crate::attnkernel::AggregatedAttention;
use crate::cache::SentenceLayout;
use crate::error::{Error, Result};
use crate::textseg::SentenceRecord;

/// `values[i][j] = Σ_{u<k} A[i][j+u]`, zero past the right edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseFeatureMatrix {
    pub values: Array2<f64>,
}

/// One non-negative score per context position.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
}

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Ones-kernel 1D convolution of each row with right-aligned windows.
///
/// Each window is summed left to right, so equal inputs give bit-equal
/// outputs and exact ties survive for [`select_top_k`] to break.
pub fn phrase_importance(attn: &AggregatedAttention, phrase_token_num: usize) -> Result<PhraseFeatureMatrix> {
    if phrase_token_num < 1 {
        return Err(Error::config("phrase_token_num", "must be at least 1"));
    }
    let a = &attn.matrix;
    let m = a.ncols();
    let mut values = Array2::zeros(a.dim());
    for (src, mut dst) in a.rows().into_iter().zip(values.rows_mut()) {
        for j in 0..m {
            let end = (j + phrase_token_num).min(m);
            let mut acc = 0.0;
            for u in j..end {
                acc += src[u];
            }
            dst[j] = acc;
        }
    }
    Ok(PhraseFeatureMatrix { values })
}

/// Column sums: each context token accumulates its feature over all query rows.
pub fn token_importance(features: &PhraseFeatureMatrix) -> Result<ImportanceVector> {
    let t = &features.values;
    if t.nrows() == 0 {
        return Err(Error::Shape("importance needs at least one query row".into()));
    }
    let mut scores = vec![0.0; t.ncols()];
    for row in t.rows() {
        for (s, &v) in scores.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(ImportanceVector { scores })
}

/// Orders by score descending, then position ascending.
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Positions of the `top_k` highest scores, returned in ascending position order.
///
/// Ties go to the earlier position. When `top_k` covers the whole vector every
/// position is returned.
pub fn select_top_k(scores: &ImportanceVector, top_k: usize) -> Vec<usize> {
    let m = scores.len();
    let mut idx: Vec<usize> = (0..m).collect();
    if top_k < m {
        idx.select_nth_unstable_by(top_k, |&a, &b| rank(&scores.scores, a, b));
        idx.truncate(top_k);
    }
    idx.sort_unstable();
    idx
}

/// Distinct sentences covering `positions`, in document order.
///
/// Positions index the context part of a merged input; question positions are
/// rejected.
pub fn expand_to_sentences(positions: &[usize], layout: &SentenceLayout) -> Result<Vec<SentenceRecord>> {
    let mut slots = BTreeSet::new();
    for &pos in positions {
        let slot = layout.slot_of(pos).ok_or_else(|| {
            Error::Logic(format!(
                "position {pos} is outside the context range 0..{}",
                layout.context_len()
            ))
        })?;
        slots.insert(slot);
    }
    let mut out: Vec<SentenceRecord> = slots.into_iter().map(|s| layout.sentence(s).clone()).collect();
    // Layout order is already document order; sort by id so the contract does
    // not depend on how the layout was assembled.
    out.sort_by_key(|s| s.id);
    out.dedup_by_key(|s| s.id);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textseg::Sentence;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn agg(matrix: Array2<f64>) -> AggregatedAttention {
        AggregatedAttention { matrix }
    }

    fn layout_of(lengths: &[usize]) -> SentenceLayout {
        let mut start = 0;
        let sentences: Vec<Sentence> = lengths
            .iter()
            .enumerate()
            .map(|(id, &len)| {
                let s = Sentence {
                    id,
                    text: "y".repeat(len),
                    tokens: vec![1; len],
                    char_start: start,
                    token_start: start,
                };
                start += len;
                s
            })
            .collect();
        SentenceLayout::from_sentences(sentences.iter())
    }

    fn oracle_conv(a: &Array2<f64>, k: usize) -> Array2<f64> {
        let (n, m) = a.dim();
        Array2::from_shape_fn((n, m), |(i, j)| {
            (0..k).filter(|u| j + u < m).map(|u| a[[i, j + u]]).sum()
        })
    }

    #[test]
    fn unit_kernel_is_identity() {
        let a = array![[0.1, 0.2, 0.7], [0.3, 0.3, 0.4]];
        assert_eq!(phrase_importance(&agg(a.clone()), 1).unwrap().values, a);
    }

    #[test]
    fn hand_summed_windows() {
        let out = phrase_importance(&agg(array![[0.2, 0.3, 0.5]]), 2).unwrap();
        let want = [0.5, 0.8, 0.5];
        for (g, w) in out.values.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_kernel_is_a_config_error() {
        let err = phrase_importance(&agg(array![[1.0]]), 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Config {
                field: "phrase_token_num",
                ..
            }
        ));
    }

    #[test]
    fn convolution_matches_nested_loop_with_paper_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_simple_fn((16, 64), || rng.random_range(0.0..1.0));
        let got = phrase_importance(&agg(a.clone()), 15).unwrap().values;
        let want = oracle_conv(&a, 15);
        assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-9));
    }

    #[test]
    fn single_row_importance_is_the_row() {
        let t = PhraseFeatureMatrix {
            values: array![[0.4, 1.5, 0.0]],
        };
        assert_eq!(token_importance(&t).unwrap().scores, vec![0.4, 1.5, 0.0]);
        let z = PhraseFeatureMatrix {
            values: Array2::zeros((3, 4)),
        };
        assert_eq!(token_importance(&z).unwrap().scores, vec![0.0; 4]);
    }

    #[test]
    fn importance_matches_transpose_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Array2::from_shape_simple_fn((8, 32), || rng.random_range(0.0..3.0));
        let got = token_importance(&PhraseFeatureMatrix { values: t.clone() }).unwrap();
        let tt = t.t();
        for (i, col) in tt.rows().into_iter().enumerate() {
            let mut want = 0.0;
            for v in col {
                want += v;
            }
            assert_eq!(got.scores[i], want);
        }
    }

    #[test]
    fn top_k_orders_by_value_then_position() {
        let v = ImportanceVector {
            scores: vec![1.0, 3.0, 2.0],
        };
        assert_eq!(select_top_k(&v, 2), vec![1, 2]);
        let flat = ImportanceVector { scores: vec![5.0; 4] };
        assert_eq!(select_top_k(&flat, 2), vec![0, 1]);
        assert_eq!(select_top_k(&v, 10), vec![0, 1, 2]);
        assert!(select_top_k(&ImportanceVector { scores: vec![] }, 3).is_empty());
    }

    #[test]
    fn top_k_matches_full_sort_with_paper_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut order: Vec<usize> = (0..1000).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut want = order[..300].to_vec();
        want.sort();
        assert_eq!(select_top_k(&ImportanceVector { scores }, 300), want);
    }

    #[test]
    fn expansion_dedups_and_restores_order() {
        let layout = layout_of(&[4, 4, 4, 4, 4, 4]);
        let one = expand_to_sentences(&[8, 9, 11], &layout).unwrap();
        assert_eq!(one.iter().map(|s| s.id).collect::<Vec<_>>(), [2]);
        let two = expand_to_sentences(&[21, 9], &layout).unwrap();
        assert_eq!(two.iter().map(|s| s.id).collect::<Vec<_>>(), [2, 5]);
        assert!(matches!(expand_to_sentences(&[24], &layout), Err(Error::Logic(_))));
    }

    #[test]
    fn expansion_matches_position_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lengths: Vec<usize> = (0..50).map(|_| rng.random_range(1..20)).collect();
        let layout = layout_of(&lengths);
        let total: usize = lengths.iter().sum();
        let mut positions: Vec<usize> = (0..total).collect();
        positions.shuffle(&mut rng);
        positions.truncate(40);

        let mut want = BTreeSet::new();
        for &p in &positions {
            let mut start = 0;
            for (id, &len) in lengths.iter().enumerate() {
                if p >= start && p < start + len {
                    want.insert(id);
                }
                start += len;
            }
        }
        let got: Vec<usize> = expand_to_sentences(&positions, &layout)
            .unwrap()
            .iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(got, want.into_iter().collect::<Vec<_>>());
    }

    fn matrix(n: usize, m: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.0f64..2.0, n * m).prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap())
    }

    proptest! {
        #[test]
        fn convolution_is_linear(
            (a, b) in (1usize..6, 1usize..20).prop_flat_map(|(n, m)| (matrix(n, m), matrix(n, m))),
            k in 1usize..8,
        ) {
            let sum = phrase_importance(&agg(&a + &b), k).unwrap().values;
            let parts = phrase_importance(&agg(a), k).unwrap().values + phrase_importance(&agg(b), k).unwrap().values;
            prop_assert!(sum.iter().zip(&parts).all(|(x, y)| (x - y).abs() < 1e-9));
        }

        #[test]
        fn scaling_keeps_the_selected_set(
            a in (1usize..6, 2usize..40).prop_flat_map(|(n, m)| matrix(n, m)),
            k in 1usize..6,
            top_k in 1usize..10,
            exp in -3i32..4,
        ) {
            let c = 2f64.powi(exp);
            let base = token_importance(&phrase_importance(&agg(a.clone()), k).unwrap()).unwrap();
            let scaled = token_importance(&phrase_importance(&agg(a * c), k).unwrap()).unwrap();
            for (s, b) in scaled.scores.iter().zip(&base.scores) {
                prop_assert!((s - c * b).abs() <= 1e-9 * c.max(1.0) * b.max(1.0));
            }
            prop_assert_eq!(select_top_k(&base, top_k), select_top_k(&scaled, top_k));
        }

        #[test]
        fn unit_kernel_scores_sum_to_total_mass(
            heads in 1usize..5, n in 1usize..6, m in 1usize..30, seed in any::<u64>(),
        ) {
            // rows of a head-summed, row-stochastic matrix add up to H
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = Array2::<f64>::zeros((n, m));
            for _ in 0..heads {
                let mut h = Array2::from_shape_simple_fn((n, m), || rng.random_range(0.0..1.0));
                for mut row in h.rows_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                total = total + h;
            }
            let s = token_importance(&phrase_importance(&agg(total), 1).unwrap()).unwrap();
            let sum: f64 = s.scores.iter().sum();
            prop_assert!((sum - (n * heads) as f64).abs() < 1e-4);
        }
    }
}
