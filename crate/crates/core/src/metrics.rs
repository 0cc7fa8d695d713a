//! Retrieval metrics (Recall@K, Median Rank) and corpus language statistics.
//!
//! Ranking uses optimistic tie handling: an item's rank is one plus the
//! number of gallery items scoring strictly higher. Ties are measure-zero
//! with real encoders; the rule is documented so reported numbers are
//! comparable.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("query {query} has no ground-truth entry in the gallery")]
    MissingGroundTruth { query: usize },
    #[error("query {query} lists gallery index {index}, gallery size is {gallery}")]
    GroundTruthOutOfRange { query: usize, index: usize, gallery: usize },
    #[error("ragged score matrix: row {row} has {len} entries, expected {expected}")]
    RaggedMatrix { row: usize, len: usize, expected: usize },
}

/// Query-by-gallery similarity scores with per-query correct gallery
/// indices. Multiple positives per query are supported (every caption of a
/// video counts as its own query, all pointing at the same gallery item —
/// and vice versa).
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Vec<Vec<f64>>,
    pub ground_truth: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn new(scores: Vec<Vec<f64>>, ground_truth: Vec<Vec<usize>>) -> Result<Self, MetricsError> {
        let gallery = scores.first().map_or(0, |r| r.len());
        for (row, r) in scores.iter().enumerate() {
            if r.len() != gallery {
                return Err(MetricsError::RaggedMatrix { row, len: r.len(), expected: gallery });
            }
        }
        for (query, correct) in ground_truth.iter().enumerate() {
            if correct.is_empty() {
                return Err(MetricsError::MissingGroundTruth { query });
            }
            for &index in correct {
                if index >= gallery {
                    return Err(MetricsError::GroundTruthOutOfRange { query, index, gallery });
                }
            }
        }
        Ok(SimilarityMatrix { scores, ground_truth })
    }

    pub fn queries(&self) -> usize {
        self.scores.len()
    }

    /// Rank of the best-ranked correct item for one query (1-based).
    fn best_rank(&self, query: usize) -> usize {
        let row = &self.scores[query];
        self.ground_truth[query]
            .iter()
            .map(|&j| 1 + row.iter().filter(|&&s| s > row[j]).count())
            .min()
            .expect("validated non-empty ground truth")
    }

    fn best_ranks(&self) -> Vec<usize> {
        (0..self.queries()).map(|q| self.best_rank(q)).collect()
    }
}

/// Percentage of queries whose best correct item ranks within the top `k`.
pub fn recall_at_k(matrix: &SimilarityMatrix, k: usize) -> f64 {
    if matrix.queries() == 0 {
        return 0.0;
    }
    let hits = matrix.best_ranks().iter().filter(|&&r| r <= k).count();
    100.0 * hits as f64 / matrix.queries() as f64
}

/// Median over queries of the best correct rank; an even query count yields
/// the mean of the two middle ranks (half-integer medians are possible).
pub fn median_rank(matrix: &SimilarityMatrix) -> f64 {
    let mut ranks = matrix.best_ranks();
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.sort_unstable();
    let n = ranks.len();
    if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    }
}

/// Metrics report in the table layout used for retrieval results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "MR")]
    pub mr: f64,
}

pub fn metrics_report(matrix: &SimilarityMatrix) -> MetricsReport {
    MetricsReport {
        r1: recall_at_k(matrix, 1),
        r5: recall_at_k(matrix, 5),
        r10: recall_at_k(matrix, 10),
        mr: median_rank(matrix),
    }
}

/// Pooled unique-to-total n-gram ratio over a tokenized corpus, as a
/// percentage. `None` when no caption is long enough to contribute an
/// n-gram.
pub fn ngram_diversity(corpus: &[Vec<String>], n: usize) -> Option<f64> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut total = 0u64;
    let mut unique: HashSet<&[String]> = HashSet::new();
    for tokens in corpus {
        if tokens.len() < n {
            continue;
        }
        for gram in tokens.windows(n) {
            total += 1;
            unique.insert(gram);
        }
    }
    (total > 0).then(|| 100.0 * unique.len() as f64 / total as f64)
}

/// Percentage of verb occurrences falling outside the five most frequent
/// lemmas. Frequency ties are broken lexicographically. `None` when the
/// corpus has no verbs at all.
pub fn diverse_verb_percentage(verb_lemmas: &[Vec<String>]) -> Option<f64> {
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for lemmas in verb_lemmas {
        for lemma in lemmas {
            *freq.entry(lemma).or_default() += 1;
        }
    }
    let total: u64 = freq.values().sum();
    if total == 0 {
        return None;
    }
    let mut by_count: Vec<(&str, u64)> = freq.into_iter().collect();
    // BTreeMap iteration is lexicographic, so a stable sort by descending
    // count leaves ties in lexicographic order.
    by_count.sort_by(|a, b| b.1.cmp(&a.1));
    let top5: HashSet<&str> = by_count.iter().take(5).map(|(l, _)| *l).collect();
    let diverse: u64 =
        by_count.iter().filter(|(l, _)| !top5.contains(l)).map(|(_, c)| c).sum();
    Some(100.0 * diverse as f64 / total as f64)
}

/// Per-caption and per-video word-count statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Histogram of caption lengths; index = word count.
    pub histogram: Vec<u64>,
    pub words_per_video_mean: f64,
    /// Total words per video, keyed by video id.
    pub per_video_totals: BTreeMap<String, u64>,
}

/// One tokenized caption attributed to its video.
#[derive(Debug, Clone)]
pub struct CaptionDoc {
    pub video_id: String,
    pub tokens: Vec<String>,
}

impl CaptionDoc {
    /// Whitespace tokenization, lowercased.
    pub fn from_text(video_id: impl Into<String>, text: &str) -> Self {
        CaptionDoc {
            video_id: video_id.into(),
            tokens: text.split_whitespace().map(|t| t.to_lowercase()).collect(),
        }
    }
}

/// Word-count statistics over a corpus; `None` for an empty corpus.
pub fn caption_length_stats(corpus: &[CaptionDoc]) -> Option<LengthStats> {
    if corpus.is_empty() {
        return None;
    }
    let lengths: Vec<u64> = corpus.iter().map(|c| c.tokens.len() as u64).collect();
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<u64>() as f64 / n;
    let variance = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    let max_len = *lengths.iter().max().unwrap() as usize;
    let mut histogram = vec![0u64; max_len + 1];
    for &l in &lengths {
        histogram[l as usize] += 1;
    }
    let mut per_video_totals: BTreeMap<String, u64> = BTreeMap::new();
    for c in corpus {
        *per_video_totals.entry(c.video_id.clone()).or_default() += c.tokens.len() as u64;
    }
    let words_per_video_mean =
        per_video_totals.values().sum::<u64>() as f64 / per_video_totals.len() as f64;
    Some(LengthStats { mean, std: variance.sqrt(), histogram, words_per_video_mean, per_video_totals })
}

/// Aggregate language statistics for a caption corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub caption_count: u64,
    pub video_count: u64,
    pub vocab_size: u64,
    pub words_per_caption_mean: f64,
    pub words_per_caption_std: f64,
    pub words_per_video_mean: f64,
    /// `[1-gram, 2-gram, 3-gram]` unique-to-total percentages.
    pub ngram_diversity: [Option<f64>; 3],
    /// Same ratios over verb lemma sequences, when lemmas are supplied.
    pub verb_ngram_diversity: [Option<f64>; 3],
    pub diverse_verb_percent: Option<f64>,
}

/// Compute every corpus statistic in one pass over the tokenized captions.
///
/// `verb_lemmas`, when present, must be parallel to `corpus` (one lemma list
/// per caption) — normally produced by an external POS tagger and loaded
/// from an annotation file.
pub fn corpus_stats(corpus: &[CaptionDoc], verb_lemmas: Option<&[Vec<String>]>) -> CorpusStats {
    let token_lists: Vec<Vec<String>> = corpus.iter().map(|c| c.tokens.clone()).collect();
    let vocab: HashSet<&String> = token_lists.iter().flatten().collect();
    let lens = caption_length_stats(corpus);
    let videos: HashSet<&str> = corpus.iter().map(|c| c.video_id.as_str()).collect();

    let verb_diversity = |n: usize| verb_lemmas.and_then(|v| ngram_diversity(v, n));
    CorpusStats {
        caption_count: corpus.len() as u64,
        video_count: videos.len() as u64,
        vocab_size: vocab.len() as u64,
        words_per_caption_mean: lens.as_ref().map_or(0.0, |l| l.mean),
        words_per_caption_std: lens.as_ref().map_or(0.0, |l| l.std),
        words_per_video_mean: lens.as_ref().map_or(0.0, |l| l.words_per_video_mean),
        ngram_diversity: [
            ngram_diversity(&token_lists, 1),
            ngram_diversity(&token_lists, 2),
            ngram_diversity(&token_lists, 3),
        ],
        verb_ngram_diversity: [verb_diversity(1), verb_diversity(2), verb_diversity(3)],
        diverse_verb_percent: verb_lemmas.and_then(diverse_verb_percentage),
    }
}

/// Verb-annotation record: lemmatized verbs for one caption, produced by an
/// external tagger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbAnnotation {
    pub caption_id: String,
    pub verbs: Vec<String>,
}

/// Crude closed-class verb matcher for tests and smoke runs. Real corpora
/// should use an external POS tagger and the annotation-file path; this
/// list exists so the statistics machinery can be exercised without one.
pub fn fallback_verb_lemmas(caption: &str) -> Vec<String> {
    static FORMS: &[(&str, &str)] = &[
        ("add", "add"), ("adds", "add"), ("added", "add"), ("adding", "add"),
        ("cut", "cut"), ("cuts", "cut"), ("cutting", "cut"),
        ("mix", "mix"), ("mixes", "mix"), ("mixed", "mix"), ("mixing", "mix"),
        ("pour", "pour"), ("pours", "pour"), ("poured", "pour"), ("pouring", "pour"),
        ("place", "place"), ("places", "place"), ("placed", "place"), ("placing", "place"),
        ("show", "show"), ("shows", "show"), ("showed", "show"), ("showing", "show"),
        ("stir", "stir"), ("stirs", "stir"), ("stirred", "stir"), ("stirring", "stir"),
        ("take", "take"), ("takes", "take"), ("took", "take"), ("taking", "take"),
        ("turn", "turn"), ("turns", "turn"), ("turned", "turn"), ("turning", "turn"),
        ("use", "use"), ("uses", "use"), ("used", "use"), ("using", "use"),
    ];
    static LOOKUP: once_cell::sync::Lazy<HashMap<&'static str, &'static str>> =
        once_cell::sync::Lazy::new(|| FORMS.iter().copied().collect());
    caption
        .split_whitespace()
        .filter_map(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            LOOKUP.get(w.as_str()).map(|l| l.to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_matrix(n: usize) -> SimilarityMatrix {
        let scores = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let gt = (0..n).map(|i| vec![i]).collect();
        SimilarityMatrix::new(scores, gt).unwrap()
    }

    #[test]
    fn identity_gives_perfect_recall() {
        let m = identity_matrix(5);
        assert_eq!(recall_at_k(&m, 1), 100.0);
        assert_eq!(median_rank(&m), 1.0);
    }

    #[test]
    fn recall_from_hand_ranked_table() {
        // Correct items at ranks {1, 2, 7} -> R@5 = 2/3.
        let scores = vec![
            vec![0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
            vec![0.5, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1],
            vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3],
        ];
        let gt = vec![vec![0], vec![0], vec![6]];
        let m = SimilarityMatrix::new(scores, gt).unwrap();
        assert_relative_eq!(recall_at_k(&m, 5), 200.0 / 3.0);
        assert_eq!(recall_at_k(&m, 1), 100.0 / 3.0);
    }

    #[test]
    fn all_equal_scores_rank_optimistically() {
        let m = SimilarityMatrix::new(vec![vec![0.5; 4]], vec![vec![2]]).unwrap();
        assert_eq!(recall_at_k(&m, 1), 100.0);
    }

    #[test]
    fn median_of_even_count_is_mean_of_middles() {
        // Ranks {1, 3}.
        let scores = vec![vec![1.0, 0.0, 0.0], vec![0.9, 0.8, 0.7]];
        let gt = vec![vec![0], vec![2]];
        let m = SimilarityMatrix::new(scores, gt).unwrap();
        assert_eq!(median_rank(&m), 2.0);
    }

    #[test]
    fn multi_positive_takes_best_rank() {
        let scores = vec![vec![0.1, 0.9, 0.5]];
        let gt = vec![vec![0, 1]];
        let m = SimilarityMatrix::new(scores, gt).unwrap();
        assert_eq!(recall_at_k(&m, 1), 100.0);
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn ngram_diversity_cases() {
        assert_eq!(ngram_diversity(&[toks("a b c")], 1), Some(100.0));
        assert_relative_eq!(ngram_diversity(&[toks("a a b")], 1).unwrap(), 200.0 / 3.0);
        assert_eq!(ngram_diversity(&[toks("a b")], 3), None);
    }

    #[test]
    fn diverse_verbs_cases() {
        let six: Vec<Vec<String>> = ["f", "a", "b", "c", "d", "e"]
            .iter()
            .map(|v| vec![v.to_string()])
            .collect();
        // Six distinct verbs once each; lexicographic top-5 excludes "f".
        assert_relative_eq!(diverse_verb_percentage(&six).unwrap(), 100.0 / 6.0);
        let one = vec![vec!["stir".to_string()]; 4];
        assert_eq!(diverse_verb_percentage(&one), Some(0.0));
        assert_eq!(diverse_verb_percentage(&[]), None);
        assert_eq!(diverse_verb_percentage(&[vec![]]), None);
    }

    #[test]
    fn length_stats_hand_computed() {
        let corpus = vec![
            CaptionDoc::from_text("v1", "a b"),
            CaptionDoc::from_text("v1", "a b c d"),
        ];
        let s = caption_length_stats(&corpus).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.per_video_totals["v1"], 6);
        assert_eq!(caption_length_stats(&[]), None);
    }

    #[test]
    fn single_caption_std_is_zero() {
        let corpus = vec![CaptionDoc::from_text("v", "one two three")];
        assert_eq!(caption_length_stats(&corpus).unwrap().std, 0.0);
    }

    #[test]
    fn stats_are_order_invariant() {
        let mut corpus = vec![
            CaptionDoc::from_text("v1", "pour the batter"),
            CaptionDoc::from_text("v2", "stir the pot slowly"),
            CaptionDoc::from_text("v1", "the pot boils"),
        ];
        let a = corpus_stats(&corpus, None);
        corpus.reverse();
        let b = corpus_stats(&corpus, None);
        assert_eq!(a, b);
    }

    #[test]
    fn fallback_matcher_finds_known_forms() {
        assert_eq!(fallback_verb_lemmas("She stirs the pot, then adds salt."), vec!["stir", "add"]);
        assert!(fallback_verb_lemmas("nothing verbal here").is_empty());
    }
}
