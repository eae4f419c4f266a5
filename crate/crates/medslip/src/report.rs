//! Report-to-triplet pipeline: constrained-grammar extraction, query text
//! construction, frequency-ranked query sets, and existence labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomy assigned to clauses that carry no location.
pub const UNSPECIFIED_ANATOMY: &str = "unspecified";

/// One extracted finding: a pathology, where it sits, and whether it exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub study_id: String,
    pub anatomy: String,
    pub pathology: String,
    pub existence: bool,
}

impl TripletRecord {
    pub fn new(study_id: &str, anatomy: &str, pathology: &str, existence: bool) -> Result<Self> {
        let rec = TripletRecord {
            study_id: study_id.to_string(),
            anatomy: anatomy.to_string(),
            pathology: pathology.to_string(),
            existence,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("study_id", &self.study_id), ("anatomy", &self.anatomy), ("pathology", &self.pathology)] {
            if v.is_empty() {
                return Err(Error::Input(format!("triplet {name} is empty")));
            }
            if v.trim() != v {
                return Err(Error::Input(format!("triplet {name} {v:?} has surrounding whitespace")));
            }
        }
        for (name, v) in [("anatomy", &self.anatomy), ("pathology", &self.pathology)] {
            if v.chars().any(|c| c.is_uppercase()) {
                return Err(Error::Input(format!("triplet {name} {v:?} is not lowercase")));
            }
        }
        Ok(())
    }
}

/// Pathology term to plain-language enhancement sentence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KnowledgeTable {
    pub entries: BTreeMap<String, String>,
}

impl KnowledgeTable {
    pub fn new(entries: BTreeMap<String, String>) -> Result<Self> {
        for (k, v) in &entries {
            if k.chars().any(|c| c.is_uppercase()) {
                return Err(Error::Config(format!("knowledge key {k:?} is not lowercase")));
            }
            if v.is_empty() {
                return Err(Error::Config(format!("knowledge entry for {k:?} is empty")));
            }
        }
        Ok(KnowledgeTable { entries })
    }

    /// Built-in table with the canonical collapse entry.
    pub fn default_table() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(
            "collapse".to_string(),
            "collapse lung refers to pneumothorax or atelectasis.".to_string(),
        );
        KnowledgeTable { entries }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let entries: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("knowledge table {}: {e}", path.display())))?;
        Self::new(entries)
    }
}

/// Vocabularies the clause extractor recognizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportGrammar {
    pub anatomy_vocab: BTreeSet<String>,
    pub pathology_vocab: BTreeSet<String>,
}

impl ReportGrammar {
    pub fn new<A, P>(anatomy: A, pathology: P) -> Self
    where
        A: IntoIterator,
        A::Item: Into<String>,
        P: IntoIterator,
        P::Item: Into<String>,
    {
        ReportGrammar {
            anatomy_vocab: anatomy.into_iter().map(|s| s.into().to_lowercase()).collect(),
            pathology_vocab: pathology.into_iter().map(|s| s.into().to_lowercase()).collect(),
        }
    }
}

/// Extraction result: matched triplets plus the count of skipped sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReport {
    pub triplets: Vec<TripletRecord>,
    pub skipped_sentences: usize,
}

/// Ranked query terms with their encoder-ready texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub anatomy_terms: Vec<String>,
    pub pathology_terms: Vec<String>,
    pub prompted_anatomy_texts: Vec<String>,
    pub enhanced_pathology_texts: Vec<String>,
}

impl QuerySet {
    /// Anatomy query count.
    pub fn n(&self) -> usize {
        self.anatomy_terms.len()
    }

    /// Pathology query count.
    pub fn m(&self) -> usize {
        self.pathology_terms.len()
    }

    pub fn anatomy_index(&self, term: &str) -> Option<usize> {
        self.anatomy_terms.iter().position(|t| t == term)
    }

    pub fn pathology_index(&self, term: &str) -> Option<usize> {
        self.pathology_terms.iter().position(|t| t == term)
    }
}

/// Per-study binary labels: `l[(i, j)] = 1` iff pathology `i` is present at
/// anatomy `j`; the y vectors extend presence to findings whose other half
/// falls outside the query set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExistenceMatrix {
    pub study_id: String,
    pub l: Array2<f64>,
    pub y_pathology: Array1<f64>,
    pub y_anatomy: Array1<f64>,
}

/// Extract triplets from a constrained-grammar report.
///
/// Recognized sentence forms, case-insensitive, period-terminated:
/// `<pathology> at <anatomy>.`, `no <pathology>.`, `no <pathology> at
/// <anatomy>.`. A clause without a location gets [`UNSPECIFIED_ANATOMY`].
/// Sentences that do not match are skipped and counted.
pub fn parse_report(study_id: &str, text: &str, grammar: &ReportGrammar) -> Result<ParsedReport> {
    if study_id.is_empty() {
        return Err(Error::Input("parse_report: empty study_id".into()));
    }
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for raw in text.split('.') {
        let sentence = raw.trim().to_lowercase();
        if sentence.is_empty() {
            continue;
        }
        match parse_sentence(&sentence, grammar) {
            Some((anatomy, pathology, existence)) => {
                triplets.push(TripletRecord::new(study_id, &anatomy, &pathology, existence)?);
            }
            None => skipped += 1,
        }
    }
    Ok(ParsedReport { triplets, skipped_sentences: skipped })
}

fn parse_sentence(sentence: &str, grammar: &ReportGrammar) -> Option<(String, String, bool)> {
    let (body, existence) = match sentence.strip_prefix("no ") {
        Some(rest) => (rest, false),
        None => (sentence, true),
    };
    // Try every " at " split point; accept the first where both halves are
    // in vocabulary.
    let mut from = 0;
    while let Some(pos) = body[from..].find(" at ") {
        let at = from + pos;
        let pathology = &body[..at];
        let anatomy = &body[at + 4..];
        if grammar.pathology_vocab.contains(pathology) && grammar.anatomy_vocab.contains(anatomy) {
            return Some((anatomy.to_string(), pathology.to_string(), existence));
        }
        from = at + 4;
    }
    if grammar.pathology_vocab.contains(body) {
        return Some((UNSPECIFIED_ANATOMY.to_string(), body.to_string(), existence));
    }
    None
}

/// Load line-delimited JSON triplets, validating every record.
pub fn ingest_triplets(path: &Path) -> Result<Vec<TripletRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord = serde_json::from_str(line).map_err(|e| {
            Error::Input(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        rec.validate()
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Write triplets as line-delimited JSON.
pub fn write_triplets(path: &Path, records: &[TripletRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Input(format!("serialize triplet: {e}")))?;
        let _ = writeln!(out, "{line}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Build the location prompt for an anatomy term.
pub fn prompt_anatomy(term: &str) -> Result<String> {
    if term.is_empty() {
        return Err(Error::Input("prompt_anatomy: empty term".into()));
    }
    Ok(format!("it is located at {term}"))
}

/// Append the term's knowledge sentence when the table has one.
pub fn enhance_pathology(term: &str, table: &KnowledgeTable) -> String {
    match table.entries.get(term) {
        Some(sentence) => format!("{term} {sentence}"),
        None => {
            log::debug!("pathology {term:?} has no knowledge entry, left unenhanced");
            term.to_string()
        }
    }
}

/// Pick the `n` most frequent anatomy and `m` most frequent pathology terms.
///
/// Every triplet occurrence counts, positives and negatives alike; ties
/// break lexicographically ascending.
pub fn select_queries(
    corpus: &[TripletRecord],
    n: usize,
    m: usize,
    table: &KnowledgeTable,
) -> Result<QuerySet> {
    if corpus.is_empty() {
        return Err(Error::Config("select_queries: empty corpus".into()));
    }
    let anatomy_terms = ranked_terms(corpus.iter().map(|t| t.anatomy.as_str()), n, "anatomy")?;
    let pathology_terms = ranked_terms(corpus.iter().map(|t| t.pathology.as_str()), m, "pathology")?;
    let prompted_anatomy_texts = anatomy_terms
        .iter()
        .map(|t| prompt_anatomy(t))
        .collect::<Result<Vec<_>>>()?;
    let enhanced_pathology_texts = pathology_terms
        .iter()
        .map(|t| enhance_pathology(t, table))
        .collect();
    Ok(QuerySet { anatomy_terms, pathology_terms, prompted_anatomy_texts, enhanced_pathology_texts })
}

fn ranked_terms<'a>(
    terms: impl Iterator<Item = &'a str>,
    take: usize,
    kind: &str,
) -> Result<Vec<String>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in terms {
        *counts.entry(t).or_insert(0) += 1;
    }
    if take > counts.len() {
        return Err(Error::Config(format!(
            "requested {take} {kind} queries but corpus has only {} distinct terms",
            counts.len()
        )));
    }
    // BTreeMap iteration is lexicographic, so a stable sort by descending
    // count leaves ties in ascending term order.
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    Ok(ranked.into_iter().take(take).map(|(t, _)| t.to_string()).collect())
}

/// Binary existence labels for one study against a query set.
///
/// Positive triplets with both halves in the set light `l`; a positive whose
/// other half is out of set still lights the in-set half's y entry. Negative
/// triplets contribute nothing.
pub fn build_existence_matrix(
    study_id: &str,
    study_triplets: &[TripletRecord],
    qs: &QuerySet,
) -> Result<ExistenceMatrix> {
    if study_id.is_empty() {
        return Err(Error::Input("build_existence_matrix: empty study_id".into()));
    }
    for t in study_triplets {
        if t.study_id != study_id {
            return Err(Error::Input(format!(
                "mixed study ids: expected {study_id:?}, found {:?}",
                t.study_id
            )));
        }
    }
    let (m, n) = (qs.m(), qs.n());
    let mut l = Array2::zeros((m, n));
    let mut y_pathology = Array1::zeros(m);
    let mut y_anatomy = Array1::zeros(n);
    for t in study_triplets.iter().filter(|t| t.existence) {
        let pi = qs.pathology_index(&t.pathology);
        let aj = qs.anatomy_index(&t.anatomy);
        if let (Some(i), Some(j)) = (pi, aj) {
            l[[i, j]] = 1.0;
        }
        if let Some(i) = pi {
            y_pathology[i] = 1.0;
        }
        if let Some(j) = aj {
            y_anatomy[j] = 1.0;
        }
    }
    Ok(ExistenceMatrix { study_id: study_id.to_string(), l, y_pathology, y_anatomy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grammar() -> ReportGrammar {
        ReportGrammar::new(
            ["left lung", "right lung", "nipples", "ribs", UNSPECIFIED_ANATOMY],
            ["opacity", "effusion", "deformity", "collapse"],
        )
    }

    fn rec(study: &str, a: &str, p: &str, e: bool) -> TripletRecord {
        TripletRecord::new(study, a, p, e).unwrap()
    }

    #[test]
    fn positive_clause_with_location() {
        let got = parse_report("s1", "Opacity at left lung.", &grammar()).unwrap();
        assert_eq!(got.triplets, vec![rec("s1", "left lung", "opacity", true)]);
        assert_eq!(got.skipped_sentences, 0);
    }

    #[test]
    fn negation_without_location_uses_unspecified() {
        let got = parse_report("s1", "No effusion.", &grammar()).unwrap();
        assert_eq!(got.triplets, vec![rec("s1", UNSPECIFIED_ANATOMY, "effusion", false)]);
    }

    #[test]
    fn negation_with_location_keeps_anatomy() {
        let got = parse_report("s1", "No collapse at right lung.", &grammar()).unwrap();
        assert_eq!(got.triplets, vec![rec("s1", "right lung", "collapse", false)]);
    }

    #[test]
    fn two_sentence_report_yields_two_triplets() {
        let got = parse_report("s1", "Opacity at nipples. Deformity at ribs.", &grammar()).unwrap();
        assert_eq!(
            got.triplets,
            vec![rec("s1", "nipples", "opacity", true), rec("s1", "ribs", "deformity", true)]
        );
    }

    #[test]
    fn unknown_sentences_are_counted_not_fatal() {
        let got = parse_report("s1", "Heart size is normal. Opacity at ribs.", &grammar()).unwrap();
        assert_eq!(got.triplets.len(), 1);
        assert_eq!(got.skipped_sentences, 1);
    }

    #[test]
    fn empty_text_is_empty_not_error() {
        let got = parse_report("s1", "", &grammar()).unwrap();
        assert!(got.triplets.is_empty());
        assert_eq!(got.skipped_sentences, 0);
    }

    #[test]
    fn off_vocabulary_terms_are_skipped() {
        let got = parse_report("s1", "Opacity at spleen. Fracture at ribs.", &grammar()).unwrap();
        assert!(got.triplets.is_empty());
        assert_eq!(got.skipped_sentences, 2);
    }

    #[test]
    fn prompt_uses_fixed_template() {
        assert_eq!(prompt_anatomy("left lung").unwrap(), "it is located at left lung");
        assert_eq!(prompt_anatomy("ribs").unwrap(), "it is located at ribs");
        assert!(prompt_anatomy("").is_err());
    }

    #[test]
    fn prompt_prefix_is_seventeen_chars() {
        let out = prompt_anatomy("x").unwrap();
        assert_eq!(&out[..17], "it is located at ");
    }

    #[test]
    fn enhancement_appends_known_sentence() {
        let table = KnowledgeTable::default_table();
        assert_eq!(
            enhance_pathology("collapse", &table),
            "collapse collapse lung refers to pneumothorax or atelectasis."
        );
        assert_eq!(enhance_pathology("opacity", &table), "opacity");
        assert_eq!(enhance_pathology("opacity", &KnowledgeTable::default()), "opacity");
    }

    #[test]
    fn queries_rank_by_frequency_then_lexicographic() {
        let mut corpus = Vec::new();
        for _ in 0..5 {
            corpus.push(rec("s", "a1", "p1", true));
        }
        for _ in 0..3 {
            corpus.push(rec("s", "a2", "p2", false));
        }
        corpus.push(rec("s", "a3", "p1", true));
        let qs = select_queries(&corpus, 2, 2, &KnowledgeTable::default()).unwrap();
        assert_eq!(qs.anatomy_terms, vec!["a1", "a2"]);
        // p1 appears 6 times, p2 three times
        assert_eq!(qs.pathology_terms, vec!["p1", "p2"]);
        assert_eq!(qs.prompted_anatomy_texts[0], "it is located at a1");
    }

    #[test]
    fn tie_breaks_ascend_lexicographically() {
        let corpus = vec![
            rec("s", "b", "q", true),
            rec("s", "b", "p", true),
            rec("s", "a", "q", true),
            rec("s", "a", "p", true),
        ];
        let qs = select_queries(&corpus, 2, 2, &KnowledgeTable::default()).unwrap();
        assert_eq!(qs.anatomy_terms, vec!["a", "b"]);
        assert_eq!(qs.pathology_terms, vec!["p", "q"]);
    }

    #[test]
    fn oversized_query_request_is_config_error() {
        let corpus = vec![rec("s", "a", "p", true)];
        assert!(matches!(
            select_queries(&corpus, 1, 2, &KnowledgeTable::default()),
            Err(Error::Config(_))
        ));
    }

    fn small_qs() -> QuerySet {
        QuerySet {
            anatomy_terms: vec!["left lung".into(), "ribs".into()],
            pathology_terms: vec!["opacity".into(), "effusion".into(), "collapse".into()],
            prompted_anatomy_texts: vec![String::new(); 2],
            enhanced_pathology_texts: vec![String::new(); 3],
        }
    }

    #[test]
    fn in_set_positive_lights_matrix_and_vectors() {
        let qs = small_qs();
        let em =
            build_existence_matrix("s", &[rec("s", "left lung", "opacity", true)], &qs).unwrap();
        assert_eq!(em.l[[0, 0]], 1.0);
        assert_eq!(em.l.sum(), 1.0);
        assert_eq!(em.y_pathology.to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(em.y_anatomy.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn negative_triplet_contributes_nothing() {
        let qs = small_qs();
        let em =
            build_existence_matrix("s", &[rec("s", "left lung", "opacity", false)], &qs).unwrap();
        assert_eq!(em.l.sum(), 0.0);
        assert_eq!(em.y_pathology.sum(), 0.0);
        assert_eq!(em.y_anatomy.sum(), 0.0);
    }

    #[test]
    fn out_of_set_anatomy_still_sets_pathology_vector() {
        let qs = small_qs();
        let em = build_existence_matrix("s", &[rec("s", "nipples", "opacity", true)], &qs).unwrap();
        assert_eq!(em.l.sum(), 0.0);
        assert_eq!(em.y_pathology.to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(em.y_anatomy.sum(), 0.0);
    }

    #[test]
    fn mixed_study_ids_error() {
        let qs = small_qs();
        let got = build_existence_matrix(
            "s",
            &[rec("s", "ribs", "opacity", true), rec("t", "ribs", "opacity", true)],
            &qs,
        );
        assert!(matches!(got, Err(Error::Input(_))));
    }

    #[test]
    fn empty_study_gets_zero_labels() {
        let qs = small_qs();
        let em = build_existence_matrix("s", &[], &qs).unwrap();
        assert_eq!(em.l.sum(), 0.0);
        assert_eq!(em.l.dim(), (3, 2));
    }

    #[test]
    fn duplicate_positives_stay_binary() {
        let qs = small_qs();
        let t = rec("s", "ribs", "effusion", true);
        let em = build_existence_matrix("s", &[t.clone(), t], &qs).unwrap();
        assert_eq!(em.l[[1, 1]], 1.0);
        assert_eq!(em.l.sum(), 1.0);
    }

    #[test]
    fn ingest_round_trips_and_counts_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets.jsonl");
        let recs = vec![rec("s1", "ribs", "opacity", true), rec("s2", "left lung", "effusion", false)];
        write_triplets(&path, &recs).unwrap();
        assert_eq!(ingest_triplets(&path).unwrap(), recs);
    }

    #[test]
    fn ingest_error_names_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"study_id\":\"s\",\"anatomy\":\"a\",\"pathology\":\"p\",\"existence\":true}\n{\"study_id\":\"s\",\"anatomy\":\"a\"}\n",
        )
        .unwrap();
        let err = ingest_triplets(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn ingest_preserves_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let t = rec("s", "ribs", "opacity", true);
        write_triplets(&path, &[t.clone(), t]).unwrap();
        assert_eq!(ingest_triplets(&path).unwrap().len(), 2);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_corpus() -> impl Strategy<Value = Vec<TripletRecord>> {
            let term = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
            let path = prop::sample::select(vec!["p", "q", "r"]);
            prop::collection::vec((term, path, any::<bool>()), 1..40).prop_map(|v| {
                v.into_iter()
                    .map(|(a, p, e)| TripletRecord::new("s", a, p, e).unwrap())
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn query_selection_ignores_corpus_order(corpus in arb_corpus(), seed in any::<u64>()) {
                let n = 2.min(distinct(&corpus, |t| &t.anatomy));
                let m = 2.min(distinct(&corpus, |t| &t.pathology));
                let table = KnowledgeTable::default();
                let qs = select_queries(&corpus, n, m, &table).unwrap();
                let mut shuffled = corpus.clone();
                shuffle(&mut shuffled, seed);
                let qs2 = select_queries(&shuffled, n, m, &table).unwrap();
                prop_assert_eq!(qs, qs2);
            }

            #[test]
            fn matrix_round_trips_from_triplets(corpus in arb_corpus()) {
                let table = KnowledgeTable::default();
                let n = distinct(&corpus, |t| &t.anatomy);
                let m = distinct(&corpus, |t| &t.pathology);
                let qs = select_queries(&corpus, n, m, &table).unwrap();
                let em = build_existence_matrix("s", &corpus, &qs).unwrap();
                let positives: std::collections::BTreeSet<(usize, usize)> = corpus
                    .iter()
                    .filter(|t| t.existence)
                    .filter_map(|t| {
                        Some((qs.pathology_index(&t.pathology)?, qs.anatomy_index(&t.anatomy)?))
                    })
                    .collect();
                // every positive in-set pair is lit, nothing else is
                let mut total = 0.0;
                for i in 0..qs.m() {
                    for j in 0..qs.n() {
                        let expect = positives.contains(&(i, j));
                        prop_assert_eq!(em.l[[i, j]] == 1.0, expect);
                        total += em.l[[i, j]];
                    }
                }
                let positive_count = corpus.iter().filter(|t| t.existence).count() as f64;
                prop_assert!(total <= positive_count);
            }
        }

        fn distinct<F: Fn(&TripletRecord) -> &String>(c: &[TripletRecord], f: F) -> usize {
            c.iter().map(|t| f(t).clone()).collect::<std::collections::BTreeSet<_>>().len()
        }

        fn shuffle(v: &mut [TripletRecord], seed: u64) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            v.shuffle(&mut rng);
        }
    }
}
