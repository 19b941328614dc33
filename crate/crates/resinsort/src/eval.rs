//! Accuracy protocols: N-shot K-way episodes and KNN over embeddings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::nets::sigmoid;
use crate::tensor::{euclidean_distance, fc_forward, l1_distance, Tensor};
use crate::trainer::{ImageStore, Model};

/// How the Siamese head output is read during episodes. The loss convention
/// (target 1 - y) trains the head so a high output means "same class", so
/// `GreatestIsSame` is the default; `LeastIsSame` keeps the literal
/// least-output rule for heads trained with the opposite target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    GreatestIsSame,
    LeastIsSame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Number of candidate classes per episode.
    pub n_way: usize,
    /// Support images per class.
    pub k_shot: usize,
    /// Cap on the number of test images evaluated (all of them when absent).
    pub episodes: Option<usize>,
    /// Neighbor counts for the KNN report.
    pub knn_k: Vec<usize>,
    pub seed: u64,
    pub polarity: Polarity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 1,
            episodes: None,
            knn_k: vec![3, 5, 7],
            seed: 0,
            polarity: Polarity::GreatestIsSame,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.n_way == 0 || self.n_way > num_classes {
            return Err(Error::Data(format!(
                "n_way {} must lie in 1..={num_classes}",
                self.n_way
            )));
        }
        if self.k_shot == 0 {
            return Err(Error::Data("k_shot must be positive".into()));
        }
        for &k in &self.knn_k {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Data(format!(
                    "knn k values must be odd and >= 1, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// One embedding row per image, with aligned labels and ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Predicts the support class with the smallest Euclidean distance to the
/// query embedding (the triplet-network episode rule).
pub fn predict_by_distance(query: &[f64], support: &[(usize, Vec<f64>)]) -> Result<usize> {
    if support.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (class, emb) in support {
        let d = euclidean_distance(query, emb)?;
        if d < best.0 {
            best = (d, *class);
        }
    }
    Ok(best.1)
}

/// Siamese episode rule: score every (query, support) pair through the L1
/// head and pick the winning class under the configured polarity.
fn predict_by_head(
    model: &Model,
    query: &Tensor,
    support: &[(usize, &Tensor)],
    polarity: Polarity,
) -> Result<usize> {
    let siamese = match model {
        Model::Siamese(m) => m,
        Model::Triplet(_) => return Err(Error::Data("head scoring needs a Siamese model".into())),
    };
    if support.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    let eq = siamese.trunk.embed(query)?;
    let mut best: Option<(f64, usize)> = None;
    for (class, img) in support {
        let es = siamese.trunk.embed(img)?;
        let d = Tensor::from_vec(l1_distance(&eq, &es)?);
        let p = sigmoid(fc_forward(&d, &siamese.head)?.values()[0]);
        let better = match (best, polarity) {
            (None, _) => true,
            (Some((b, _)), Polarity::GreatestIsSame) => p > b,
            (Some((b, _)), Polarity::LeastIsSame) => p < b,
        };
        if better {
            best = Some((p, *class));
        }
    }
    Ok(best.expect("support checked non-empty").1)
}

/// One N-way episode with preloaded tensors; support holds `k_shot` images
/// per candidate class.
pub fn one_shot_episode(
    model: &Model,
    query: &Tensor,
    support: &[(usize, &Tensor)],
    polarity: Polarity,
) -> Result<usize> {
    match model {
        Model::Siamese(_) => predict_by_head(model, query, support, polarity),
        Model::Triplet(_) => {
            let q = model.embed(query)?;
            let embedded: Vec<(usize, Vec<f64>)> = support
                .iter()
                .map(|(c, t)| Ok((*c, model.embed(t)?)))
                .collect::<Result<_>>()?;
            predict_by_distance(&q, &embedded)
        }
    }
}

/// Runs one episode per test image with seeded support sampling; support
/// images come from the training split so the query can never support
/// itself. Returns correct / total.
pub fn one_shot_accuracy(
    model: &Model,
    root: &Path,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<f64> {
    cfg.validate(manifest.num_classes())?;
    let by_class = manifest.split_by_class(Split::Train);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Data(format!(
                "class {:?} has no training images for episode support",
                manifest.classes[c]
            )));
        }
    }
    let mut test = manifest.split_records(Split::Test);
    if let Some(cap) = cfg.episodes {
        test.truncate(cap);
    }
    if test.is_empty() {
        return Err(Error::Data("no test images to evaluate".into()));
    }
    let store = ImageStore::preload(
        root,
        manifest,
        model.input_side(),
        &[Split::Train, Split::Test],
    )?;
    let correct: usize = test
        .par_iter()
        .enumerate()
        .map(|(ei, &query_idx)| -> Result<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (ei as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let truth = manifest.records[query_idx].class;
            let classes = episode_classes(manifest.num_classes(), cfg.n_way, truth, &mut rng);
            let mut support: Vec<(usize, &Tensor)> = Vec::new();
            for &class in &classes {
                let picks = by_class[class].choose_multiple(&mut rng, cfg.k_shot);
                for &idx in picks {
                    support.push((class, store.get(idx)));
                }
            }
            let pred = one_shot_episode(model, store.get(query_idx), &support, cfg.polarity)?;
            Ok(usize::from(pred == truth))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / test.len() as f64)
}

/// Candidate classes of one episode: the true class plus n_way - 1 others.
fn episode_classes(
    num_classes: usize,
    n_way: usize,
    truth: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if n_way == num_classes {
        return (0..num_classes).collect();
    }
    let mut others: Vec<usize> = (0..num_classes).filter(|&c| c != truth).collect();
    others.shuffle(rng);
    let mut classes = vec![truth];
    classes.extend(others.into_iter().take(n_way - 1));
    classes.sort_unstable();
    classes
}

/// Embeds every record of the manifest, in record order.
pub fn build_index(
    model: &Model,
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<EmbeddingIndex> {
    let indices: Vec<usize> = (0..manifest.records.len()).collect();
    build_index_subset(model, root, manifest, &indices)
}

/// Embeds the chosen records, preserving the given order.
pub fn build_index_subset(
    model: &Model,
    root: &Path,
    manifest: &DatasetManifest,
    records: &[usize],
) -> Result<EmbeddingIndex> {
    let target = model.input_side();
    let embeddings: Vec<Vec<f64>> = records
        .par_iter()
        .map(|&i| {
            let img = crate::data::load_image(root, &manifest.records[i], target, &manifest.stats)?;
            model.embed(&img)
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingIndex {
        embeddings,
        labels: records.iter().map(|&i| manifest.records[i].class).collect(),
        ids: records
            .iter()
            .map(|&i| manifest.records[i].id.clone())
            .collect(),
    })
}

/// Majority vote over the K nearest rows (excluding the query's own row).
/// Vote ties go to the class of the nearest neighbor among the tied classes.
pub fn knn_classify(index: &EmbeddingIndex, query_row: usize, k: usize) -> Result<usize> {
    if query_row >= index.len() {
        return Err(Error::Data(format!(
            "query row {query_row} outside index of {} rows",
            index.len()
        )));
    }
    if k >= index.len() {
        return Err(Error::Data(format!(
            "k = {k} must be smaller than the index size {}",
            index.len()
        )));
    }
    knn_vote(
        index,
        &index.embeddings[query_row].clone(),
        Some(query_row),
        k,
    )
}

/// Classifies an embedding that is not itself a row of the index.
pub fn knn_classify_embedding(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<usize> {
    if k == 0 || k > index.len() {
        return Err(Error::Data(format!(
            "k = {k} must lie in 1..={} (index size)",
            index.len()
        )));
    }
    knn_vote(index, query, None, k)
}

fn knn_vote(
    index: &EmbeddingIndex,
    query: &[f64],
    exclude: Option<usize>,
    k: usize,
) -> Result<usize> {
    let mut neighbors: Vec<(f64, usize)> = index
        .embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, e)| Ok((euclidean_distance(query, e)?, i)))
        .collect::<Result<_>>()?;
    neighbors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let top = &neighbors[..k];
    let mut votes: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &(_, row) in top {
        *votes.entry(index.labels[row]).or_default() += 1;
    }
    let max_votes = *votes.values().max().expect("k >= 1");
    let tied: Vec<usize> = votes
        .iter()
        .filter(|(_, &v)| v == max_votes)
        .map(|(&c, _)| c)
        .collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    for &(_, row) in top {
        if tied.contains(&index.labels[row]) {
            return Ok(index.labels[row]);
        }
    }
    unreachable!("a tied class always appears among the neighbors");
}

/// Per-class and average accuracy (percent) for one neighbor count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnRow {
    pub k: usize,
    pub per_class: Vec<f64>,
    pub average: f64,
}

/// KNN accuracy table in the rows-K, columns-class layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub classes: Vec<String>,
    pub rows: Vec<KnnRow>,
}

impl KnnReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k");
        for c in &self.classes {
            out.push_str(&format!(",{c}"));
        }
        out.push_str(",average\n");
        for row in &self.rows {
            out.push_str(&row.k.to_string());
            for v in &row.per_class {
                if v.is_nan() {
                    out.push(',');
                } else {
                    out.push_str(&format!(",{v:.2}"));
                }
            }
            out.push_str(&format!(",{:.2}\n", row.average));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>4}", "K");
        for c in &self.classes {
            out.push_str(&format!(" {c:>10}"));
        }
        out.push_str(&format!(" {:>10}\n", "Average"));
        for row in &self.rows {
            out.push_str(&format!("{:>4}", row.k));
            for v in &row.per_class {
                if v.is_nan() {
                    out.push_str(&format!(" {:>10}", "-"));
                } else {
                    out.push_str(&format!(" {v:>10.2}"));
                }
            }
            out.push_str(&format!(" {:>10.2}\n", row.average));
        }
        out
    }
}

/// Classifies every query row for each K; per-class accuracy is percent
/// correct among that class's queries, and the average is the overall
/// percent correct (the count-weighted mean of the per-class entries).
pub fn knn_report(
    index: &EmbeddingIndex,
    query_rows: &[usize],
    ks: &[usize],
    classes: &[String],
) -> Result<KnnReport> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let preds: Vec<usize> = query_rows
            .par_iter()
            .map(|&row| knn_classify(index, row, k))
            .collect::<Result<_>>()?;
        let truths: Vec<usize> = query_rows.iter().map(|&row| index.labels[row]).collect();
        rows.push(tally_knn_row(k, &truths, &preds, classes.len())?);
    }
    Ok(KnnReport {
        classes: classes.to_vec(),
        rows,
    })
}

/// Same table, but each query lives outside the index (no self-exclusion):
/// the index supplies the neighbors, `queries` supplies the items scored.
pub fn knn_report_split(
    index: &EmbeddingIndex,
    queries: &EmbeddingIndex,
    ks: &[usize],
    classes: &[String],
) -> Result<KnnReport> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let preds: Vec<usize> = queries
            .embeddings
            .par_iter()
            .map(|q| knn_classify_embedding(index, q, k))
            .collect::<Result<_>>()?;
        rows.push(tally_knn_row(k, &queries.labels, &preds, classes.len())?);
    }
    Ok(KnnReport {
        classes: classes.to_vec(),
        rows,
    })
}

fn tally_knn_row(
    k: usize,
    truths: &[usize],
    preds: &[usize],
    num_classes: usize,
) -> Result<KnnRow> {
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&truth, &pred) in truths.iter().zip(preds) {
        total[truth] += 1;
        if pred == truth {
            correct[truth] += 1;
        }
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| {
            if t == 0 {
                f64::NAN
            } else {
                100.0 * c as f64 / t as f64
            }
        })
        .collect();
    let overall_correct: usize = correct.iter().sum();
    let overall_total: usize = total.iter().sum();
    if overall_total == 0 {
        return Err(Error::Data("no query rows for knn report".into()));
    }
    Ok(KnnRow {
        k,
        per_class,
        average: 100.0 * overall_correct as f64 / overall_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_hot(class: usize, width: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        v[class] = 1.0;
        v
    }

    #[test]
    fn distance_episode_oracle_cases() {
        // Identical twin in support wins with distance zero.
        let q = vec![0.3, 0.7, -0.1];
        let support = vec![(2, vec![5.0, 5.0, 5.0]), (4, q.clone()), (1, vec![0.0; 3])];
        assert_eq!(predict_by_distance(&q, &support).unwrap(), 4);
        // Degenerate 1-way episode is always correct.
        assert_eq!(
            predict_by_distance(&q, &[(3, vec![9.0, 9.0, 9.0])]).unwrap(),
            3
        );
        assert!(predict_by_distance(&q, &[]).is_err());
    }

    #[test]
    fn one_hot_support_is_always_correct() {
        // Perfect-oracle embeddings: accuracy exactly 1.0 over all queries.
        let mut correct = 0;
        for truth in 0..5 {
            let q = one_hot(truth, 5);
            let support: Vec<(usize, Vec<f64>)> = (0..5).map(|c| (c, one_hot(c, 5))).collect();
            if predict_by_distance(&q, &support).unwrap() == truth {
                correct += 1;
            }
        }
        assert_eq!(correct, 5);
    }

    #[test]
    fn random_embeddings_score_near_chance() {
        // 5-way episodes with i.i.d. random embeddings: accuracy ~ 0.2
        // within 3 sigma binomial bounds.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 2000;
        let mut correct = 0usize;
        for _ in 0..n {
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let support: Vec<(usize, Vec<f64>)> = (0..5)
                .map(|c| (c, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            if predict_by_distance(&q, &support).unwrap() == 0 {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        let sigma = (0.2 * 0.8 / n as f64).sqrt();
        assert!((acc - 0.2).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    fn toy_index() -> EmbeddingIndex {
        // Class 0 around (0, 0), class 1 around (10, 10).
        let pts = [
            (vec![0.0, 0.0], 0),
            (vec![0.1, 0.0], 0),
            (vec![0.0, 0.2], 0),
            (vec![10.0, 10.0], 1),
            (vec![10.1, 10.0], 1),
            (vec![9.9, 10.1], 1),
        ];
        EmbeddingIndex {
            embeddings: pts.iter().map(|(e, _)| e.clone()).collect(),
            labels: pts.iter().map(|(_, l)| *l).collect(),
            ids: (0..pts.len()).map(|i| format!("img{i}")).collect(),
        }
    }

    #[test]
    fn knn_k1_is_nearest_neighbor_and_majority_works() {
        let index = toy_index();
        assert_eq!(knn_classify(&index, 0, 1).unwrap(), 0);
        assert_eq!(knn_classify(&index, 3, 1).unwrap(), 1);
        // {A, A, B} style vote.
        assert_eq!(knn_classify(&index, 0, 3).unwrap(), 0);
        assert!(knn_classify(&index, 0, 6).is_err());
        assert!(knn_classify(&index, 99, 1).is_err());
    }

    #[test]
    fn knn_agrees_with_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 120;
        let index = EmbeddingIndex {
            embeddings: (0..n)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            labels: (0..n).map(|_| rng.gen_range(0..4)).collect(),
            ids: (0..n).map(|i| i.to_string()).collect(),
        };
        for &k in &[1usize, 3, 5, 7] {
            for q in 0..n {
                // Oracle: exhaustive sort, plain first-seen-max vote with the
                // same nearest-among-tied rule.
                let mut d: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| i != q)
                    .map(|i| {
                        let dist: f64 = index.embeddings[q]
                            .iter()
                            .zip(&index.embeddings[i])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        (dist, i)
                    })
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut counts = [0usize; 4];
                for &(_, i) in &d[..k] {
                    counts[index.labels[i]] += 1;
                }
                let best = *counts.iter().max().unwrap();
                let mut expected = None;
                for &(_, i) in &d[..k] {
                    if counts[index.labels[i]] == best {
                        expected = Some(index.labels[i]);
                        break;
                    }
                }
                assert_eq!(knn_classify(&index, q, k).unwrap(), expected.unwrap());
            }
        }
    }

    #[test]
    fn knn_invariant_under_row_permutation() {
        let index = toy_index();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let permuted = EmbeddingIndex {
            embeddings: perm.iter().map(|&i| index.embeddings[i].clone()).collect(),
            labels: perm.iter().map(|&i| index.labels[i]).collect(),
            ids: perm.iter().map(|&i| index.ids[i].clone()).collect(),
        };
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                knn_classify(&index, old_row, 3).unwrap(),
                knn_classify(&permuted, new_row, 3).unwrap()
            );
        }
    }

    #[test]
    fn knn_report_all_correct_oracle_and_weighted_average() {
        let index = toy_index();
        let queries: Vec<usize> = (0..index.len()).collect();
        let classes = vec!["a".to_string(), "b".to_string()];
        let report = knn_report(&index, &queries, &[1, 3], &classes).unwrap();
        for row in &report.rows {
            assert!(row.per_class.iter().all(|&v| (v - 100.0).abs() < 1e-12));
            assert!((row.average - 100.0).abs() < 1e-12);
        }
        // Weighted per-class average equals the overall accuracy.
        for row in &report.rows {
            let mut weighted = 0.0;
            let mut total = 0.0;
            for (c, &acc) in row.per_class.iter().enumerate() {
                let count = queries.iter().filter(|&&q| index.labels[q] == c).count() as f64;
                weighted += acc * count;
                total += count;
            }
            assert!((weighted / total - row.average).abs() < 1e-9);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("k,a,b,average"));
    }

    #[test]
    fn external_queries_match_in_index_votes() {
        let index = toy_index();
        // A query outside the index lands with its cluster.
        assert_eq!(knn_classify_embedding(&index, &[0.05, 0.05], 3).unwrap(), 0);
        assert_eq!(
            knn_classify_embedding(&index, &[10.05, 9.95], 3).unwrap(),
            1
        );
        assert!(knn_classify_embedding(&index, &[0.0, 0.0], 0).is_err());
        assert!(knn_classify_embedding(&index, &[0.0, 0.0], 7).is_err());
        // Split report against a clean index scores the toy clusters 100%.
        let queries = EmbeddingIndex {
            embeddings: vec![vec![0.3, 0.3], vec![9.5, 9.5]],
            labels: vec![0, 1],
            ids: vec!["q0".into(), "q1".into()],
        };
        let classes = vec!["a".to_string(), "b".to_string()];
        let report = knn_report_split(&index, &queries, &[1, 3], &classes).unwrap();
        for row in &report.rows {
            assert!((row.average - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_config_validation() {
        let mut cfg = EvalConfig::default();
        assert!(cfg.validate(5).is_ok());
        assert!(cfg.validate(4).is_err());
        cfg.n_way = 3;
        cfg.knn_k = vec![2];
        assert!(cfg.validate(5).is_err());
    }

    #[test]
    fn episode_classes_cover_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for truth in 0..5 {
            let classes = episode_classes(5, 3, truth, &mut rng);
            assert_eq!(classes.len(), 3);
            assert!(classes.contains(&truth));
        }
        assert_eq!(episode_classes(5, 5, 2, &mut rng), vec![0, 1, 2, 3, 4]);
    }
}
