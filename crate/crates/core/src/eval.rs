//! Frozen-feature evaluation by temperature-weighted k-NN voting.

use std::fmt::Write as _;

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::nnet::scalar::{gemm, MatRef};
use crate::nnet::{features_chunked, EncoderParams};
use crate::objective::EmbeddingBatch;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
const EMBED_CHUNK: usize = 256;

/// Labelled unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    embeddings: EmbeddingBatch<f32>,
    labels: Vec<u32>,
    classes: u32,
    source: String,
}

impl FeatureBank {
    pub fn new(embeddings: EmbeddingBatch<f32>, labels: Vec<u32>, classes: u32, source: impl Into<String>) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(Error::shape(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            embeddings,
            labels,
            classes,
            source: source.into(),
        })
    }

    pub fn embeddings(&self) -> &EmbeddingBatch<f32> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Embeds a dataset without augmentation, using the normalized pooled
/// backbone features rather than the projection head output.
pub fn embed_dataset(params: &EncoderParams<f32>, dataset: &ImageBatch) -> Result<EmbeddingBatch<f32>> {
    features_chunked(params, dataset, EMBED_CHUNK)
}

/// One embedding per sample of `dataset`; `classes` of 0 means
/// "one more than the largest label".
pub fn build_bank(params: &EncoderParams<f32>, dataset: &ImageBatch, classes: u32, source: &str) -> Result<FeatureBank> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::invalid("bank dataset has no labels"))?
        .to_vec();
    let classes = if classes == 0 {
        labels.iter().max().map_or(0, |m| m + 1)
    } else {
        classes
    };
    FeatureBank::new(embed_dataset(params, dataset)?, labels, classes, source)
}

/// Predicted class per query row: the `k` most cosine-similar bank rows vote
/// with weight `exp(sim / temperature)`; ties go to the lower class id.
pub fn knn_classify(bank: &FeatureBank, queries: &EmbeddingBatch<f32>, k: usize, temperature: f64) -> Result<Vec<u32>> {
    if bank.is_empty() {
        return Err(Error::invalid("k-NN bank is empty"));
    }
    let m = bank.len();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("k = {k} must be in 1..={m}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let d = bank.embeddings.dim();
    if queries.dim() != d {
        return Err(Error::shape(format!("query dim {} vs bank dim {d}", queries.dim())));
    }
    let nq = queries.len();
    let mut sims = vec![0.0f32; nq * m];
    gemm(
        1.0,
        MatRef::new(queries.data(), nq, d),
        MatRef::new(bank.embeddings.data(), m, d).t(),
        0.0,
        &mut sims,
    );
    let mut order: Vec<usize> = Vec::with_capacity(m);
    let mut votes = vec![0.0f64; bank.classes as usize];
    let mut out = Vec::with_capacity(nq);
    for row in sims.chunks_exact(m) {
        order.clear();
        order.extend(0..m);
        let cmp = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
        if k < m {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let top = &order[..k];
        let best = top.iter().map(|&j| row[j]).fold(f32::NEG_INFINITY, f32::max) as f64;
        votes.iter_mut().for_each(|v| *v = 0.0);
        for &j in top {
            votes[bank.labels[j] as usize] += ((row[j] as f64 - best) / temperature).exp();
        }
        let mut winner = 0usize;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[winner] {
                winner = c;
            }
        }
        out.push(winner as u32);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnReport {
    pub accuracy: f64,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
    pub predictions: Vec<u32>,
}

impl KnnReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,correct,total,accuracy\n");
        for (c, &(ok, n)) in self.per_class.iter().enumerate() {
            let acc = if n == 0 { 0.0 } else { ok as f64 / n as f64 };
            let _ = writeln!(s, "{c},{ok},{n},{acc:.6}");
        }
        s
    }
}

/// Classifies `queries` and scores them against `labels`.
pub fn evaluate(
    bank: &FeatureBank,
    queries: &EmbeddingBatch<f32>,
    labels: &[u32],
    k: usize,
    temperature: f64,
) -> Result<KnnReport> {
    if labels.len() != queries.len() {
        return Err(Error::shape(format!("{} labels for {} queries", labels.len(), queries.len())));
    }
    let predictions = knn_classify(bank, queries, k, temperature)?;
    let classes = bank.classes.max(labels.iter().max().map_or(0, |m| m + 1)) as usize;
    let mut per_class = vec![(0usize, 0usize); classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        per_class[l as usize].1 += 1;
        if p == l {
            per_class[l as usize].0 += 1;
        }
    }
    let correct: usize = per_class.iter().map(|c| c.0).sum();
    Ok(KnnReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class,
        predictions,
    })
}

/// Embeds both sets with `params` and runs [`evaluate`].
pub fn knn_accuracy(
    params: &EncoderParams<f32>,
    train: &ImageBatch,
    test: &ImageBatch,
    k: usize,
    temperature: f64,
) -> Result<KnnReport> {
    let bank = build_bank(params, train, 0, "")?;
    let labels = test.labels().ok_or_else(|| Error::invalid("test set has no labels"))?;
    evaluate(&bank, &embed_dataset(params, test)?, labels, k, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::EmbeddingRole;
    use crate::rng::{self, Domain};
    use rand_distr::{Distribution, Normal};

    fn emb(rows: &[Vec<f32>]) -> EmbeddingBatch<f32> {
        let d = rows[0].len();
        EmbeddingBatch::normalized(rows.len(), d, rows.concat(), EmbeddingRole::Query).unwrap()
    }

    #[test]
    fn exact_match_with_k1() {
        let bank = FeatureBank::new(emb(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]), vec![2, 0, 1], 3, "t").unwrap();
        let pred = knn_classify(&bank, &emb(&[vec![0.0, 1.0, 0.0]]), 1, 0.1).unwrap();
        assert_eq!(pred, vec![0]);
    }

    #[test]
    fn orthogonal_single_sample_classes() {
        let bank = FeatureBank::new(emb(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![0, 1], 2, "t").unwrap();
        assert_eq!(knn_classify(&bank, &emb(&[vec![1.0, 0.0]]), 2, 0.1).unwrap(), vec![0]);
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let bank = FeatureBank::new(emb(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![1, 0], 2, "t").unwrap();
        let q = emb(&[vec![1.0, 1.0]]);
        assert_eq!(knn_classify(&bank, &q, 2, 0.1).unwrap(), vec![0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let bank = FeatureBank::new(emb(&[vec![1.0, 0.0]]), vec![0], 1, "t").unwrap();
        let q = emb(&[vec![1.0, 0.0]]);
        assert!(knn_classify(&bank, &q, 2, 0.1).is_err());
        assert!(knn_classify(&bank, &q, 1, 0.0).is_err());
        assert!(FeatureBank::new(emb(&[vec![1.0, 0.0]]), vec![3], 2, "t").is_err());
    }

    #[test]
    fn gaussian_clusters_match_nearest_centroid() {
        let d = 8;
        let mut r = rng::stream(11, Domain::Synthetic, &[]);
        let noise = Normal::new(0.0f32, 0.05).unwrap();
        let means: Vec<Vec<f32>> = (0..3).map(|c| (0..d).map(|j| if j == c { 1.0 } else { 0.0 }).collect()).collect();
        let mut draw = |n: usize| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for c in 0..3 {
                for _ in 0..n {
                    rows.push(means[c].iter().map(|&m| m + noise.sample(&mut r)).collect::<Vec<f32>>());
                    labels.push(c as u32);
                }
            }
            (rows, labels)
        };
        let (bank_rows, bank_labels) = draw(100);
        let (q_rows, q_labels) = draw(100);
        let centroid_pred: Vec<u32> = q_rows
            .iter()
            .map(|q| {
                (0..3)
                    .min_by(|&a, &b| {
                        let da: f32 = q.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                        let db: f32 = q.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap() as u32
            })
            .collect();
        assert_eq!(centroid_pred, q_labels);
        let bank = FeatureBank::new(emb(&bank_rows), bank_labels, 3, "clusters").unwrap();
        let report = evaluate(&bank, &emb(&q_rows), &q_labels, 20, 0.1).unwrap();
        assert_eq!(report.predictions, centroid_pred);
        assert_eq!(report.accuracy, 1.0);
        assert!(report.per_class_csv().starts_with("class,correct,total,accuracy\n0,100,100,1.000000"));
    }
}
