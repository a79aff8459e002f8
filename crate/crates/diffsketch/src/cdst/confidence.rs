//! Cross-domain confidence score for the directional embedding losses: how
//! reliably difference vectors align within and across two domains of
//! image/sketch pairs, normalized so the pooled set scores 100.

use crate::feature_store::{Image, Sketch};
use crate::objectives::{Embedding, SemanticEmbedder, DEGENERATE_DIFF_NORM};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("both domains need at least 2 pairs")]
    TooFewPairs,
    #[error("pooled similarity is zero; confidence undefined")]
    DegenerateNormalization,
}

/// Confidence scores over two domains A and B.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceReport {
    /// `matrix[x][y]` is confidence(domain x, domain y) with 0 = A, 1 = B.
    pub matrix: [[f64; 2]; 2],
    /// Confidence of the pooled set against itself; 100 by construction.
    pub all: f64,
}

fn diff(a: &Embedding, b: &Embedding) -> Vec<f64> {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x - y)
        .collect()
}

fn cos(u: &[f64], v: &[f64]) -> Option<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < DEGENERATE_DIFF_NORM || nv < DEGENERATE_DIFF_NORM {
        return None;
    }
    Some(u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv))
}

/// Mean cosine alignment over cross pairs of two domains. For each pair the
/// image-to-image direction is compared against the sketch-to-sketch
/// direction, and the image-to-sketch gap of one item against the other's.
/// Value-identical items are skipped, so comparing a domain with itself and
/// with an identical copy give the same score.
fn similarity(x: &[(Embedding, Embedding)], y: &[(Embedding, Embedding)]) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for (ix, sx) in x.iter() {
        for (iy, sy) in y.iter() {
            if ix == iy && sx == sy {
                continue;
            }
            if let Some(c) = cos(&diff(iy, ix), &diff(sy, sx)) {
                total += c;
                count += 1;
            }
            if let Some(c) = cos(&diff(sx, ix), &diff(sy, iy)) {
                total += c;
                count += 1;
            }
        }
    }
    (total, count)
}

fn sim_value(x: &[(Embedding, Embedding)], y: &[(Embedding, Embedding)]) -> f64 {
    let (total, count) = similarity(x, y);
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Confidence over pre-embedded (image, sketch) pairs.
pub fn confidence_from_embeddings(
    domain_a: &[(Embedding, Embedding)],
    domain_b: &[(Embedding, Embedding)],
) -> Result<ConfidenceReport, ConfidenceError> {
    if domain_a.len() < 2 || domain_b.len() < 2 {
        return Err(ConfidenceError::TooFewPairs);
    }
    let mut pooled = domain_a.to_vec();
    pooled.extend_from_slice(domain_b);
    let sim_all = sim_value(&pooled, &pooled);
    if sim_all.abs() < 1e-12 {
        return Err(ConfidenceError::DegenerateNormalization);
    }
    let score = |x: &[(Embedding, Embedding)], y: &[(Embedding, Embedding)]| {
        sim_value(x, y) / sim_all * 100.0
    };
    Ok(ConfidenceReport {
        matrix: [
            [score(domain_a, domain_a), score(domain_a, domain_b)],
            [score(domain_b, domain_a), score(domain_b, domain_b)],
        ],
        all: 100.0,
    })
}

/// Embeds both domains and computes their confidence matrix.
pub fn confidence_score(
    domain_a: &[(Image, Sketch)],
    domain_b: &[(Image, Sketch)],
    embedder: &dyn SemanticEmbedder,
) -> Result<ConfidenceReport, ConfidenceError> {
    let embed = |pairs: &[(Image, Sketch)]| -> Vec<(Embedding, Embedding)> {
        pairs
            .iter()
            .map(|(i, s)| (embedder.embed_image(i), embedder.embed_sketch(s)))
            .collect()
    };
    confidence_from_embeddings(&embed(domain_a), &embed(domain_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    /// A domain whose image differences are mirrored by its sketch
    /// differences: items spread along `axis` with a fixed image-to-sketch
    /// offset along `offset_axis`.
    fn aligned_domain(
        base: &[f64],
        axis: usize,
        offset_axis: usize,
        count: usize,
    ) -> Vec<(Embedding, Embedding)> {
        (0..count)
            .map(|i| {
                let mut img = base.to_vec();
                img[axis] += 0.2 * (i as f64 + 1.0);
                let mut sk = img.clone();
                sk[offset_axis] += 0.5;
                (e(&img), e(&sk))
            })
            .collect()
    }

    #[test]
    fn identical_domains_score_identically() {
        let a = aligned_domain(&[1.0, 0.0, 0.0, 0.0], 1, 2, 4);
        let b = a.clone();
        let report = confidence_from_embeddings(&a, &b).unwrap();
        // Value-identical items are skipped everywhere, so comparing A with
        // an identical copy equals comparing A with itself.
        assert!((report.matrix[0][0] - report.matrix[0][1]).abs() < 1e-9);
        assert!((report.all - 100.0).abs() < 1e-12);
    }

    #[test]
    fn cross_scores_are_symmetric() {
        let a = aligned_domain(&[1.0, 0.0, 0.0, 0.0], 1, 2, 3);
        let b = aligned_domain(&[0.0, 1.0, 0.0, 0.0], 2, 3, 3);
        let report = confidence_from_embeddings(&a, &b).unwrap();
        assert!((report.matrix[0][1] - report.matrix[1][0]).abs() < 1e-9);
    }

    #[test]
    fn within_domain_beats_cross_domain_for_aligned_construction() {
        // Domain A varies along axis 1, domain B along axis 3, with
        // different image-to-sketch offsets; within-domain differences align
        // while cross pairs mix directions.
        let a = aligned_domain(&[1.0, 0.0, 0.0, 0.0, 0.0], 1, 2, 4);
        let b = aligned_domain(&[0.0, 0.0, 0.0, 1.0, 0.0], 3, 4, 4);
        let report = confidence_from_embeddings(&a, &b).unwrap();
        assert!(
            report.matrix[0][0] > report.matrix[0][1],
            "within A {} should beat cross {}",
            report.matrix[0][0],
            report.matrix[0][1]
        );
        assert!(
            report.matrix[1][1] > report.matrix[1][0],
            "within B {} should beat cross {}",
            report.matrix[1][1],
            report.matrix[1][0]
        );
    }

    #[test]
    fn rejects_undersized_domains() {
        let a = aligned_domain(&[1.0, 0.0, 0.0], 1, 2, 1);
        let b = aligned_domain(&[0.0, 1.0, 0.0], 1, 2, 3);
        assert!(matches!(
            confidence_from_embeddings(&a, &b),
            Err(ConfidenceError::TooFewPairs)
        ));
    }
}
