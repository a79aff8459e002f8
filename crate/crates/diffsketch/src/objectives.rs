//! Training objectives: reconstruction (pixel, perceptual, embedding
//! similarity) and the directional embedding losses that align image-space
//! and sketch-space difference vectors.
//!
//! Embedders and perceptual metrics are pluggable. The adapters shipped here
//! are deterministic fixed-seed stand-ins for production backbones: a random
//! projection in place of a vision-language encoder, and a multi-scale L2
//! over a random convolutional stack in place of a pretrained perceptual net.

use crate::autodiff::{cosine_node, normalize_node, Arr, NodeId, Tape};
use crate::convert::{image_to_chw, sketch_to_chw};
use crate::feature_store::{Image, Sketch};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Differences with L2 norm below this carry no directional signal and
/// contribute a loss of zero.
pub const DEGENERATE_DIFF_NORM: f64 = 1e-8;

const EMBED_POOL: usize = 16;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("cannot normalize a zero or non-finite vector")]
    DegenerateVector,
    #[error("sketch shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

/// Unit-norm semantic embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` to unit length; zero or non-finite input is rejected.
    pub fn new(v: Vec<f64>) -> Result<Self, ObjectiveError> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < DEGENERATE_DIFF_NORM {
            return Err(ObjectiveError::DegenerateVector);
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Maps images and sketches into a shared embedding space. Must be
/// deterministic and safe for concurrent read-only use.
pub trait SemanticEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Embedding;
    fn embed_sketch(&self, sketch: &Sketch) -> Embedding;
}

/// Embedder that can also run on tape nodes so losses backpropagate through
/// it into the generator.
pub trait DifferentiableEmbedder: SemanticEmbedder {
    /// `node` is a CHW tensor with 3 channels.
    fn embed_image_node(&self, tape: &mut Tape, node: NodeId) -> NodeId;
    /// `node` is a CHW tensor with 1 channel.
    fn embed_sketch_node(&self, tape: &mut Tape, node: NodeId) -> NodeId;
}

/// Pluggable perceptual distance: zero at identity, symmetric, deterministic.
pub trait PerceptualMetric: Sync {
    fn distance_images(&self, a: &Image, b: &Image) -> f64;
    fn distance_sketches(&self, a: &Sketch, b: &Sketch) -> f64;
}

/// Perceptual metric usable inside the training graph.
pub trait DifferentiablePerceptual: PerceptualMetric {
    /// Both nodes are 1-channel CHW sketches of identical shape.
    fn distance_node(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId;
}

/// Balancing weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub across: f64,
    pub within: f64,
    pub l1: f64,
    pub lpips: f64,
    pub clip_sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            across: 1.0,
            within: 1.0,
            l1: 30.0,
            lpips: 15.0,
            clip_sim: 30.0,
        }
    }
}

/// Unweighted loss components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_l1: f64,
    pub rec_perc: f64,
    pub rec_sim: f64,
    pub within: f64,
    pub across: f64,
    pub total: f64,
}

fn diff(a: &Embedding, b: &Embedding) -> Vec<f64> {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x - y)
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// 1 - cos(a1 - a2, b1 - b2) in [0, 2]. A difference with norm below
/// [`DEGENERATE_DIFF_NORM`] carries no direction, so the loss is 0.
pub fn directional_loss(a1: &Embedding, a2: &Embedding, b1: &Embedding, b2: &Embedding) -> f64 {
    let u = diff(a1, a2);
    let v = diff(b1, b2);
    let (nu, nv) = (norm(&u), norm(&v));
    if nu < DEGENERATE_DIFF_NORM || nv < DEGENERATE_DIFF_NORM {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
}

/// Tape counterpart of [`directional_loss`]. The degenerate branch is decided
/// from forward values, where the gradient is undefined anyway.
pub fn directional_loss_node(
    tape: &mut Tape,
    a1: NodeId,
    a2: NodeId,
    b1: NodeId,
    b2: NodeId,
) -> NodeId {
    let u = tape.sub(a1, a2);
    let v = tape.sub(b1, b2);
    let nu = norm(&tape.value(u).data);
    let nv = norm(&tape.value(v).data);
    if nu < DEGENERATE_DIFF_NORM || nv < DEGENERATE_DIFF_NORM {
        return tape.constant(Arr::scalar(0.0));
    }
    let cos = cosine_node(tape, u, v, NORM_EPS);
    let one = tape.constant(Arr::scalar(1.0));
    tape.sub(one, cos)
}

/// Directional loss within domains: image differences must mirror sketch
/// differences.
pub fn loss_within(
    i_samp: &Image,
    i_source: &Image,
    s_samp: &Sketch,
    s_gt: &Sketch,
    embedder: &dyn SemanticEmbedder,
) -> f64 {
    directional_loss(
        &embedder.embed_image(i_samp),
        &embedder.embed_image(i_source),
        &embedder.embed_sketch(s_samp),
        &embedder.embed_sketch(s_gt),
    )
}

/// Directional loss across domains: the sketch-to-image gap of the sample
/// must mirror that of the ground truth.
pub fn loss_across(
    i_samp: &Image,
    i_source: &Image,
    s_samp: &Sketch,
    s_gt: &Sketch,
    embedder: &dyn SemanticEmbedder,
) -> f64 {
    directional_loss(
        &embedder.embed_sketch(s_samp),
        &embedder.embed_image(i_samp),
        &embedder.embed_sketch(s_gt),
        &embedder.embed_image(i_source),
    )
}

fn mean_abs_diff(a: &Sketch, b: &Sketch) -> Result<f64, ObjectiveError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(ObjectiveError::ShapeMismatch(
            (a.height(), a.width()),
            (b.height(), b.width()),
        ));
    }
    let (da, db) = (a.tensor().data(), b.tensor().data());
    Ok(da
        .iter()
        .zip(db)
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / da.len() as f64)
}

/// Embedding similarity term: 1 - cos of two unit embeddings, clamped at 0.
pub fn embedding_similarity_loss(a: &Embedding, b: &Embedding) -> f64 {
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    (1.0 - dot).max(0.0)
}

/// Reconstruction loss, Eq.-style composite of pixel, perceptual, and
/// embedding-similarity terms.
pub fn loss_rec(
    pred: &Sketch,
    gt: &Sketch,
    embedder: &dyn SemanticEmbedder,
    perceptual: &dyn PerceptualMetric,
    weights: &LossWeights,
) -> Result<f64, ObjectiveError> {
    let l1 = mean_abs_diff(pred, gt)?;
    let perc = perceptual.distance_sketches(pred, gt);
    let sim = embedding_similarity_loss(&embedder.embed_sketch(pred), &embedder.embed_sketch(gt));
    Ok(weights.l1 * l1 + weights.lpips * perc + weights.clip_sim * sim)
}

/// Full objective over plain values, with every term reported.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    pred: &Sketch,
    gt: &Sketch,
    s_samp: &Sketch,
    i_samp: &Image,
    i_source: &Image,
    embedder: &dyn SemanticEmbedder,
    perceptual: &dyn PerceptualMetric,
    weights: &LossWeights,
) -> Result<LossBreakdown, ObjectiveError> {
    let rec_l1 = mean_abs_diff(pred, gt)?;
    let rec_perc = perceptual.distance_sketches(pred, gt);
    let rec_sim =
        embedding_similarity_loss(&embedder.embed_sketch(pred), &embedder.embed_sketch(gt));
    let within = loss_within(i_samp, i_source, s_samp, gt, embedder);
    let across = loss_across(i_samp, i_source, s_samp, gt, embedder);
    let total = weights.l1 * rec_l1
        + weights.lpips * rec_perc
        + weights.clip_sim * rec_sim
        + weights.within * within
        + weights.across * across;
    Ok(LossBreakdown {
        rec_l1,
        rec_perc,
        rec_sim,
        within,
        across,
        total,
    })
}

/// Builds the full objective on the tape. `pred` and `s_samp` are live
/// 1-channel CHW nodes; everything else enters as constants. Returns the
/// total-loss node together with the evaluated breakdown.
#[allow(clippy::too_many_arguments)]
pub fn loss_total_node(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Sketch,
    s_samp: NodeId,
    i_samp: &Image,
    i_source: &Image,
    embedder: &dyn DifferentiableEmbedder,
    perceptual: &dyn DifferentiablePerceptual,
    weights: &LossWeights,
) -> (NodeId, LossBreakdown) {
    let gt_node = {
        let arr = sketch_to_chw(gt);
        tape.constant(arr)
    };

    // Reconstruction terms.
    let diff = tape.sub(pred, gt_node);
    let abs = tape.abs(diff);
    let rec_l1 = tape.mean(abs);
    let rec_perc = perceptual.distance_node(tape, pred, gt_node);
    let e_pred = embedder.embed_sketch_node(tape, pred);
    let e_gt = {
        let arr = Arr::new(vec![embedder.dim()], embedder.embed_sketch(gt).as_slice().to_vec());
        tape.constant(arr)
    };
    let cos = cosine_node(tape, e_pred, e_gt, NORM_EPS);
    let one = tape.constant(Arr::scalar(1.0));
    let rec_sim = tape.sub(one, cos);

    // Directional terms. Only the sampled sketch is live.
    let e_s_samp = embedder.embed_sketch_node(tape, s_samp);
    let e_i_samp = {
        let arr = Arr::new(vec![embedder.dim()], embedder.embed_image(i_samp).as_slice().to_vec());
        tape.constant(arr)
    };
    let e_i_source = {
        let arr = Arr::new(
            vec![embedder.dim()],
            embedder.embed_image(i_source).as_slice().to_vec(),
        );
        tape.constant(arr)
    };
    let within = directional_loss_node(tape, e_i_samp, e_i_source, e_s_samp, e_gt);
    let across = directional_loss_node(tape, e_s_samp, e_i_samp, e_gt, e_i_source);

    let weighted = [
        tape.scale(rec_l1, weights.l1),
        tape.scale(rec_perc, weights.lpips),
        tape.scale(rec_sim, weights.clip_sim),
        tape.scale(within, weights.within),
        tape.scale(across, weights.across),
    ];
    let mut total = weighted[0];
    for term in &weighted[1..] {
        total = tape.add(total, *term);
    }

    let breakdown = LossBreakdown {
        rec_l1: tape.value(rec_l1).item(),
        rec_perc: tape.value(rec_perc).item(),
        rec_sim: tape.value(rec_sim).item(),
        within: tape.value(within).item(),
        across: tape.value(across).item(),
        total: tape.value(total).item(),
    };
    (total, breakdown)
}

/// Fixed random projection over pooled pixels, standing in for a pretrained
/// vision-language encoder. Deterministic per seed.
pub struct RandomProjectionEmbedder {
    dim: usize,
    image_proj: Arr,
    sketch_proj: Arr,
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut matrix = |rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Arr::new(vec![rows, cols], data)
        };
        let image_proj = matrix(dim, 3 * EMBED_POOL * EMBED_POOL);
        let sketch_proj = matrix(dim, EMBED_POOL * EMBED_POOL);
        Self {
            dim,
            image_proj,
            sketch_proj,
        }
    }

    fn embed_node(&self, tape: &mut Tape, node: NodeId, proj: &Arr) -> NodeId {
        let pooled = tape.adaptive_avg_pool(node, EMBED_POOL, EMBED_POOL);
        let n = tape.value(pooled).numel();
        let flat = tape.reshape(pooled, vec![n]);
        let m = tape.constant(proj.clone());
        let projected = tape.matvec(m, flat);
        normalize_node(tape, projected, NORM_EPS)
    }

    fn embed_plain(&self, chw: Arr, proj: &Arr) -> Embedding {
        let mut tape = Tape::new();
        let node = tape.constant(chw);
        let out = self.embed_node(&mut tape, node, proj);
        Embedding::new(tape.value(out).data.clone()).expect("projection of finite input")
    }
}

impl SemanticEmbedder for RandomProjectionEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> Embedding {
        self.embed_plain(image_to_chw(image), &self.image_proj)
    }

    fn embed_sketch(&self, sketch: &Sketch) -> Embedding {
        self.embed_plain(sketch_to_chw(sketch), &self.sketch_proj)
    }
}

impl DifferentiableEmbedder for RandomProjectionEmbedder {
    fn embed_image_node(&self, tape: &mut Tape, node: NodeId) -> NodeId {
        self.embed_node(tape, node, &self.image_proj.clone())
    }

    fn embed_sketch_node(&self, tape: &mut Tape, node: NodeId) -> NodeId {
        self.embed_node(tape, node, &self.sketch_proj.clone())
    }
}

/// Multi-scale L2 over a fixed random convolutional stack; the test-grade
/// perceptual adapter. Scales halve the resolution while it stays even and
/// at least 8 pixels.
pub struct RandomConvPerceptual {
    weight: Arr, // [8, 3, 3, 3]
}

impl RandomConvPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let std = (2.0 / 27.0f64).sqrt();
        let data = (0..8 * 3 * 3 * 3)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Self {
            weight: Arr::new(vec![8, 3, 3, 3], data),
        }
    }

    fn scales(h: usize, w: usize) -> usize {
        let mut scales = 1;
        let (mut h, mut w) = (h, w);
        while scales < 3 && h % 2 == 0 && w % 2 == 0 && h >= 16 && w >= 16 {
            h /= 2;
            w /= 2;
            scales += 1;
        }
        scales
    }

    fn to_rgb(&self, tape: &mut Tape, node: NodeId) -> NodeId {
        let (c, _, _) = tape.value(node).chw();
        match c {
            3 => node,
            1 => tape.concat_channels(&[node, node, node]),
            _ => panic!("perceptual adapter expects 1 or 3 channels, got {c}"),
        }
    }

    fn distance_node_inner(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
        let (_, h, w) = tape.value(a).chw();
        assert_eq!(tape.value(a).shape, tape.value(b).shape, "perceptual shape mismatch");
        let mut a = self.to_rgb(tape, a);
        let mut b = self.to_rgb(tape, b);
        let scales = Self::scales(h, w);
        let weight = tape.constant(self.weight.clone());
        let mut terms = Vec::with_capacity(scales);
        for s in 0..scales {
            if s > 0 {
                a = tape.avg_pool2(a);
                b = tape.avg_pool2(b);
            }
            let fa = tape.conv2d(a, weight, None, 1);
            let fb = tape.conv2d(b, weight, None, 1);
            let fa = tape.leaky_relu(fa, 0.2);
            let fb = tape.leaky_relu(fb, 0.2);
            let d = tape.sub(fa, fb);
            let sq = tape.mul(d, d);
            terms.push(tape.mean(sq));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        tape.scale(total, 1.0 / scales as f64)
    }

    fn distance_plain(&self, a: Arr, b: Arr) -> f64 {
        let mut tape = Tape::new();
        let na = tape.constant(a);
        let nb = tape.constant(b);
        let d = self.distance_node_inner(&mut tape, na, nb);
        tape.value(d).item()
    }
}

impl PerceptualMetric for RandomConvPerceptual {
    fn distance_images(&self, a: &Image, b: &Image) -> f64 {
        self.distance_plain(image_to_chw(a), image_to_chw(b))
    }

    fn distance_sketches(&self, a: &Sketch, b: &Sketch) -> f64 {
        self.distance_plain(sketch_to_chw(a), sketch_to_chw(b))
    }
}

impl DifferentiablePerceptual for RandomConvPerceptual {
    fn distance_node(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
        self.distance_node_inner(tape, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn embedding(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn flat_image(h: usize, w: usize, value: f32) -> Image {
        Image::new(Tensor::new(vec![h, w, 3], vec![value; h * w * 3]).unwrap()).unwrap()
    }

    fn flat_sketch(h: usize, w: usize, value: f32) -> Sketch {
        Sketch::new(Tensor::new(vec![h, w, 1], vec![value; h * w]).unwrap()).unwrap()
    }

    fn gradient_sketch(h: usize, w: usize, seed: u64) -> Sketch {
        let data: Vec<f32> = (0..h * w)
            .map(|i| {
                let x = (i as f32 * 0.37 + seed as f32).sin() * 0.5 + 0.5;
                x.clamp(0.0, 1.0)
            })
            .collect();
        Sketch::new(Tensor::new(vec![h, w, 1], data).unwrap()).unwrap()
    }

    #[test]
    fn directional_loss_parallel_antiparallel_and_degenerate() {
        let a1 = embedding(&[1.0, 0.0, 0.0]);
        let a2 = embedding(&[0.0, 1.0, 0.0]);
        // b-diff parallel to a-diff
        let b1 = embedding(&[2.0, 0.0, 0.0]);
        let b2 = embedding(&[0.0, 2.0, 0.0]);
        assert!(directional_loss(&a1, &a2, &b1, &b2).abs() < 1e-12);
        // antiparallel
        assert!((directional_loss(&a1, &a2, &b2, &b1) - 2.0).abs() < 1e-12);
        // zero difference on one side
        assert_eq!(directional_loss(&a1, &a1, &b1, &b2), 0.0);
    }

    #[test]
    fn directional_loss_is_orthogonal_transform_invariant() {
        // Rotating all four embeddings by the same orthogonal map leaves the
        // loss unchanged.
        let a1 = embedding(&[0.6, 0.8, 0.0]);
        let a2 = embedding(&[0.0, 0.6, 0.8]);
        let b1 = embedding(&[0.8, 0.0, 0.6]);
        let b2 = embedding(&[0.577, 0.577, 0.577]);
        let before = directional_loss(&a1, &a2, &b1, &b2);
        // Rotation about z by 90 degrees then axis swap: orthogonal.
        let rot = |e: &Embedding| {
            let v = e.as_slice();
            embedding(&[-v[1], v[0], v[2]])
        };
        let after = directional_loss(&rot(&a1), &rot(&a2), &rot(&b1), &rot(&b2));
        assert!((before - after).abs() < 1e-12, "{before} vs {after}");
    }

    #[test]
    fn directional_node_matches_plain_formula() {
        let vs = [
            [0.2, -0.4, 0.7, 0.1],
            [0.9, 0.1, -0.2, 0.3],
            [-0.5, 0.5, 0.5, -0.5],
            [0.1, 0.2, 0.3, 0.9],
        ];
        let es: Vec<Embedding> = vs.iter().map(|v| embedding(v)).collect();
        let plain = directional_loss(&es[0], &es[1], &es[2], &es[3]);
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = es
            .iter()
            .map(|e| tape.constant(Arr::new(vec![4], e.as_slice().to_vec())))
            .collect();
        let node = directional_loss_node(&mut tape, nodes[0], nodes[1], nodes[2], nodes[3]);
        assert!((tape.value(node).item() - plain).abs() < 1e-9);
    }

    /// Embedder for constructed cases: embeds by mean intensity onto a fixed
    /// 2-d half circle, so differences are controllable.
    struct MeanAngleEmbedder {
        image_gain: f64,
        sketch_gain: f64,
    }

    impl SemanticEmbedder for MeanAngleEmbedder {
        fn dim(&self) -> usize {
            2
        }
        fn embed_image(&self, image: &Image) -> Embedding {
            let data = image.tensor().data();
            let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
            let angle = self.image_gain * mean;
            embedding(&[angle.cos(), angle.sin()])
        }
        fn embed_sketch(&self, sketch: &Sketch) -> Embedding {
            let data = sketch.tensor().data();
            let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
            let angle = self.sketch_gain * mean;
            embedding(&[angle.cos(), angle.sin()])
        }
    }

    #[test]
    fn loss_within_zero_for_identical_pairs_and_mirrored_diffs() {
        let embedder = MeanAngleEmbedder {
            image_gain: 1.0,
            sketch_gain: 1.0,
        };
        let i = flat_image(8, 8, 0.4);
        let s = flat_sketch(8, 8, 0.7);
        // identical pairs -> both diffs zero -> degenerate rule gives 0
        assert_eq!(loss_within(&i, &i, &s, &s, &embedder), 0.0);

        // mirrored diffs: image pair (0.2, 0.5) and sketch pair (0.2, 0.5)
        // land on identical angles, so differences coincide.
        let ia = flat_image(8, 8, 0.2);
        let ib = flat_image(8, 8, 0.5);
        let sa = flat_sketch(8, 8, 0.2);
        let sb = flat_sketch(8, 8, 0.5);
        let l = loss_within(&ia, &ib, &sa, &sb, &embedder);
        assert!(l < 1e-9, "mirrored diffs should align, got {l}");
    }

    #[test]
    fn loss_within_orthogonal_diffs_give_one() {
        // Image diff along angle 0 -> pi/2 chord, sketch diff rotated to be
        // orthogonal to it.
        struct OrthoEmbedder;
        impl SemanticEmbedder for OrthoEmbedder {
            fn dim(&self) -> usize {
                2
            }
            fn embed_image(&self, image: &Image) -> Embedding {
                if image.pixel(0, 0, 0) < 0.5 {
                    embedding(&[1.0, 0.0])
                } else {
                    embedding(&[0.0, 1.0])
                }
            }
            fn embed_sketch(&self, sketch: &Sketch) -> Embedding {
                // Chord rotated 90 degrees: (1,0)->(0,-1) maps diff (1,1)
                // to (1,-1), orthogonal to (1,1).
                if sketch.pixel(0, 0) < 0.5 {
                    embedding(&[1.0, 0.0])
                } else {
                    embedding(&[0.0, -1.0])
                }
            }
        }
        let l = loss_within(
            &flat_image(8, 8, 0.9),
            &flat_image(8, 8, 0.1),
            &flat_sketch(8, 8, 0.9),
            &flat_sketch(8, 8, 0.1),
            &OrthoEmbedder,
        );
        assert!((l - 1.0).abs() < 1e-9, "orthogonal diffs give 1, got {l}");
    }

    #[test]
    fn loss_across_mirrors_within_cases() {
        let embedder = MeanAngleEmbedder {
            image_gain: 1.0,
            sketch_gain: 1.0,
        };
        let i = flat_image(8, 8, 0.4);
        let s = flat_sketch(8, 8, 0.4);
        // Identical image/sketch embeddings within each pair: across diffs
        // are (s_samp - i_samp) vs (s_gt - i_source), both zero here.
        assert_eq!(loss_across(&i, &i, &s, &s, &embedder), 0.0);

        // Identical sketch-image chords: the sample pair and the gt pair
        // land on the same two embedding points, so the across loss
        // vanishes.
        let i_samp = flat_image(8, 8, 0.2);
        let i_source = flat_image(8, 8, 0.2);
        let s_samp = flat_sketch(8, 8, 0.5);
        let s_gt = flat_sketch(8, 8, 0.5);
        let l = loss_across(&i_samp, &i_source, &s_samp, &s_gt, &embedder);
        assert!(l < 1e-9, "identical chords should align, got {l}");

        // Orthogonal chords: the sample's sketch-image gap points along one
        // axis pair, the gt's along another, with cos = 0.
        struct AxisEmbedder;
        impl SemanticEmbedder for AxisEmbedder {
            fn dim(&self) -> usize {
                4
            }
            fn embed_image(&self, image: &Image) -> Embedding {
                if image.pixel(0, 0, 0) < 0.5 {
                    embedding(&[1.0, 0.0, 0.0, 0.0]) // i_samp
                } else {
                    embedding(&[0.0, 0.0, 1.0, 0.0]) // i_source
                }
            }
            fn embed_sketch(&self, sketch: &Sketch) -> Embedding {
                if sketch.pixel(0, 0) < 0.5 {
                    embedding(&[0.0, 1.0, 0.0, 0.0]) // s_samp
                } else {
                    embedding(&[0.0, 0.0, 0.0, 1.0]) // s_gt
                }
            }
        }
        // u = e2 - e1 and v = e4 - e3 are orthogonal in 4-d.
        let l = loss_across(
            &flat_image(8, 8, 0.1),
            &flat_image(8, 8, 0.9),
            &flat_sketch(8, 8, 0.1),
            &flat_sketch(8, 8, 0.9),
            &AxisEmbedder,
        );
        assert!((l - 1.0).abs() < 1e-12, "orthogonal chords give 1, got {l}");
    }

    /// Perceptual metric that always reports zero, for isolating terms.
    struct ZeroPerceptual;
    impl PerceptualMetric for ZeroPerceptual {
        fn distance_images(&self, _: &Image, _: &Image) -> f64 {
            0.0
        }
        fn distance_sketches(&self, _: &Sketch, _: &Sketch) -> f64 {
            0.0
        }
    }

    /// Embedder that ignores its input, zeroing similarity terms.
    struct ConstantEmbedder;
    impl SemanticEmbedder for ConstantEmbedder {
        fn dim(&self) -> usize {
            2
        }
        fn embed_image(&self, _: &Image) -> Embedding {
            embedding(&[1.0, 0.0])
        }
        fn embed_sketch(&self, _: &Sketch) -> Embedding {
            embedding(&[1.0, 0.0])
        }
    }

    #[test]
    fn loss_rec_zero_at_identity_and_l1_isolates() {
        let embedder = RandomProjectionEmbedder::new(16, 9);
        let perceptual = RandomConvPerceptual::new(4);
        let s = gradient_sketch(16, 16, 1);
        let w = LossWeights::default();
        let zero = loss_rec(&s, &s, &embedder, &perceptual, &w).unwrap();
        assert!(zero.abs() < 1e-12, "loss_rec(x,x) = {zero}");

        // Constant sketches differing by delta with zeroed perceptual and
        // embedding terms leave exactly lambda_l1 * delta.
        let a = flat_sketch(16, 16, 0.2);
        let b = flat_sketch(16, 16, 0.5);
        let l = loss_rec(&a, &b, &ConstantEmbedder, &ZeroPerceptual, &w).unwrap();
        let delta = (0.5f32 - 0.2f32) as f64;
        assert!((l - w.l1 * delta).abs() < 1e-9, "{l}");
    }

    #[test]
    fn loss_rec_weight_bookkeeping_sums_to_75() {
        // Unit component losses under the reference weights sum to
        // 30 + 15 + 30 = 75.
        struct UnitPerceptual;
        impl PerceptualMetric for UnitPerceptual {
            fn distance_images(&self, _: &Image, _: &Image) -> f64 {
                1.0
            }
            fn distance_sketches(&self, _: &Sketch, _: &Sketch) -> f64 {
                1.0
            }
        }
        struct OrthoPairEmbedder;
        impl SemanticEmbedder for OrthoPairEmbedder {
            fn dim(&self) -> usize {
                2
            }
            fn embed_image(&self, _: &Image) -> Embedding {
                embedding(&[1.0, 0.0])
            }
            fn embed_sketch(&self, sketch: &Sketch) -> Embedding {
                if sketch.pixel(0, 0) < 0.5 {
                    embedding(&[1.0, 0.0])
                } else {
                    embedding(&[0.0, 1.0])
                }
            }
        }
        // a=0, b=1 constant sketches: l1 = 1, perceptual = 1 (mock), and the
        // two sketch embeddings are orthogonal so 1 - cos = 1.
        let a = flat_sketch(8, 8, 0.0);
        let b = flat_sketch(8, 8, 1.0);
        let w = LossWeights::default();
        let l = loss_rec(&a, &b, &OrthoPairEmbedder, &UnitPerceptual, &w).unwrap();
        assert!((l - 75.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn loss_rec_rejects_shape_mismatch() {
        let a = flat_sketch(8, 8, 0.1);
        let b = flat_sketch(8, 10, 0.1);
        let err = loss_rec(
            &a,
            &b,
            &ConstantEmbedder,
            &ZeroPerceptual,
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::ShapeMismatch(..)));
    }

    #[test]
    fn loss_total_is_the_weighted_sum_of_parts() {
        let embedder = RandomProjectionEmbedder::new(16, 2);
        let perceptual = RandomConvPerceptual::new(3);
        let pred = gradient_sketch(16, 16, 1);
        let gt = gradient_sketch(16, 16, 2);
        let s_samp = gradient_sketch(16, 16, 3);
        let i_samp = flat_image(16, 16, 0.3);
        let i_source = flat_image(16, 16, 0.6);
        let w = LossWeights {
            across: 0.7,
            within: 1.3,
            l1: 11.0,
            lpips: 5.0,
            clip_sim: 2.0,
        };
        let b = loss_total(&pred, &gt, &s_samp, &i_samp, &i_source, &embedder, &perceptual, &w)
            .unwrap();
        let manual = w.l1 * b.rec_l1
            + w.lpips * b.rec_perc
            + w.clip_sim * b.rec_sim
            + w.within * b.within
            + w.across * b.across;
        assert!((b.total - manual).abs() < 1e-9);

        // All components zero when everything matches.
        let z = loss_total(&gt, &gt, &gt_as_samp(&gt), &i_samp, &i_samp, &embedder, &perceptual, &w)
            .unwrap();
        assert!(z.total.abs() < 1e-9, "{z:?}");
    }

    fn gt_as_samp(gt: &Sketch) -> Sketch {
        gt.clone()
    }

    #[test]
    fn loss_total_node_matches_plain_evaluation() {
        let embedder = RandomProjectionEmbedder::new(12, 5);
        let perceptual = RandomConvPerceptual::new(6);
        let pred = gradient_sketch(16, 16, 4);
        let gt = gradient_sketch(16, 16, 5);
        let s_samp = gradient_sketch(16, 16, 6);
        let i_samp = flat_image(16, 16, 0.25);
        let i_source = flat_image(16, 16, 0.75);
        let w = LossWeights::default();

        let plain = loss_total(
            &pred, &gt, &s_samp, &i_samp, &i_source, &embedder, &perceptual, &w,
        )
        .unwrap();

        let mut tape = Tape::new();
        let pred_node = {
            let arr = sketch_to_chw(&pred);
            tape.param(arr)
        };
        let samp_node = {
            let arr = sketch_to_chw(&s_samp);
            tape.param(arr)
        };
        let (node, breakdown) = loss_total_node(
            &mut tape, pred_node, &gt, samp_node, &i_samp, &i_source, &embedder, &perceptual, &w,
        );
        assert!((breakdown.total - plain.total).abs() < 1e-9);
        assert!((tape.value(node).item() - plain.total).abs() < 1e-9);
        // And gradients flow into both live inputs.
        let grads = tape.backward(node);
        let gp = grads.get(pred_node, &tape);
        let gs = grads.get(samp_node, &tape);
        assert!(gp.data.iter().any(|v| v.abs() > 0.0));
        assert!(gs.data.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn embedder_is_deterministic_and_unit_norm() {
        let embedder = RandomProjectionEmbedder::new(32, 7);
        let img = flat_image(16, 16, 0.33);
        let e1 = embedder.embed_image(&img);
        let e2 = embedder.embed_image(&img);
        assert_eq!(e1, e2);
        let norm: f64 = e1.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn perceptual_identity_symmetry_and_noise_monotonicity() {
        let perceptual = RandomConvPerceptual::new(11);
        let base = gradient_sketch(32, 32, 7);
        assert_eq!(perceptual.distance_sketches(&base, &base), 0.0);

        let mut hits = 0;
        for seed in 0..20u64 {
            let noisy = |level: f32, s: u64| {
                let data: Vec<f32> = base
                    .tensor()
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let n = ((i as f32 * 0.61 + s as f32 * 3.7).sin()) * level;
                        (v + n).clamp(0.0, 1.0)
                    })
                    .collect();
                Sketch::new(Tensor::new(vec![32, 32, 1], data).unwrap()).unwrap()
            };
            let d1 = perceptual.distance_sketches(&base, &noisy(0.05, seed));
            let d2 = perceptual.distance_sketches(&base, &noisy(0.1, seed));
            let d3 = perceptual.distance_sketches(&base, &noisy(0.2, seed));
            let sym = perceptual.distance_sketches(&noisy(0.1, seed), &base);
            assert!((d2 - sym).abs() < 1e-9, "symmetry violated");
            if d1 < d2 && d2 < d3 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "noise monotonicity held in only {hits}/20 seeds");
    }

    #[test]
    fn embedding_rejects_zero_vector() {
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
    }
}
