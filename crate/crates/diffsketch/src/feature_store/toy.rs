//! Deterministic toy diffusion backend. A small fixed-weight convolutional
//! denoiser produces an image plus the full UNet-style trajectory and VAE
//! pyramid in under a second, so whole-pipeline tests stay fast.

use super::{DiffusionBackend, FeatureMap, FeatureStoreError, FeatureTrajectory, Image, Sketch, VaePyramid};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct ToyBackendConfig {
    pub layers: usize,
    pub timesteps: usize,
    pub fusing_steps: usize,
    pub image_size: usize,
    pub condition_dim: usize,
    /// Seed for the backend's fixed internal weights.
    pub weight_seed: u64,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            timesteps: 10,
            fusing_steps: 3,
            image_size: 64,
            condition_dim: 8,
            weight_seed: 0x0DDF00D,
        }
    }
}

// Channel plan: UNet stages (coarse -> fine) and VAE steps.
const STAGE_CHANNELS: [usize; 3] = [16, 12, 8];
const VAE_CHANNELS: [usize; 4] = [8, 6, 4, 4];

fn vae_channels(step: usize) -> usize {
    VAE_CHANNELS[step.min(VAE_CHANNELS.len() - 1)]
}

/// Plain CHW float buffer used by the fixed-weight forward pass.
#[derive(Clone)]
struct Buf {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Buf {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
}

struct Conv {
    out_c: usize,
    in_c: usize,
    // [out][in][3][3]
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn init(rng: &mut ChaCha20Rng, out_c: usize, in_c: usize) -> Self {
        let std = (2.0 / (in_c as f32 * 9.0)).sqrt();
        let weight = (0..out_c * in_c * 9)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        let bias = (0..out_c)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * 0.05
            })
            .collect();
        Self {
            out_c,
            in_c,
            weight,
            bias,
        }
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    fn apply(&self, x: &Buf) -> Buf {
        assert_eq!(x.c, self.in_c);
        let (h, w) = (x.h, x.w);
        let mut out = Buf::zeros(self.out_c, h, w);
        for oc in 0..self.out_c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_c {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let si = i as isize + ki as isize - 1;
                                let sj = j as isize + kj as isize - 1;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                let xv = x.data[(ic * h + si as usize) * w + sj as usize];
                                let wv = self.weight[((oc * self.in_c + ic) * 3 + ki) * 3 + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data[(oc * h + i) * w + j] = acc;
                }
            }
        }
        out
    }
}

fn leaky(x: &mut Buf) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= 0.2;
        }
    }
}

fn upsample2(x: &Buf) -> Buf {
    let mut out = Buf::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for i in 0..x.h * 2 {
            for j in 0..x.w * 2 {
                out.data[(c * x.h * 2 + i) * x.w * 2 + j] =
                    x.data[(c * x.h + i / 2) * x.w + j / 2];
            }
        }
    }
    out
}

fn to_feature_map(x: &Buf) -> FeatureMap {
    FeatureMap::new(Tensor::new(vec![x.c, x.h, x.w], x.data.clone()).expect("finite toy features"))
        .expect("3-d toy features")
}

/// Fixed-weight toy backend. Constructing two backends with the same config
/// yields identical internals, and `generate` is pure, so outputs are
/// bit-reproducible per `(condition, seed)`.
pub struct ToyBackend {
    cfg: ToyBackendConfig,
    cond_proj: Vec<f32>, // [16 * s0 * s0, condition_dim]
    time_embed: Vec<Vec<f32>>,
    evolve: Conv,
    layer_convs: Vec<Conv>,
    vae_convs: Vec<Vec<Conv>>,
    image_head: Conv,
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new(ToyBackendConfig::default())
    }
}

impl ToyBackend {
    pub fn new(cfg: ToyBackendConfig) -> Self {
        assert!(cfg.layers >= 3, "toy backend needs at least 3 layers");
        assert!(cfg.timesteps >= 2, "toy backend needs at least 2 timesteps");
        assert!(
            cfg.image_size >= 16 && cfg.image_size.is_power_of_two(),
            "image size must be a power of two >= 16"
        );
        let latent = cfg.image_size >> cfg.fusing_steps;
        assert!(latent >= 8, "fusing steps leave latent below 8x8");

        let mut rng = ChaCha20Rng::seed_from_u64(cfg.weight_seed);
        let s0 = latent / 4;
        let state_len = STAGE_CHANNELS[0] * s0 * s0;
        let cond_proj = (0..state_len * cfg.condition_dim)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * 0.4
            })
            .collect();
        let time_embed = (0..cfg.timesteps)
            .map(|_| {
                (0..state_len)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        z * 0.6
                    })
                    .collect()
            })
            .collect();
        let evolve = Conv::init(&mut rng, STAGE_CHANNELS[0], STAGE_CHANNELS[0]);

        let stage_of = Self::stage_plan(cfg.layers);
        let mut layer_convs = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let in_c = if l == 0 {
                STAGE_CHANNELS[0]
            } else {
                STAGE_CHANNELS[stage_of[l - 1]]
            };
            layer_convs.push(Conv::init(&mut rng, STAGE_CHANNELS[stage_of[l]], in_c));
        }

        let mut vae_convs = Vec::new();
        for step in 0..=cfg.fusing_steps {
            let blocks = if step < cfg.fusing_steps { 2 } else { 1 };
            let prev_c = if step == 0 {
                STAGE_CHANNELS[2]
            } else {
                vae_channels(step - 1)
            };
            let mut convs = Vec::new();
            for b in 0..blocks {
                let in_c = if b == 0 { prev_c } else { vae_channels(step) };
                convs.push(Conv::init(&mut rng, vae_channels(step), in_c));
            }
            vae_convs.push(convs);
        }
        let image_head = Conv::init(&mut rng, 3, vae_channels(cfg.fusing_steps));

        Self {
            cfg,
            cond_proj,
            time_embed,
            evolve,
            layer_convs,
            vae_convs,
            image_head,
        }
    }

    pub fn config(&self) -> &ToyBackendConfig {
        &self.cfg
    }

    /// Stage index (0 = coarsest) per layer, thirds of the layer stack.
    fn stage_plan(layers: usize) -> Vec<usize> {
        (0..layers)
            .map(|l| match (3 * l) / layers {
                0 => 0,
                1 => 1,
                _ => 2,
            })
            .collect()
    }

    fn stage_resolution(&self, stage: usize) -> usize {
        let latent = self.cfg.image_size >> self.cfg.fusing_steps;
        latent >> (2 - stage)
    }

    fn call_rng(&self, condition: &[f64], seed: u64) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"diffsketch-toy-call");
        hasher.update(self.cfg.weight_seed.to_le_bytes());
        hasher.update(seed.to_le_bytes());
        for v in condition {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(key)
    }
}

impl DiffusionBackend for ToyBackend {
    fn condition_dim(&self) -> usize {
        self.cfg.condition_dim
    }

    fn timesteps(&self) -> usize {
        self.cfg.timesteps
    }

    fn layers(&self) -> usize {
        self.cfg.layers
    }

    fn fusing_steps(&self) -> usize {
        self.cfg.fusing_steps
    }

    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let stage_of = Self::stage_plan(self.cfg.layers);
        (0..self.cfg.layers)
            .map(|l| {
                let stage = stage_of[l];
                let res = self.stage_resolution(stage);
                (STAGE_CHANNELS[stage], res, res)
            })
            .collect()
    }

    fn vae_shapes(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let latent = self.cfg.image_size >> self.cfg.fusing_steps;
        (0..=self.cfg.fusing_steps)
            .map(|step| {
                let blocks = if step < self.cfg.fusing_steps { 2 } else { 1 };
                let res = latent << step;
                (0..blocks)
                    .map(|_| (vae_channels(step), res, res))
                    .collect()
            })
            .collect()
    }

    fn image_size(&self) -> (usize, usize) {
        (self.cfg.image_size, self.cfg.image_size)
    }

    fn generate(
        &self,
        condition: &[f64],
        seed: u64,
    ) -> Result<(Image, FeatureTrajectory, VaePyramid), FeatureStoreError> {
        if condition.len() != self.cfg.condition_dim {
            return Err(FeatureStoreError::Backend(format!(
                "condition has dim {}, backend expects {}",
                condition.len(),
                self.cfg.condition_dim
            )));
        }
        if condition.iter().any(|v| !v.is_finite()) {
            return Err(FeatureStoreError::Backend(
                "condition contains non-finite values".to_string(),
            ));
        }
        let mut rng = self.call_rng(condition, seed);
        let t_count = self.cfg.timesteps;
        let latent = self.cfg.image_size >> self.cfg.fusing_steps;
        let s0 = latent / 4;

        // Initial latent state: condition projection plus per-call noise.
        let mut state = Buf::zeros(STAGE_CHANNELS[0], s0, s0);
        for (j, v) in state.data.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (k, c) in condition.iter().enumerate() {
                acc += self.cond_proj[j * self.cfg.condition_dim + k] * (*c as f32);
            }
            let z: f32 = StandardNormal.sample(&mut rng);
            *v = (acc + 0.5 * z).tanh();
        }

        // Walk the denoising chain from t = T-1 (noisiest) down to t = 0.
        // Step size grows toward t = 0 so late features move further apart,
        // mirroring how real trajectories end on distinctive final features.
        let mut states: Vec<Buf> = vec![Buf::zeros(0, 0, 0); t_count];
        states[t_count - 1] = state.clone();
        for t in (0..t_count - 1).rev() {
            let gamma = 0.08 * (1.0 + 3.0 * (1.0 - t as f32 / t_count as f32)).powi(2);
            let mut delta = self.evolve.apply(&state);
            for (j, d) in delta.data.iter_mut().enumerate() {
                *d = (*d + self.time_embed[t][j]).tanh();
            }
            for (s, d) in state.data.iter_mut().zip(delta.data.iter()) {
                *s = (*s + gamma * d).clamp(-3.0, 3.0);
            }
            states[t] = state.clone();
        }

        // Decode per-timestep layer features.
        let stage_of = Self::stage_plan(self.cfg.layers);
        let mut cells = Vec::with_capacity(self.cfg.layers * t_count);
        let mut final_top: Option<Buf> = None;
        for (t, s) in states.iter().enumerate() {
            let mut x = s.clone();
            let mut stage = 0usize;
            for l in 0..self.cfg.layers {
                if stage_of[l] != stage {
                    stage = stage_of[l];
                    x = upsample2(&x);
                }
                x = self.layer_convs[l].apply(&x);
                leaky(&mut x);
                cells.push((l + 1, t, to_feature_map(&x)));
            }
            if t == 0 {
                final_top = Some(x.clone());
            }
        }
        let trajectory = FeatureTrajectory::from_cells(self.cfg.layers, t_count, cells)?;

        // VAE pyramid decoded from the final-step top feature.
        let mut steps = Vec::new();
        let mut x = final_top.expect("t=0 decoded");
        for step in 0..=self.cfg.fusing_steps {
            if step > 0 {
                x = upsample2(&x);
            }
            let mut blocks = Vec::new();
            for conv in &self.vae_convs[step] {
                x = conv.apply(&x);
                leaky(&mut x);
                blocks.push(to_feature_map(&x));
            }
            steps.push(blocks);
        }
        let pyramid = VaePyramid::new(steps)?;

        // Image head over the finest VAE block.
        let rgb = self.image_head.apply(&x);
        let (h, w) = (rgb.h, rgb.w);
        let mut pixels = vec![0.0f32; h * w * 3];
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let v = rgb.data[(c * h + i) * w + j];
                    pixels[(i * w + j) * 3 + c] = 1.0 / (1.0 + (-3.0 * v).exp());
                }
            }
        }
        let image = Image::new(Tensor::new(vec![h, w, 3], pixels).expect("finite toy image"))?;
        Ok((image, trajectory, pyramid))
    }
}

/// Synthetic ground-truth sketch for toy triplets: inverted Sobel edge
/// magnitude, dark lines on a white page.
pub fn toy_gt_sketch(image: &Image) -> Sketch {
    let (h, w) = (image.height(), image.width());
    let gray: Vec<f32> = (0..h * w)
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            (image.pixel(i, j, 0) + image.pixel(i, j, 1) + image.pixel(i, j, 2)) / 3.0
        })
        .collect();
    let at = |i: isize, j: isize| -> f32 {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        gray[i * w + j]
    };
    let mut data = vec![0.0f32; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i, j - 1)
                - at(i + 1, j - 1);
            let gy = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i - 1, j)
                - at(i - 1, j + 1);
            let mag = (gx * gx + gy * gy).sqrt();
            data[(i as usize) * w + j as usize] = (1.0 - 3.0 * mag).clamp(0.0, 1.0);
        }
    }
    Sketch::new(Tensor::new(vec![h, w, 1], data).expect("finite sketch")).expect("valid sketch")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic() {
        let backend = ToyBackend::default();
        let cond = vec![0.3; backend.condition_dim()];
        let a = backend.generate(&cond, 42).unwrap();
        let b = backend.generate(&cond, 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn different_seeds_differ() {
        let backend = ToyBackend::default();
        let cond = vec![0.3; backend.condition_dim()];
        let a = backend.generate(&cond, 1).unwrap();
        let b = backend.generate(&cond, 2).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn shapes_match_the_declared_tables() {
        let backend = ToyBackend::default();
        let cond = vec![0.0; backend.condition_dim()];
        let (image, trajectory, pyramid) = backend.generate(&cond, 5).unwrap();
        assert_eq!(image.height(), 64);
        assert_eq!(trajectory.layers(), 12);
        assert_eq!(trajectory.timesteps(), 10);
        assert_eq!(trajectory.layer_shapes(), backend.layer_shapes());
        let declared = backend.vae_shapes();
        assert_eq!(pyramid.step_groups(), declared.len());
        for (step, blocks) in declared.iter().enumerate() {
            assert_eq!(pyramid.blocks(step).len(), blocks.len());
            for (n, &(c, h, w)) in blocks.iter().enumerate() {
                let b = &pyramid.blocks(step)[n];
                assert_eq!((b.channels(), b.height(), b.width()), (c, h, w));
            }
        }
    }

    #[test]
    fn condition_influences_the_image() {
        let backend = ToyBackend::default();
        let a = backend.generate(&vec![0.0; 8], 3).unwrap();
        let b = backend.generate(&vec![1.0; 8], 3).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn gt_sketch_is_single_channel_and_nonconstant() {
        let backend = ToyBackend::default();
        let (image, _, _) = backend.generate(&vec![0.2; 8], 11).unwrap();
        let sketch = toy_gt_sketch(&image);
        assert_eq!(sketch.height(), image.height());
        let data = sketch.tensor().data();
        let mean = data.iter().sum::<f32>() / data.len() as f32;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / data.len() as f32;
        assert!(var > 1e-6, "sketch should have visible structure");
    }
}
