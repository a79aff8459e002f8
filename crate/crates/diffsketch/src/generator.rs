//! The sketch generator: a representative-feature gate, two-level feature
//! aggregation, and a feature-fusing decoder over VAE features.
//!
//! Level one mixes gated lower-layer features at a mid resolution; level two
//! mixes the upper layers at the top resolution and adds a skip path that
//! re-injects the first-level aggregate. The fusing decoder then walks the
//! VAE pyramid, doubling resolution per step, and a final head emits the
//! sketch from the finest VAE features, the fused state, and the source
//! image.

use crate::autodiff::{Arr, NodeId, Tape};
use crate::checkpoint::{read_named_tensors, write_named_tensors, CheckpointError};
use crate::convert::{chw_to_sketch, feature_map_to_arr, image_to_chw};
use crate::feature_store::{DiffusionBackend, FeatureMap, FeatureTrajectory, Image, Sketch, VaePyramid};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("selected timestep gate is empty")]
    EmptyGate,
    #[error("selected timestep {0} outside trajectory range 0..{1}")]
    GateRange(usize, usize),
    #[error("config invalid: {0}")]
    Config(String),
    #[error("layer {layer} resolution {got} exceeds target {target}; upsampling only")]
    LayerResolution {
        layer: usize,
        got: usize,
        target: usize,
    },
    #[error("trajectory has {got_layers} layers x {got_steps} steps, generator expects {want_layers} x gate within {want_steps}")]
    TrajectoryShape {
        got_layers: usize,
        got_steps: usize,
        want_layers: usize,
        want_steps: usize,
    },
    #[error("vae step {step} block {block} is {got:?}, expected {expected:?}")]
    VaeShape {
        step: usize,
        block: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("fusing step {step} block {block} resolution {got:?} does not match state {expected:?}")]
    StepResolution {
        step: usize,
        block: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("source image is {got:?}, generator emits {expected:?}")]
    SourceResolution {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint missing file {0}")]
    MissingFile(String),
}

/// Static shape of the aggregation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    /// Total UNet layer count L.
    pub layers: usize,
    /// Last layer of the first aggregation level.
    pub l_md: usize,
    /// Gate set: representative timesteps feeding the aggregator.
    pub selected_timesteps: Vec<usize>,
    pub mid_resolution: usize,
    pub top_resolution: usize,
    pub bottleneck_channels: usize,
    /// 1x1 bottlenecks carry biases unless disabled (linearity tests).
    #[serde(default = "default_true")]
    pub bottleneck_bias: bool,
    /// Gates the upper-layer (layer, timestep) mixing sum as a whole.
    #[serde(default = "default_true")]
    pub upper_mix_active: bool,
}

fn default_true() -> bool {
    true
}

impl AggregatorConfig {
    /// Sensible geometry for a backend: top resolution is the backend's
    /// latent grid, mid is half of it.
    pub fn for_backend(
        backend: &dyn DiffusionBackend,
        selected_timesteps: Vec<usize>,
        bottleneck_channels: usize,
    ) -> Self {
        let (h, _) = backend.image_size();
        let latent = h >> backend.fusing_steps();
        Self {
            layers: backend.layers(),
            l_md: (backend.layers() * 3) / 4,
            selected_timesteps,
            mid_resolution: (latent / 2).max(1),
            top_resolution: latent,
            bottleneck_channels,
            bottleneck_bias: true,
            upper_mix_active: true,
        }
    }

    fn validate(&self) -> Result<(), GeneratorError> {
        if self.l_md < 1 || self.l_md >= self.layers {
            return Err(GeneratorError::Config(format!(
                "l_md must satisfy 1 <= l_md < L, got {} of {}",
                self.l_md, self.layers
            )));
        }
        if self.selected_timesteps.is_empty() {
            return Err(GeneratorError::EmptyGate);
        }
        if !self.mid_resolution.is_power_of_two() || !self.top_resolution.is_power_of_two() {
            return Err(GeneratorError::Config(
                "resolutions must be powers of two".into(),
            ));
        }
        if self.mid_resolution > self.top_resolution {
            return Err(GeneratorError::Config(
                "mid resolution cannot exceed top resolution".into(),
            ));
        }
        Ok(())
    }
}

/// Per-block channel counts and resolutions of the VAE pyramid the decoder
/// consumes, plus the reduction width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfdTopology {
    /// Step groups 0..=M; each entry lists block channel counts.
    pub step_blocks: Vec<Vec<usize>>,
    /// Channels after the per-block reduction layer.
    pub reduced_channels: usize,
    /// Output image height/width (equal).
    pub image_size: usize,
}

impl FfdTopology {
    pub fn for_backend(backend: &dyn DiffusionBackend, reduced_channels: usize) -> Self {
        let step_blocks = backend
            .vae_shapes()
            .iter()
            .map(|blocks| blocks.iter().map(|&(c, _, _)| c).collect())
            .collect();
        Self {
            step_blocks,
            reduced_channels,
            image_size: backend.image_size().0,
        }
    }

    /// Fusing step count M (final group feeds the output head).
    pub fn fusing_steps(&self) -> usize {
        self.step_blocks.len() - 1
    }
}

/// Sidecar configuration stored next to the weight container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub aggregator: AggregatorConfig,
    pub ffd: FfdTopology,
    /// Per-layer (channels, height, width) of the trajectory features.
    pub layer_shapes: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
struct ConvSlot {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone)]
struct StepSlots {
    reducers: Vec<(ConvSlot, ConvSlot)>,
    fuse: ConvSlot,
}

/// Indices into the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    lower_bottlenecks: Vec<ConvSlot>,
    upper_bottlenecks: Vec<ConvSlot>,
    skip_bottlenecks: Vec<ConvSlot>,
    first_mix: usize,
    final_mix: usize,
    skip_logits: usize,
    steps: Vec<StepSlots>,
    out_reducers: Vec<(ConvSlot, ConvSlot)>,
    out: ConvSlot,
}

/// The full sketch generator with its trainable parameters.
pub struct Generator {
    pub config: GeneratorConfig,
    names: Vec<String>,
    params: Vec<Arr>,
    layout: Layout,
}

struct ParamBuilder {
    names: Vec<String>,
    params: Vec<Arr>,
    rng: ChaCha20Rng,
}

impl ParamBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.names.push(name);
        self.params.push(Arr::new(shape, data));
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.params.push(Arr::zeros(shape));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool) -> ConvSlot {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let weight = self.tensor(format!("{name}.weight"), vec![out_c, in_c, k, k], std);
        let bias = bias.then(|| self.zeros(format!("{name}.bias"), vec![out_c]));
        ConvSlot { weight, bias }
    }
}

impl Generator {
    /// Fresh generator with seeded parameter initialization. `layer_shapes`
    /// comes from the backend's shape table.
    pub fn new(
        aggregator: AggregatorConfig,
        ffd: FfdTopology,
        layer_shapes: Vec<(usize, usize, usize)>,
        seed: u64,
    ) -> Result<Self, GeneratorError> {
        aggregator.validate()?;
        if layer_shapes.len() != aggregator.layers {
            return Err(GeneratorError::Config(format!(
                "{} layer shapes for {} layers",
                layer_shapes.len(),
                aggregator.layers
            )));
        }
        let m = ffd.fusing_steps();
        if aggregator.top_resolution << m != ffd.image_size {
            return Err(GeneratorError::Config(format!(
                "top resolution {} with {} fusing steps cannot reach image size {}",
                aggregator.top_resolution, m, ffd.image_size
            )));
        }

        let mut b = ParamBuilder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        };
        let bn = aggregator.bottleneck_channels;
        let n_sel = aggregator.selected_timesteps.len();
        let with_bias = aggregator.bottleneck_bias;

        let lower_bottlenecks = (1..=aggregator.l_md)
            .map(|l| b.conv(&format!("agg.lower{l}"), bn, layer_shapes[l - 1].0, 1, with_bias))
            .collect();
        let upper_bottlenecks = (aggregator.l_md + 1..=aggregator.layers)
            .map(|l| b.conv(&format!("agg.upper{l}"), bn, layer_shapes[l - 1].0, 1, with_bias))
            .collect();
        let skip_bottlenecks = (aggregator.l_md + 1..=aggregator.layers)
            .map(|l| b.conv(&format!("agg.skip{l}"), bn, bn, 1, with_bias))
            .collect();
        let first_mix = b.zeros("agg.first_mix".into(), vec![aggregator.l_md * n_sel]);
        let upper_count = aggregator.layers - aggregator.l_md;
        let final_mix = b.zeros("agg.final_mix".into(), vec![upper_count * n_sel]);
        let skip_logits = b.zeros("agg.skip_logits".into(), vec![upper_count]);

        let red = ffd.reduced_channels;
        let mut steps = Vec::with_capacity(m);
        for (i, blocks) in ffd.step_blocks.iter().take(m).enumerate() {
            let reducers = blocks
                .iter()
                .enumerate()
                .map(|(n, &c)| {
                    (
                        b.conv(&format!("ffd.step{i}.block{n}.reduce"), red, c, 1, true),
                        b.conv(&format!("ffd.step{i}.block{n}.conv"), red, red, 3, true),
                    )
                })
                .collect::<Vec<_>>();
            let fuse_in = blocks.len() * red + bn;
            let fuse = b.conv(&format!("ffd.step{i}.fuse"), bn, fuse_in, 3, true);
            steps.push(StepSlots { reducers, fuse });
        }
        let out_blocks = &ffd.step_blocks[m];
        let out_reducers = out_blocks
            .iter()
            .enumerate()
            .map(|(n, &c)| {
                (
                    b.conv(&format!("ffd.out.block{n}.reduce"), red, c, 1, true),
                    b.conv(&format!("ffd.out.block{n}.conv"), red, red, 3, true),
                )
            })
            .collect::<Vec<_>>();
        let out_in = out_blocks.len() * red + bn + 3;
        let out = b.conv("ffd.out.head", 1, out_in, 3, true);

        Ok(Self {
            config: GeneratorConfig {
                aggregator,
                ffd,
                layer_shapes,
            },
            layout: Layout {
                lower_bottlenecks,
                upper_bottlenecks,
                skip_bottlenecks,
                first_mix,
                final_mix,
                skip_logits,
                steps,
                out_reducers,
                out,
            },
            names: b.names,
            params: b.params,
        })
    }

    /// Convenience constructor matching a backend's shape tables.
    pub fn for_backend(
        backend: &dyn DiffusionBackend,
        selected_timesteps: Vec<usize>,
        bottleneck_channels: usize,
        reduced_channels: usize,
        seed: u64,
    ) -> Result<Self, GeneratorError> {
        Generator::new(
            AggregatorConfig::for_backend(backend, selected_timesteps, bottleneck_channels),
            FfdTopology::for_backend(backend, reduced_channels),
            backend.layer_shapes(),
            seed,
        )
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter())
    }

    pub fn params(&self) -> &[Arr] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arr] {
        &mut self.params
    }

    /// Pushes every parameter onto the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn conv_node(
        &self,
        tape: &mut Tape,
        slot: &ConvSlot,
        bound: &[NodeId],
        input: NodeId,
        pad: usize,
    ) -> NodeId {
        tape.conv2d(input, bound[slot.weight], slot.bias.map(|b| bound[b]), pad)
    }

    fn check_trajectory(&self, trajectory: &FeatureTrajectory) -> Result<(), GeneratorError> {
        let agg = &self.config.aggregator;
        if trajectory.layers() != agg.layers {
            return Err(GeneratorError::TrajectoryShape {
                got_layers: trajectory.layers(),
                got_steps: trajectory.timesteps(),
                want_layers: agg.layers,
                want_steps: trajectory.timesteps(),
            });
        }
        for &t in &agg.selected_timesteps {
            if t >= trajectory.timesteps() {
                return Err(GeneratorError::GateRange(t, trajectory.timesteps()));
            }
        }
        Ok(())
    }

    /// First-level aggregation on the tape: gated lower-layer features,
    /// upsampled to the mid resolution, bottlenecked, and convexly mixed.
    fn aggregate_first_node(
        &self,
        tape: &mut Tape,
        trajectory: &FeatureTrajectory,
        bound: &[NodeId],
    ) -> Result<NodeId, GeneratorError> {
        let agg = &self.config.aggregator;
        self.check_trajectory(trajectory)?;
        let mid = agg.mid_resolution;
        for l in 1..=agg.l_md {
            let res = self.config.layer_shapes[l - 1].1;
            if res > mid {
                return Err(GeneratorError::LayerResolution {
                    layer: l,
                    got: res,
                    target: mid,
                });
            }
        }
        let weights = tape.softmax(bound[self.layout.first_mix]);
        let n_sel = agg.selected_timesteps.len();
        let mut acc: Option<NodeId> = None;
        for (li, l) in (1..=agg.l_md).enumerate() {
            for (ti, &t) in agg.selected_timesteps.iter().enumerate() {
                let feature = tape.constant(feature_map_to_arr(trajectory.get(l, t)));
                let up = tape.upsample_bilinear(feature, mid, mid);
                let bottled = self.conv_node(tape, &self.layout.lower_bottlenecks[li], bound, up, 0);
                let w = tape.select(weights, li * n_sel + ti);
                let term = tape.scale_by(bottled, w);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
        }
        Ok(acc.expect("gate validated non-empty"))
    }

    /// Second-level aggregation: upper-layer mixing plus the skip path that
    /// re-injects the first-level aggregate, all at the top resolution.
    fn aggregate_final_node(
        &self,
        tape: &mut Tape,
        trajectory: &FeatureTrajectory,
        f_fst: NodeId,
        bound: &[NodeId],
    ) -> Result<NodeId, GeneratorError> {
        let agg = &self.config.aggregator;
        self.check_trajectory(trajectory)?;
        let top = agg.top_resolution;
        for l in agg.l_md + 1..=agg.layers {
            let res = self.config.layer_shapes[l - 1].1;
            if res > top {
                return Err(GeneratorError::LayerResolution {
                    layer: l,
                    got: res,
                    target: top,
                });
            }
        }
        let n_sel = agg.selected_timesteps.len();
        let mut acc: Option<NodeId> = None;
        if agg.upper_mix_active {
            let weights = tape.softmax(bound[self.layout.final_mix]);
            for (li, l) in (agg.l_md + 1..=agg.layers).enumerate() {
                for (ti, &t) in agg.selected_timesteps.iter().enumerate() {
                    let feature = tape.constant(feature_map_to_arr(trajectory.get(l, t)));
                    let up = tape.upsample_bilinear(feature, top, top);
                    let bottled =
                        self.conv_node(tape, &self.layout.upper_bottlenecks[li], bound, up, 0);
                    let w = tape.select(weights, li * n_sel + ti);
                    let term = tape.scale_by(bottled, w);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term),
                        None => term,
                    });
                }
            }
        }
        // Skip path: per upper layer, bottleneck the upsampled first-level
        // aggregate and mix with its own softmax weights.
        let skip_weights = tape.softmax(bound[self.layout.skip_logits]);
        let f_up = tape.upsample_bilinear(f_fst, top, top);
        for li in 0..agg.layers - agg.l_md {
            let bottled = self.conv_node(tape, &self.layout.skip_bottlenecks[li], bound, f_up, 0);
            let w = tape.select(skip_weights, li);
            let term = tape.scale_by(bottled, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        Ok(acc.expect("skip path always contributes"))
    }

    fn reduce_blocks(
        &self,
        tape: &mut Tape,
        reducers: &[(ConvSlot, ConvSlot)],
        blocks: &[FeatureMap],
        expected_res: (usize, usize),
        step: usize,
        bound: &[NodeId],
    ) -> Result<Vec<NodeId>, GeneratorError> {
        let mut parts = Vec::with_capacity(blocks.len());
        for (n, block) in blocks.iter().enumerate() {
            if block.resolution() != expected_res {
                return Err(GeneratorError::StepResolution {
                    step,
                    block: n,
                    expected: expected_res,
                    got: block.resolution(),
                });
            }
            let feature = tape.constant(feature_map_to_arr(block));
            let reduced = self.conv_node(tape, &reducers[n].0, bound, feature, 0);
            let conv = self.conv_node(tape, &reducers[n].1, bound, reduced, 1);
            parts.push(tape.leaky_relu(conv, LEAKY_SLOPE));
        }
        Ok(parts)
    }

    /// One fusing step on the tape: reduce and convolve each VAE block,
    /// concatenate with the running state, fuse, and upsample 2x.
    fn ffd_step_node(
        &self,
        tape: &mut Tape,
        step: usize,
        x: NodeId,
        blocks: &[FeatureMap],
        bound: &[NodeId],
    ) -> Result<NodeId, GeneratorError> {
        let (_, h, w) = tape.value(x).chw();
        let slots = &self.layout.steps[step];
        if blocks.len() != slots.reducers.len() {
            return Err(GeneratorError::Config(format!(
                "fusing step {step} got {} blocks, topology has {}",
                blocks.len(),
                slots.reducers.len()
            )));
        }
        let mut parts =
            self.reduce_blocks(tape, &slots.reducers, blocks, (h, w), step, bound)?;
        parts.push(x);
        let cat = tape.concat_channels(&parts);
        let fused = self.conv_node(tape, &slots.fuse, bound, cat, 1);
        let act = tape.leaky_relu(fused, LEAKY_SLOPE);
        Ok(tape.upsample_nearest2(act))
    }

    /// Full forward pass; `source` must be a 3-channel CHW constant node at
    /// the output resolution. Returns the 1-channel sketch node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        trajectory: &FeatureTrajectory,
        pyramid: &VaePyramid,
        source: NodeId,
        bound: &[NodeId],
    ) -> Result<NodeId, GeneratorError> {
        let m = self.config.ffd.fusing_steps();
        if pyramid.step_groups() != m + 1 {
            return Err(GeneratorError::Config(format!(
                "pyramid has {} step groups, topology expects {}",
                pyramid.step_groups(),
                m + 1
            )));
        }
        let (c, h, w) = tape.value(source).chw();
        let size = self.config.ffd.image_size;
        if c != 3 || h != size || w != size {
            return Err(GeneratorError::SourceResolution {
                expected: (size, size),
                got: (h, w),
            });
        }

        let f_fst = self.aggregate_first_node(tape, trajectory, bound)?;
        let mut x = self.aggregate_final_node(tape, trajectory, f_fst, bound)?;
        for step in 0..m {
            x = self.ffd_step_node(tape, step, x, pyramid.blocks(step), bound)?;
        }
        let mut parts = self.reduce_blocks(
            tape,
            &self.layout.out_reducers,
            pyramid.blocks(m),
            (size, size),
            m,
            bound,
        )?;
        parts.push(x);
        parts.push(source);
        let cat = tape.concat_channels(&parts);
        let head = self.conv_node(tape, &self.layout.out, bound, cat, 1);
        Ok(tape.sigmoid(head))
    }

    /// First-level aggregate as a plain tensor (bottleneck x mid x mid).
    pub fn aggregate_first(&self, trajectory: &FeatureTrajectory) -> Result<Arr, GeneratorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let node = self.aggregate_first_node(&mut tape, trajectory, &bound)?;
        Ok(tape.value(node).clone())
    }

    /// Final aggregate as a plain tensor (bottleneck x top x top).
    pub fn aggregate_final(
        &self,
        trajectory: &FeatureTrajectory,
        f_fst: &Arr,
    ) -> Result<Arr, GeneratorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant(f_fst.clone());
        let node = self.aggregate_final_node(&mut tape, trajectory, f, &bound)?;
        Ok(tape.value(node).clone())
    }

    /// One fusing step as a plain tensor; output resolution is double the
    /// input's.
    pub fn ffd_step(
        &self,
        step: usize,
        x: &Arr,
        blocks: &[FeatureMap],
    ) -> Result<Arr, GeneratorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xn = tape.constant(x.clone());
        let node = self.ffd_step_node(&mut tape, step, xn, blocks, &bound)?;
        Ok(tape.value(node).clone())
    }

    /// Runs the whole generator and returns the sketch.
    pub fn generate_sketch(
        &self,
        trajectory: &FeatureTrajectory,
        pyramid: &VaePyramid,
        source: &Image,
    ) -> Result<Sketch, GeneratorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let src = tape.constant(image_to_chw(source));
        let node = self.forward(&mut tape, trajectory, pyramid, src, &bound)?;
        Ok(chw_to_sketch(tape.value(node)))
    }

    /// Writes `generator.json` + `generator.bin` into `dir`; returns the
    /// weight container digest.
    pub fn save(&self, dir: &Path) -> Result<String, GeneratorError> {
        fs::create_dir_all(dir).map_err(|e| {
            GeneratorError::Checkpoint(CheckpointError::Io {
                path: dir.display().to_string(),
                source: e,
            })
        })?;
        let config_path = dir.join("generator.json");
        let json = serde_json::to_vec_pretty(&self.config).map_err(CheckpointError::Json)?;
        fs::write(&config_path, json).map_err(|e| {
            GeneratorError::Checkpoint(CheckpointError::Io {
                path: config_path.display().to_string(),
                source: e,
            })
        })?;
        let named: Vec<(String, &Arr)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter())
            .collect();
        Ok(write_named_tensors(&dir.join("generator.bin"), &named)?)
    }

    /// Loads a generator saved by [`Generator::save`].
    pub fn load(dir: &Path) -> Result<Self, GeneratorError> {
        let config_path = dir.join("generator.json");
        let bytes = fs::read(&config_path)
            .map_err(|_| GeneratorError::MissingFile(config_path.display().to_string()))?;
        let config: GeneratorConfig =
            serde_json::from_slice(&bytes).map_err(CheckpointError::Json)?;
        let mut generator = Generator::new(
            config.aggregator,
            config.ffd,
            config.layer_shapes,
            0,
        )?;
        let tensors = read_named_tensors(&dir.join("generator.bin"))?;
        if tensors.len() != generator.params.len() {
            return Err(GeneratorError::Config(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                generator.params.len()
            )));
        }
        for (i, (name, arr)) in tensors.into_iter().enumerate() {
            if name != generator.names[i] {
                return Err(GeneratorError::Checkpoint(CheckpointError::NameMismatch {
                    expected: generator.names[i].clone(),
                    got: name,
                }));
            }
            if arr.shape != generator.params[i].shape {
                return Err(GeneratorError::Checkpoint(CheckpointError::ShapeMismatch {
                    name,
                    expected: generator.params[i].shape.clone(),
                    got: arr.shape,
                }));
            }
            generator.params[i] = arr;
        }
        Ok(generator)
    }

    /// Digest of the current weights without writing to disk.
    pub fn weights_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, arr) in self.named_params() {
            hasher.update(name.as_bytes());
            for v in &arr.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
