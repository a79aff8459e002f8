//! Tensor containers for one diffusion generation (UNet trajectory, VAE
//! pyramid, image, sketch), the on-disk archive format, and the pluggable
//! diffusion backend that produces them.
//!
//! Timestep convention: `t = 0` is the FINAL denoising step. Trajectories are
//! stored in that convention regardless of how a backend iterates internally.

mod archive;
mod toy;

pub use archive::{load_archive, save_archive, ArchiveError, Manifest, MANIFEST_VERSION};
pub use toy::{toy_gt_sketch, ToyBackend, ToyBackendConfig};

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureStoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image must be HxWx3 with H,W >= 8, got shape {0:?}")]
    BadImageShape(Vec<usize>),
    #[error("image values must lie in [0,1], found {0}")]
    ImageRange(f32),
    #[error("sketch must be HxWx1, got shape {0:?}")]
    BadSketchShape(Vec<usize>),
    #[error("sketch values must lie in [0,1], found {0}")]
    SketchRange(f32),
    #[error("feature map must be CxHxW, got shape {0:?}")]
    BadFeatureShape(Vec<usize>),
    #[error("trajectory grid incomplete: missing (layer {layer}, timestep {timestep})")]
    IncompleteGrid { layer: usize, timestep: usize },
    #[error("layer {layer} shape {got:?} differs from timestep 0 shape {expected:?}")]
    InconsistentLayerShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("trajectory cell (layer {layer}, timestep {timestep}) out of range")]
    GridIndex { layer: usize, timestep: usize },
    #[error("pyramid step {step} incomplete: missing block {block}")]
    IncompletePyramid { step: usize, block: usize },
    #[error("pyramid step {step} mixes resolutions: block {block} is {got:?}, expected {expected:?}")]
    MixedStepResolution {
        step: usize,
        block: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("pyramid resolutions must strictly increase with step; step {step} does not")]
    NonIncreasingResolution { step: usize },
    #[error("sketch is {sketch:?} but paired image is {image:?}")]
    PairResolution {
        image: (usize, usize),
        sketch: (usize, usize),
    },
    #[error("backend generation failed: {0}")]
    Backend(String),
}

/// H x W x 3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self, FeatureStoreError> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] < 8 || shape[1] < 8 {
            return Err(FeatureStoreError::BadImageShape(shape.to_vec()));
        }
        if let Some(&v) = tensor.data().iter().find(|v| **v < 0.0 || **v > 1.0) {
            return Err(FeatureStoreError::ImageRange(v));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.tensor.data()[(row * self.width() + col) * 3 + channel]
    }
}

/// H x W x 1 sketch with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    tensor: Tensor,
}

impl Sketch {
    pub fn new(tensor: Tensor) -> Result<Self, FeatureStoreError> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[2] != 1 || shape[0] < 1 || shape[1] < 1 {
            return Err(FeatureStoreError::BadSketchShape(shape.to_vec()));
        }
        if let Some(&v) = tensor.data().iter().find(|v| **v < 0.0 || **v > 1.0) {
            return Err(FeatureStoreError::SketchRange(v));
        }
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.tensor.data()[row * self.width() + col]
    }
}

/// C x h x w feature tensor from one (layer, timestep) or (step, block) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self, FeatureStoreError> {
        if tensor.shape().len() != 3 {
            return Err(FeatureStoreError::BadFeatureShape(tensor.shape().to_vec()));
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }
}

/// All UNet decoder features of one generation: a complete (layer, timestep)
/// grid with layers 1..=L and timesteps 0..T-1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrajectory {
    layers: usize,
    timesteps: usize,
    // Row-major [layer-1][timestep].
    maps: Vec<FeatureMap>,
}

impl FeatureTrajectory {
    /// Assembles a trajectory from `(layer, timestep, map)` cells, enforcing
    /// grid completeness and per-layer shape consistency.
    pub fn from_cells(
        layers: usize,
        timesteps: usize,
        cells: Vec<(usize, usize, FeatureMap)>,
    ) -> Result<Self, FeatureStoreError> {
        let mut slots: Vec<Option<FeatureMap>> = Vec::new();
        slots.resize_with(layers * timesteps, || None);
        for (layer, timestep, map) in cells {
            if layer < 1 || layer > layers || timestep >= timesteps {
                return Err(FeatureStoreError::GridIndex { layer, timestep });
            }
            slots[(layer - 1) * timesteps + timestep] = Some(map);
        }
        let mut maps = Vec::with_capacity(layers * timesteps);
        for layer in 1..=layers {
            for timestep in 0..timesteps {
                match slots[(layer - 1) * timesteps + timestep].take() {
                    Some(map) => maps.push(map),
                    None => return Err(FeatureStoreError::IncompleteGrid { layer, timestep }),
                }
            }
        }
        for layer in 1..=layers {
            let expected = maps[(layer - 1) * timesteps].tensor().shape().to_vec();
            for timestep in 1..timesteps {
                let got = maps[(layer - 1) * timesteps + timestep].tensor().shape();
                if got != expected.as_slice() {
                    return Err(FeatureStoreError::InconsistentLayerShape {
                        layer,
                        expected,
                        got: got.to_vec(),
                    });
                }
            }
        }
        Ok(Self {
            layers,
            timesteps,
            maps,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// Feature map at `layer` in 1..=L and `timestep` in 0..T.
    pub fn get(&self, layer: usize, timestep: usize) -> &FeatureMap {
        assert!(layer >= 1 && layer <= self.layers, "layer out of range");
        assert!(timestep < self.timesteps, "timestep out of range");
        &self.maps[(layer - 1) * self.timesteps + timestep]
    }

    pub fn get_mut(&mut self, layer: usize, timestep: usize) -> &mut FeatureMap {
        assert!(layer >= 1 && layer <= self.layers, "layer out of range");
        assert!(timestep < self.timesteps, "timestep out of range");
        &mut self.maps[(layer - 1) * self.timesteps + timestep]
    }

    /// `(channels, height, width)` per layer, indexed by `layer - 1`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        (1..=self.layers)
            .map(|l| {
                let m = self.get(l, 0);
                (m.channels(), m.height(), m.width())
            })
            .collect()
    }
}

/// VAE-decoder residual-block features of one generation. Step groups are
/// indexed 0..=M: steps 0..M feed the fusing decoder, step M feeds the output
/// head. Within a step all blocks share one resolution; resolutions strictly
/// increase with the step index.
#[derive(Debug, Clone, PartialEq)]
pub struct VaePyramid {
    // steps[i][n] = block n of step i.
    steps: Vec<Vec<FeatureMap>>,
}

impl VaePyramid {
    pub fn new(steps: Vec<Vec<FeatureMap>>) -> Result<Self, FeatureStoreError> {
        let mut prev_res: Option<(usize, usize)> = None;
        for (i, blocks) in steps.iter().enumerate() {
            let res = match blocks.first() {
                Some(b) => b.resolution(),
                None => continue,
            };
            for (n, block) in blocks.iter().enumerate() {
                if block.resolution() != res {
                    return Err(FeatureStoreError::MixedStepResolution {
                        step: i,
                        block: n,
                        expected: res,
                        got: block.resolution(),
                    });
                }
            }
            if let Some(prev) = prev_res {
                if res.0 <= prev.0 || res.1 <= prev.1 {
                    return Err(FeatureStoreError::NonIncreasingResolution { step: i });
                }
            }
            prev_res = Some(res);
        }
        Ok(Self { steps })
    }

    /// Number of fusing steps M (step groups minus the output-head group).
    pub fn fusing_steps(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn step_groups(&self) -> usize {
        self.steps.len()
    }

    pub fn blocks(&self, step: usize) -> &[FeatureMap] {
        &self.steps[step]
    }

    pub fn block_counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.len()).collect()
    }

    /// Drops every block while keeping the step structure; used by the
    /// FFD-without-VAE ablation variant.
    pub fn stripped(&self) -> Self {
        Self {
            steps: self.steps.iter().map(|_| Vec::new()).collect(),
        }
    }
}

/// The single ground-truth training datum: diffusion features, the generated
/// source image, and its paired sketch.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDatum {
    pub trajectory: FeatureTrajectory,
    pub pyramid: VaePyramid,
    pub source: Image,
    pub sketch: Sketch,
}

impl TripletDatum {
    pub fn new(
        trajectory: FeatureTrajectory,
        pyramid: VaePyramid,
        source: Image,
        sketch: Sketch,
    ) -> Result<Self, FeatureStoreError> {
        if source.height() != sketch.height() || source.width() != sketch.width() {
            return Err(FeatureStoreError::PairResolution {
                image: (source.height(), source.width()),
                sketch: (sketch.height(), sketch.width()),
            });
        }
        Ok(Self {
            trajectory,
            pyramid,
            source,
            sketch,
        })
    }
}

/// A diffusion backend that can run one conditioned generation and hand back
/// the image together with every intermediate feature.
///
/// Implementations must be deterministic: identical `(condition, seed)` yield
/// bit-identical outputs, and `generate` must be callable concurrently from
/// multiple workers (no shared mutable state).
pub trait DiffusionBackend: Sync {
    /// Dimensionality of the condition vector.
    fn condition_dim(&self) -> usize;
    /// Number of denoising timesteps T.
    fn timesteps(&self) -> usize;
    /// Number of UNet layers L.
    fn layers(&self) -> usize;
    /// Number of VAE fusing steps M.
    fn fusing_steps(&self) -> usize;
    /// `(channels, height, width)` per UNet layer, indexed by `layer - 1`.
    fn layer_shapes(&self) -> Vec<(usize, usize, usize)>;
    /// Per-step block shapes for the VAE pyramid, step groups 0..=M.
    fn vae_shapes(&self) -> Vec<Vec<(usize, usize, usize)>>;
    /// Output image resolution (height, width).
    fn image_size(&self) -> (usize, usize);

    fn generate(
        &self,
        condition: &[f64],
        seed: u64,
    ) -> Result<(Image, FeatureTrajectory, VaePyramid), FeatureStoreError>;
}
