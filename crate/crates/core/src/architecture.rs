//! Network descriptions, seeded initialisation and on-disk format.
//!
//! A network is stored as two files: a TOML description of the architecture
//! and a blob of parameters as little-endian `f64` in declaration order
//! (opening weights, opening bias, then each block, then the readout).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, TransformKind, TransformParams};
use crate::resnet::ResidualNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    pub activation: Activation,
}

/// Scale of the uniform initialisation: weights in `±weight_scale/√fan_in`,
/// biases in `±bias_scale`. `block_diagonal` is added to the self-coupling
/// weights of every residual block (the diagonal of a dense block, the
/// centre tap between equal channels of a convolution); a negative value
/// makes the block dynamics dissipative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub weight_scale: f64,
    pub bias_scale: f64,
    #[serde(default)]
    pub block_diagonal: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            weight_scale: 1.0,
            bias_scale: 0.1,
            block_diagonal: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Number of residual blocks `N`.
    pub depth: usize,
    pub step_size: f64,
    pub opening: TransformSpec,
    pub block: TransformSpec,
    pub readout: TransformSpec,
    #[serde(default)]
    pub init: InitSpec,
}

impl NetworkSpec {
    /// Dense network: `input -> q` opening, `depth` `q×q` blocks, `q -> classes` readout.
    pub fn dense(
        input: usize,
        width: usize,
        classes: usize,
        depth: usize,
        step_size: f64,
        activation: Activation,
    ) -> Self {
        Self {
            depth,
            step_size,
            opening: TransformSpec {
                kind: TransformKind::Dense {
                    inputs: input,
                    outputs: width,
                },
                activation,
            },
            block: TransformSpec {
                kind: TransformKind::Dense {
                    inputs: width,
                    outputs: width,
                },
                activation,
            },
            readout: TransformSpec {
                kind: TransformKind::Dense {
                    inputs: width,
                    outputs: classes,
                },
                activation: Activation::Identity,
            },
            init: InitSpec::default(),
        }
    }

    /// [`NetworkSpec::dense`] with `h = horizon / depth`: deeper networks
    /// resolve the same time interval more finely.
    pub fn dense_over_horizon(
        input: usize,
        width: usize,
        classes: usize,
        depth: usize,
        horizon: f64,
        activation: Activation,
    ) -> Self {
        Self::dense(input, width, classes, depth, horizon / depth as f64, activation)
    }

    pub fn with_init(mut self, init: InitSpec) -> Self {
        self.init = init;
        self
    }

    pub fn num_params(&self) -> usize {
        let count = |k: &TransformKind| k.weight_len() + k.bias_len();
        count(&self.opening.kind) + self.depth * count(&self.block.kind) + count(&self.readout.kind)
    }

    fn zeros(&self) -> Result<ResidualNetwork> {
        let z = |s: &TransformSpec| TransformParams::zeros(s.kind, s.activation);
        ResidualNetwork::new(
            z(&self.opening)?,
            (0..self.depth).map(|_| z(&self.block)).collect::<Result<_>>()?,
            self.step_size,
            z(&self.readout)?,
        )
    }

    /// Network with seeded uniform parameters.
    pub fn build_random(&self, seed: u64) -> Result<ResidualNetwork> {
        let mut net = self.zeros()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = self.init;
        let mut fill = |t: &mut TransformParams| {
            let a = init.weight_scale / (t.kind.fan_in() as f64).sqrt();
            for w in t.weights.iter_mut() {
                *w = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
            }
            for b in t.bias.iter_mut() {
                *b = if init.bias_scale > 0.0 {
                    rng.random_range(-init.bias_scale..init.bias_scale)
                } else {
                    0.0
                };
            }
        };
        fill(&mut net.opening);
        for block in net.blocks.iter_mut() {
            fill(block);
            shift_self_coupling(block, init.block_diagonal);
        }
        fill(&mut net.readout);
        Ok(net)
    }

    /// Network whose parameters come from a blob in declaration order.
    pub fn build_from_bytes(&self, bytes: &[u8]) -> Result<ResidualNetwork> {
        let expected = self.num_params() * 8;
        if bytes.len() != expected {
            return Err(Error::Parse {
                offset: bytes.len().min(expected) as u64,
                msg: format!("parameter blob has {} bytes, expected {expected}", bytes.len()),
            });
        }
        let mut net = self.zeros()?;
        for (p, chunk) in net.params_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(net)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("network description: {e}")))
    }
}

fn shift_self_coupling(t: &mut TransformParams, shift: f64) {
    if shift == 0.0 {
        return;
    }
    match t.kind {
        TransformKind::Dense { inputs, outputs } => {
            for i in 0..inputs.min(outputs) {
                t.weights[i * inputs + i] += shift;
            }
        }
        TransformKind::Conv2d {
            channels_in,
            channels_out,
            kernel,
            ..
        } => {
            let centre = (kernel / 2) * kernel + kernel / 2;
            for c in 0..channels_in.min(channels_out) {
                t.weights[(c * channels_in + c) * kernel * kernel + centre] += shift;
            }
        }
    }
}

impl ResidualNetwork {
    /// Architecture of this network (initialisation scale is not recoverable
    /// and is left at its default).
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            depth: self.depth(),
            step_size: self.step_size,
            opening: TransformSpec {
                kind: self.opening.kind,
                activation: self.opening.activation,
            },
            block: TransformSpec {
                kind: self.blocks[0].kind,
                activation: self.blocks[0].activation,
            },
            readout: TransformSpec {
                kind: self.readout.kind,
                activation: self.readout.activation,
            },
            init: InitSpec::default(),
        }
    }

    pub fn params_to_bytes(&self) -> Vec<u8> {
        self.params().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn save(&self, config_path: &Path, params_path: &Path) -> Result<()> {
        if self
            .blocks
            .iter()
            .any(|b| b.kind != self.blocks[0].kind || b.activation != self.blocks[0].activation)
        {
            return Err(Error::Config(
                "only networks with a uniform block shape can be saved".into(),
            ));
        }
        fs::write(config_path, self.spec().to_toml())?;
        fs::write(params_path, self.params_to_bytes())?;
        Ok(())
    }

    pub fn load(config_path: &Path, params_path: &Path) -> Result<Self> {
        let spec = NetworkSpec::from_toml(&fs::read_to_string(config_path)?)?;
        spec.build_from_bytes(&fs::read(params_path)?)
    }
}
