use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Layer, LayerCache, Mode, NnError, Sequential};
use super::tensor::Tensor;
use crate::rng;

pub const ANCHORS: usize = 4;
pub const VALUES_PER_ANCHOR: usize = 7;
pub const HEAD_CHANNELS: usize = ANCHORS * VALUES_PER_ANCHOR;
pub const INPUT_CHANNELS: usize = 3;
/// Objectness logits start near sigmoid(-4), so a fresh net predicts few boxes.
pub const OBJECTNESS_PRIOR_BIAS: f64 = -4.0;

/// Row of a layer plan: a conv with its kernel and width, or a 2x pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Conv { kernel: usize, width: usize },
    Pool,
}

// full-width feature extractor and detection module, split at the sharing layer
const TABLE_FEC: &[Block] = &[
    Block::Conv {
        kernel: 3,
        width: 24,
    },
    Block::Pool,
    Block::Conv {
        kernel: 3,
        width: 48,
    },
    Block::Pool,
    Block::Conv {
        kernel: 3,
        width: 64,
    },
    Block::Conv {
        kernel: 3,
        width: 32,
    },
    Block::Conv {
        kernel: 3,
        width: 64,
    },
    Block::Pool,
    Block::Conv {
        kernel: 3,
        width: 128,
    },
    Block::Conv {
        kernel: 3,
        width: 64,
    },
    Block::Conv {
        kernel: 3,
        width: 128,
    },
    Block::Pool,
    Block::Conv {
        kernel: 3,
        width: 128,
    },
    Block::Conv {
        kernel: 3,
        width: 128,
    },
];

const TABLE_ODM: &[Block] = &[
    Block::Conv {
        kernel: 1,
        width: 128,
    },
    Block::Conv {
        kernel: 3,
        width: 256,
    },
    Block::Conv {
        kernel: 1,
        width: 512,
    },
    Block::Conv {
        kernel: 1,
        width: 1024,
    },
    Block::Conv {
        kernel: 3,
        width: 2048,
    },
    Block::Conv {
        kernel: 1,
        width: 1024,
    },
    Block::Conv {
        kernel: 1,
        width: 2048,
    },
    Block::Conv {
        kernel: 3,
        width: 1024,
    },
];

const COMPACT_FEC: &[Block] = &[
    Block::Conv {
        kernel: 3,
        width: 8,
    },
    Block::Pool,
    Block::Conv {
        kernel: 3,
        width: 16,
    },
    Block::Pool,
    Block::Conv {
        kernel: 3,
        width: 16,
    },
];

const COMPACT_ODM: &[Block] = &[
    Block::Conv {
        kernel: 3,
        width: 32,
    },
    Block::Conv {
        kernel: 1,
        width: 32,
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// The full layer plan with widths divided by `width_divisor`.
    Table,
    /// A five-conv net small enough to train on one core in minutes.
    Compact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub preset: Preset,
    /// Divides every width of the `table` preset (minimum width 1).
    pub width_divisor: usize,
    /// Number of 2x pools kept in the feature extractor; `K = 2^pools`.
    /// Pools beyond this count are dropped, the convs around them stay.
    pub pools: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Table,
            width_divisor: 8,
            pools: 2,
        }
    }
}

impl NetConfig {
    pub fn compact() -> Self {
        Self {
            preset: Preset::Compact,
            width_divisor: 1,
            pools: 2,
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.pools
    }

    fn plans(&self) -> Result<(Vec<Block>, Vec<Block>), NnError> {
        let (fec, odm, div) = match self.preset {
            Preset::Table => (TABLE_FEC, TABLE_ODM, self.width_divisor.max(1)),
            Preset::Compact => (COMPACT_FEC, COMPACT_ODM, 1),
        };
        let available = fec.iter().filter(|b| **b == Block::Pool).count();
        if self.pools > available {
            return Err(NnError::Format(format!(
                "{:?} preset has {available} pools, {} requested",
                self.preset, self.pools
            )));
        }
        let scale = |b: &Block| match *b {
            Block::Conv { kernel, width } => Block::Conv {
                kernel,
                width: (width / div).max(1),
            },
            Block::Pool => Block::Pool,
        };
        let mut kept = 0;
        let fec = fec
            .iter()
            .filter(|b| {
                if **b == Block::Pool {
                    kept += 1;
                    kept <= self.pools
                } else {
                    true
                }
            })
            .map(scale)
            .collect();
        Ok((fec, odm.iter().map(scale).collect()))
    }
}

/// Feature extractor followed by the detection module. The only connection
/// between the two halves is the shared feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub fec: Sequential,
    pub odm: Sequential,
}

fn conv_he(kernel: usize, cin: usize, cout: usize, rng: &mut rng::Rng) -> Conv2d {
    let mut conv = Conv2d::zeros(kernel, cin, cout);
    let std = (2.0 / (kernel * kernel * cin) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    for w in &mut conv.weight {
        *w = normal.sample(rng);
    }
    conv
}

fn build_block(name: &str, plan: &[Block], mut cin: usize, seed: u64, salt: u64) -> Sequential {
    let mut layers = Vec::new();
    for (i, b) in plan.iter().enumerate() {
        match *b {
            Block::Conv { kernel, width } => {
                let mut r = rng::stream2(seed, rng::INIT, salt, i as u64);
                layers.push(Layer::Conv(conv_he(kernel, cin, width, &mut r)));
                layers.push(Layer::BatchNorm(BatchNorm::new(width)));
                layers.push(Layer::LeakyRelu);
                cin = width;
            }
            Block::Pool => layers.push(Layer::MaxPool),
        }
    }
    Sequential::new(name, layers)
}

impl Network {
    /// Builds a freshly initialized network (He-normal convs, zero biases).
    pub fn build(cfg: &NetConfig, seed: u64) -> Result<Self, NnError> {
        let (fec_plan, odm_plan) = cfg.plans()?;
        let fec = build_block("fec", &fec_plan, INPUT_CHANNELS, seed, 0);
        let c = fec.output_channels(INPUT_CHANNELS);
        let mut odm = build_block("odm", &odm_plan, c, seed, 1);
        let head_in = odm.output_channels(c);
        let mut r = rng::stream2(seed, rng::INIT, 2, 0);
        let mut head = conv_he(1, head_in, HEAD_CHANNELS, &mut r);
        // the head has no nonlinearity after it, so use a fan-in (not He) scale
        for w in &mut head.weight {
            *w *= std::f64::consts::FRAC_1_SQRT_2;
        }
        for a in 0..ANCHORS {
            head.bias[a * VALUES_PER_ANCHOR + 5] = OBJECTNESS_PRIOR_BIAS;
        }
        odm.layers.push(Layer::Conv(head));
        Ok(Self { fec, odm })
    }

    /// Total downsampling `K` of the feature extractor.
    pub fn downsampling(&self) -> usize {
        1 << self.fec.pool_count()
    }

    /// Channel count `C` of the shared feature map.
    pub fn feature_channels(&self) -> usize {
        self.fec.output_channels(INPUT_CHANNELS)
    }

    pub fn param_count(&self) -> usize {
        self.fec.param_count() + self.odm.param_count()
    }

    pub fn features(&self, bev: &Tensor) -> Result<Tensor, NnError> {
        self.fec.forward_eval(bev)
    }

    pub fn detect_head(&self, features: &Tensor) -> Result<Tensor, NnError> {
        self.odm.forward_eval(features)
    }

    pub fn forward_eval(&self, bev: &Tensor) -> Result<Tensor, NnError> {
        self.detect_head(&self.features(bev)?)
    }

    /// Both halves as one stack, for gradient checking.
    pub fn as_sequential(&self) -> Sequential {
        let mut layers = self.fec.layers.clone();
        layers.extend(self.odm.layers.iter().cloned());
        Sequential::new("net", layers)
    }

    /// Train-mode forward returning both halves' caches.
    pub fn forward_train(&self, xs: &[Tensor]) -> Result<TrainPass, NnError> {
        let (features, fec_caches) = self.fec.forward(xs, Mode::Train)?;
        let (outputs, odm_caches) = self.odm.forward(&features, Mode::Train)?;
        Ok(TrainPass {
            features,
            outputs,
            fec_caches,
            odm_caches,
        })
    }
}

pub struct TrainPass {
    pub features: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub fec_caches: Vec<LayerCache>,
    pub odm_caches: Vec<LayerCache>,
}
