//! Feature-level super-resolution branch.
//!
//! Residual groups of residual channel-attention blocks refine the stride-4
//! feature map, the result is added back onto that map, and sub-pixel
//! convolutions upsample it to a full-resolution image. The branch only
//! exists to shape the features during training; detection never reads it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Conv, ConvSpec, ParamGroup, ParamStore};

/// The pyramid level the branch must attach to.
/// Shrinks the final reconstruction conv at init.
const RECON_INIT_SCALE: f64 = 0.01;

pub const OP2_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrBranchConfig {
    pub num_rg: usize,
    pub rcab_per_rg: usize,
    /// Must equal the width of the feature map the branch attaches to.
    pub channels: usize,
    pub reduction: usize,
    pub upscale: usize,
    pub image_channels: usize,
}

impl Default for SrBranchConfig {
    fn default() -> Self {
        SrBranchConfig {
            num_rg: 2,
            rcab_per_rg: 2,
            channels: 16,
            reduction: 4,
            upscale: 4,
            image_channels: 3,
        }
    }
}

impl SrBranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rg == 0 || self.rcab_per_rg == 0 {
            return Err(Error::Config("sr.num_rg and sr.rcab_per_rg must be >= 1".into()));
        }
        if self.channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("sr.channels and sr.image_channels must be >= 1".into()));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Divisibility {
                channels: self.channels,
                reduction: self.reduction,
            });
        }
        if self.upscale < 2 || !self.upscale.is_power_of_two() {
            return Err(Error::Config(format!(
                "sr.upscale must be a power of two >= 2, got {}",
                self.upscale
            )));
        }
        Ok(())
    }

    fn upsample_stages(&self) -> usize {
        self.upscale.trailing_zeros() as usize
    }
}

/// A feature tensor tagged with its stride relative to the network input.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

/// Squeeze-and-excitation style gate: pool, bottleneck, sigmoid, rescale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl ChannelAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Divisibility {
                channels,
                reduction,
            });
        }
        let hidden = channels / reduction;
        let g = ParamGroup::SrBranch;
        Ok(ChannelAttention {
            squeeze: Conv::new(store, &format!("{name}.squeeze"), g, ConvSpec::new(channels, hidden, 1), rng),
            excite: Conv::new(store, &format!("{name}.excite"), g, ConvSpec::new(hidden, channels, 1), rng),
        })
    }

    /// Returns the per-channel gate (N×C×1×1) without applying it.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        let h = self.squeeze.forward(g, store, pooled);
        let h = g.relu(h);
        let e = self.excite.forward(g, store, h);
        g.sigmoid(e)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gate = self.gate(g, store, x);
        g.channel_scale(x, gate)
    }

    pub fn param_count(&self) -> usize {
        self.squeeze.param_count() + self.excite.param_count()
    }
}

/// Residual channel-attention block: `x + CA(conv(relu(conv(x))))`.
#[derive(Clone, Debug)]
pub struct Rcab {
    pub conv1: Conv,
    pub conv2: Conv,
    pub attention: ChannelAttention,
}

impl Rcab {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = ParamGroup::SrBranch;
        Ok(Rcab {
            conv1: Conv::new(store, &format!("{name}.conv1"), g, ConvSpec::new(channels, channels, 3), rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), g, ConvSpec::new(channels, channels, 3), rng),
            attention: ChannelAttention::new(store, &format!("{name}.ca"), channels, reduction, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        g.mark("rcab");
        let h = self.conv1.forward(g, store, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.attention.forward(g, store, h);
        g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.attention.param_count()
    }
}

/// Residual group: a chain of RCABs and a trailing conv under one skip.
#[derive(Clone, Debug)]
pub struct ResidualGroup {
    pub blocks: Vec<Rcab>,
    pub tail: Conv,
}

impl ResidualGroup {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &SrBranchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..cfg.rcab_per_rg)
            .map(|i| Rcab::new(store, &format!("{name}.rcab{i}"), cfg.channels, cfg.reduction, rng))
            .collect::<Result<_>>()?;
        let tail = Conv::new(
            store,
            &format!("{name}.tail"),
            ParamGroup::SrBranch,
            ConvSpec::new(cfg.channels, cfg.channels, 3),
            rng,
        );
        Ok(ResidualGroup { blocks, tail })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        g.mark("rg");
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h);
        }
        let h = self.tail.forward(g, store, h);
        g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Rcab::param_count).sum::<usize>() + self.tail.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct SrBranch {
    pub cfg: SrBranchConfig,
    pub groups: Vec<ResidualGroup>,
    /// One conv per ×2 sub-pixel stage; the last one emits `image_channels · 4` maps.
    pub upsampler: Vec<Conv>,
}

impl SrBranch {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &SrBranchConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let groups = (0..cfg.num_rg)
            .map(|i| ResidualGroup::new(store, &format!("sr.rg{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let stages = cfg.upsample_stages();
        let upsampler = (0..stages)
            .map(|i| {
                let out = if i + 1 == stages {
                    cfg.image_channels * 4
                } else {
                    cfg.channels * 4
                };
                Conv::new(
                    store,
                    &format!("sr.up{i}"),
                    ParamGroup::SrBranch,
                    ConvSpec::new(cfg.channels, out, 3),
                    rng,
                )
            })
            .collect::<Vec<_>>();
        // Start reconstructions near mid-gray so the output clamp is not saturated.
        if let Some(last) = upsampler.last() {
            last.set_bias(store, 0.5);
            for v in store.get_mut(last.weight).data_mut() {
                *v *= RECON_INIT_SCALE;
            }
        }
        Ok(SrBranch {
            cfg: cfg.clone(),
            groups,
            upsampler,
        })
    }

    /// Low-level input plus residual-group output.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, op2: Var) -> Var {
        let mut h = op2;
        for group in &self.groups {
            h = group.forward(g, store, h);
        }
        g.add(op2, h)
    }

    /// Reconstructs an image `upscale` times larger than the OP2 map, clamped to `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, op2: FeatureMap) -> Result<Var> {
        if op2.stride != OP2_STRIDE {
            return Err(Error::StrideMismatch {
                expected: OP2_STRIDE,
                got: op2.stride,
            });
        }
        let channels = g.value(op2.var).c();
        if channels != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "branch expects {} channels, OP2 has {channels}",
                self.cfg.channels
            )));
        }
        let mut h = self.fuse(g, store, op2.var);
        for conv in &self.upsampler {
            h = conv.forward(g, store, h);
            h = g.pixel_shuffle(h, 2);
        }
        Ok(g.clamp(h, 0.0, 1.0))
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ResidualGroup::param_count).sum::<usize>()
            + self.upsampler.iter().map(Conv::param_count).sum::<usize>()
    }
}

/// Closed-form parameter count of a branch built from `cfg` (all convs biased).
pub fn branch_param_count(cfg: &SrBranchConfig) -> usize {
    let c = cfg.channels;
    let hidden = c / cfg.reduction;
    let conv3 = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let attention = (c * hidden + hidden) + (hidden * c + c);
    let rcab = 2 * conv3(c, c) + attention;
    let group = cfg.rcab_per_rg * rcab + conv3(c, c);
    let stages = cfg.upsample_stages();
    let upsampler = (stages - 1) * conv3(c, 4 * c) + conv3(c, 4 * cfg.image_channels);
    cfg.num_rg * group + upsampler
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_map(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_divisibility() {
        let mut store = ParamStore::new();
        let err = ChannelAttention::new(&mut store, "ca", 6, 4, &mut rng());
        assert!(matches!(err, Err(Error::Divisibility { channels: 6, reduction: 4 })));
    }

    #[test]
    fn attention_zero_input_half_gate() {
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", 8, 4, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 8, 3, 3]));
        let gate = ca.gate(&mut g, &store, x);
        assert!(g.value(gate).data().iter().all(|&v| v == 0.5));
        let y = ca.forward(&mut g, &store, x);
        assert_eq!(g.value(y).shape(), [1, 8, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gates_strictly_inside_unit_interval() {
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", 8, 2, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_map([2, 8, 5, 4], 1));
        let gate = ca.gate(&mut g, &store, x);
        assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_rcab_and_rg_are_identity() {
        let cfg = SrBranchConfig {
            channels: 8,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let rg = ResidualGroup::new(&mut store, "rg", &cfg, &mut rng()).unwrap();
        store.zero_group(ParamGroup::SrBranch);
        let x0 = random_map([1, 8, 5, 7], 2);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = rg.blocks[0].forward(&mut g, &store, x);
        assert_eq!(g.value(y), &x0);
        let y = rg.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &x0);
        assert_eq!(g.mark_count("rcab"), 3);
    }

    #[test]
    fn default_branch_traverses_two_groups_of_two_blocks() {
        let cfg = SrBranchConfig::default();
        let mut store = ParamStore::new();
        let branch = SrBranch::new(&mut store, &cfg, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_map([1, 16, 16, 16], 3));
        let out = branch.forward(&mut g, &store, FeatureMap { var: x, stride: 4 }).unwrap();
        assert_eq!(g.value(out).shape(), [1, 3, 64, 64]);
        assert_eq!(g.mark_count("rg"), 2);
        assert_eq!(g.mark_count("rcab"), 4);
        assert!(g.value(out).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zeroed_groups_fuse_to_twice_the_input() {
        let cfg = SrBranchConfig {
            channels: 8,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let branch = SrBranch::new(&mut store, &cfg, &mut rng()).unwrap();
        store.zero_group(ParamGroup::SrBranch);
        let x0 = random_map([1, 8, 4, 4], 4);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let fused = branch.fuse(&mut g, &store, x);
        assert_eq!(g.value(fused), &x0.map(|v| v + v));
    }

    #[test]
    fn wrong_level_is_rejected() {
        let mut store = ParamStore::new();
        let branch = SrBranch::new(&mut store, &SrBranchConfig::default(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 16, 4, 4]));
        let err = branch.forward(&mut g, &store, FeatureMap { var: x, stride: 8 });
        assert!(matches!(err, Err(Error::StrideMismatch { expected: 4, got: 8 })));
    }

    #[test]
    fn param_count_matches_hand_sum() {
        let cfg = SrBranchConfig {
            channels: 16,
            reduction: 4,
            num_rg: 1,
            rcab_per_rg: 1,
            ..Default::default()
        };
        // rcab: 2·(9·16·16 + 16) + (16·4 + 4) + (4·16 + 16) = 4640 + 148
        // group tail: 9·16·16 + 16 = 2320
        // up0: 9·16·64 + 64 = 9280; up1: 9·16·12 + 12 = 1740
        let hand = 4640 + 148 + 2320 + 9280 + 1740;
        assert_eq!(branch_param_count(&cfg), hand);
        let mut store = ParamStore::new();
        let branch = SrBranch::new(&mut store, &cfg, &mut rng()).unwrap();
        assert_eq!(branch.param_count(), hand);
        assert_eq!(store.scalar_count(Some(ParamGroup::SrBranch)), hand);

        let two = SrBranchConfig { num_rg: 2, ..cfg.clone() };
        assert_eq!(branch_param_count(&two) - branch_param_count(&cfg), 4640 + 148 + 2320);
    }
}
