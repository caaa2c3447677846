//! Small U-shaped encoder–decoder.
//!
//! ```text
//! input 3xP ── enc1(16) ─────────────────────────── cat ─ dec1(16) ─ head(|C|) ─ sigmoid
//!                 └ pool ─ enc2(32) ─────── cat ─ dec2(32) ─ up ┘
//!                             └ pool ─ bottleneck(32) ─ up ┘
//! ```
//!
//! Every hidden block is conv3x3 → (batch norm) → ReLU. The head is a 1x1
//! convolution with one independent logistic output per foreground class.

use serde::{Deserialize, Serialize};

use super::nn::{
    add_assign, concat, max_pool2, max_pool2_backward, relu_backward, relu_in_place, split_channels, upsample2,
    upsample2_backward, BatchNorm2d, BnCache, Conv2d, ConvCache, Param, Tensor,
};
use crate::error::{Error, Result};
use crate::seed::stage_rng;

pub const DEFAULT_WIDTHS: [usize; 2] = [16, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub patch_size: usize,
    pub widths: [usize; 2],
    pub batchnorm: bool,
}

impl ModelConfig {
    pub fn new(classes: usize, patch_size: usize, batchnorm: bool) -> Self {
        Self {
            classes,
            patch_size,
            widths: DEFAULT_WIDTHS,
            batchnorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArgument("model needs at least one class".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must be a positive multiple of 4 (two 2x poolings)",
                self.patch_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
}

struct BlockCache {
    conv: ConvCache,
    bn: Option<BnCache>,
    out: Tensor,
}

impl ConvBlock {
    fn new<R: rand::Rng>(cin: usize, cout: usize, batchnorm: bool, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, std::f32::consts::SQRT_2, rng),
            bn: batchnorm.then(|| BatchNorm2d::new(cout)),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, BlockCache) {
        let (mut y, conv) = self.conv.forward(x);
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (z, c) = bn.forward(&y, train);
            y = z;
            bn_cache = c;
        }
        relu_in_place(&mut y);
        let cache = BlockCache {
            conv,
            bn: bn_cache,
            out: y.clone(),
        };
        (y, cache)
    }

    fn backward(&mut self, mut dy: Tensor, cache: BlockCache, need_input_grad: bool) -> Option<Tensor> {
        relu_backward(&mut dy, &cache.out);
        if let (Some(bn), Some(bc)) = (&mut self.bn, cache.bn) {
            dy = bn.backward(&dy, bc);
        }
        self.conv.backward(&dy, cache.conv, need_input_grad)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.conv.params_mut().into_iter().collect();
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub config: ModelConfig,
    pub enc1: ConvBlock,
    pub enc2: ConvBlock,
    pub bottleneck: ConvBlock,
    pub dec2: ConvBlock,
    pub dec1: ConvBlock,
    pub head: Conv2d,
}

/// Activations kept from a training forward pass.
pub struct ForwardCache {
    enc1: BlockCache,
    pool1: Vec<u32>,
    enc2: BlockCache,
    pool2: Vec<u32>,
    bottleneck: BlockCache,
    dec2: BlockCache,
    dec1: BlockCache,
    head: ConvCache,
    batch: usize,
}

/// Prior probability of the head at initialization; foreground is sparse.
const HEAD_PRIOR: f32 = 0.1;

impl SegmentationModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stage_rng(seed, "model-init");
        let [w1, w2] = config.widths;
        let bn = config.batchnorm;
        let enc1 = ConvBlock::new(3, w1, bn, &mut rng);
        let enc2 = ConvBlock::new(w1, w2, bn, &mut rng);
        let bottleneck = ConvBlock::new(w2, w2, bn, &mut rng);
        let dec2 = ConvBlock::new(w2 + w2, w2, bn, &mut rng);
        let dec1 = ConvBlock::new(w2 + w1, w1, bn, &mut rng);
        let mut head = Conv2d::new(w1, config.classes, 1, 1.0, &mut rng);
        head.bias.value.fill((HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln());
        Ok(Self {
            config,
            enc1,
            enc2,
            bottleneck,
            dec2,
            dec1,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let p = self.config.patch_size;
        if x.channels != 3 || x.height != p || x.width != p || x.batch == 0 {
            return Err(Error::Shape(format!(
                "model expects 3x{p}x{p} inputs, got {}x{}x{} (batch {})",
                x.channels, x.height, x.width, x.batch
            )));
        }
        Ok(())
    }

    /// Logits, `[classes][N][P][P]`. Batch norm uses batch statistics and
    /// updates running averages when `train` is set.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let w1 = self.config.widths[0];
        let (e1, c_e1) = self.enc1.forward(x, train);
        let (p1, a1) = max_pool2(&e1);
        let (e2, c_e2) = self.enc2.forward(&p1, train);
        let (p2, a2) = max_pool2(&e2);
        let (b, c_b) = self.bottleneck.forward(&p2, train);
        let (d2, c_d2) = self.dec2.forward(&concat(&upsample2(&b), &e2), train);
        let (d1, c_d1) = self.dec1.forward(&concat(&upsample2(&d2), &e1), train);
        let (logits, c_head) = self.head.forward(&d1);
        debug_assert_eq!(d1.channels, w1);
        Ok((
            logits,
            ForwardCache {
                enc1: c_e1,
                pool1: a1,
                enc2: c_e2,
                pool2: a2,
                bottleneck: c_b,
                dec2: c_d2,
                dec1: c_d1,
                head: c_head,
                batch: x.batch,
            },
        ))
    }

    /// Inference: logistic probabilities with running batch-norm statistics.
    pub fn infer(&mut self, x: &Tensor) -> Result<Tensor> {
        let (mut logits, _) = self.forward(x, false)?;
        for v in &mut logits.data {
            *v = super::nn::sigmoid(*v);
        }
        Ok(logits)
    }

    /// Accumulates parameter gradients from the logit gradient.
    pub fn backward(&mut self, dlogits: &Tensor, cache: ForwardCache) {
        let [w1, w2] = self.config.widths;
        let p = self.config.patch_size;
        let n = cache.batch;
        let dd1 = self.head.backward(dlogits, cache.head, true).expect("input grad requested");
        let dc1 = self.dec1.backward(dd1, cache.dec1, true).expect("input grad requested");
        let (du1, mut de1) = split_channels(dc1, w2);
        let dd2 = upsample2_backward(&du1);
        let dc2 = self.dec2.backward(dd2, cache.dec2, true).expect("input grad requested");
        let (du2, mut de2) = split_channels(dc2, w2);
        let db = upsample2_backward(&du2);
        let dp2 = self.bottleneck.backward(db, cache.bottleneck, true).expect("input grad requested");
        add_assign(&mut de2, &max_pool2_backward(&dp2, &cache.pool2, w2, n, p / 2, p / 2));
        let dp1 = self.enc2.backward(de2, cache.enc2, true).expect("input grad requested");
        add_assign(&mut de1, &max_pool2_backward(&dp1, &cache.pool1, w1, n, p, p));
        self.enc1.backward(de1, cache.enc1, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.enc1.params_mut());
        v.extend(self.enc2.params_mut());
        v.extend(self.bottleneck.params_mut());
        v.extend(self.dec2.params_mut());
        v.extend(self.dec1.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    fn blocks(&self) -> [(&'static str, &ConvBlock); 5] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("bottleneck", &self.bottleneck),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
        ]
    }

    fn blocks_mut(&mut self) -> [(&'static str, &mut ConvBlock); 5] {
        [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("bottleneck", &mut self.bottleneck),
            ("dec2", &mut self.dec2),
            ("dec1", &mut self.dec1),
        ]
    }

    /// All stored arrays (parameters and batch-norm running statistics) by
    /// stable name.
    pub fn named_arrays(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.conv.weight"), b.conv.weight.value.clone()));
            out.push((format!("{name}.conv.bias"), b.conv.bias.value.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{name}.bn.gamma"), bn.gamma.value.clone()));
                out.push((format!("{name}.bn.beta"), bn.beta.value.clone()));
                out.push((format!("{name}.bn.running_mean"), bn.running_mean.clone()));
                out.push((format!("{name}.bn.running_var"), bn.running_var.clone()));
            }
        }
        out.push(("head.weight".into(), self.head.weight.value.clone()));
        out.push(("head.bias".into(), self.head.bias.value.clone()));
        out
    }

    /// Overwrites arrays by name; every array of the architecture must be
    /// present with the right length.
    pub fn load_named_arrays(&mut self, arrays: &std::collections::BTreeMap<String, Vec<f32>>) -> Result<()> {
        fn take(arrays: &std::collections::BTreeMap<String, Vec<f32>>, name: &str, dst: &mut [f32]) -> Result<()> {
            let src = arrays
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks array {name}")))?;
            if src.len() != dst.len() {
                return Err(Error::Shape(format!(
                    "checkpoint array {name} has {} values, model expects {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
            Ok(())
        }
        for (name, b) in self.blocks_mut() {
            take(arrays, &format!("{name}.conv.weight"), &mut b.conv.weight.value)?;
            take(arrays, &format!("{name}.conv.bias"), &mut b.conv.bias.value)?;
            if let Some(bn) = &mut b.bn {
                take(arrays, &format!("{name}.bn.gamma"), &mut bn.gamma.value)?;
                take(arrays, &format!("{name}.bn.beta"), &mut bn.beta.value)?;
                take(arrays, &format!("{name}.bn.running_mean"), &mut bn.running_mean)?;
                take(arrays, &format!("{name}.bn.running_var"), &mut bn.running_var)?;
            }
        }
        take(arrays, "head.weight", &mut self.head.weight.value)?;
        take(arrays, "head.bias", &mut self.head.bias.value)?;
        Ok(())
    }
}
