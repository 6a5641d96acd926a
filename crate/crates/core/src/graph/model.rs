//! DenseNet and ResNet graph builders.

use serde::{Deserialize, Serialize};

use super::{build::GraphBuilder, Graph, SlotId};
use crate::error::{Error, Result};
use crate::tensor::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    DenseNet,
    ResNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// 3×3 stem, small enough to execute.
    Micro,
    /// 7×7 stride-2 stem plus pooling and a BN/ReLU/global-pool head; used
    /// for traffic modeling only.
    FullShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// CPLs per dense block, or residual units per stage.
    pub blocks: Vec<usize>,
    /// DenseNet growth rate k; for ResNet the bottleneck width of stage 0.
    pub growth_rate: usize,
    /// Bottleneck width multiplier m (DenseNet: 1×1 conv emits m·k
    /// channels; ResNet: unit output is m × bottleneck width).
    pub bottleneck_mult: usize,
    pub stem_channels: usize,
    pub input: Dims,
    pub scale: Scale,
}

impl ModelSpec {
    /// 2 blocks × 3 CPLs, k = 12, input `(batch, 24, 16, 16)`.
    pub fn densenet_micro(batch: usize) -> Self {
        ModelSpec {
            family: Family::DenseNet,
            blocks: vec![3, 3],
            growth_rate: 12,
            bottleneck_mult: 4,
            stem_channels: 24,
            input: Dims::new(batch, 24, 16, 16),
            scale: Scale::Micro,
        }
    }

    /// Micro DenseNet with the stem emitting `2k` channels.
    pub fn densenet_small(blocks: &[usize], k: usize, input: Dims) -> Self {
        ModelSpec {
            family: Family::DenseNet,
            blocks: blocks.to_vec(),
            growth_rate: k,
            bottleneck_mult: 4,
            stem_channels: 2 * k,
            input,
            scale: Scale::Micro,
        }
    }

    /// DenseNet-121: k = 32, blocks 6/12/24/16, 224×224 RGB input.
    pub fn densenet121(batch: usize) -> Self {
        ModelSpec {
            family: Family::DenseNet,
            blocks: vec![6, 12, 24, 16],
            growth_rate: 32,
            bottleneck_mult: 4,
            stem_channels: 64,
            input: Dims::new(batch, 3, 224, 224),
            scale: Scale::FullShape,
        }
    }

    /// One stage of two bottleneck units, 16 channels at unit boundaries.
    pub fn resnet_micro(batch: usize) -> Self {
        ModelSpec {
            family: Family::ResNet,
            blocks: vec![2],
            growth_rate: 4,
            bottleneck_mult: 4,
            stem_channels: 16,
            input: Dims::new(batch, 8, 8, 8),
            scale: Scale::Micro,
        }
    }

    /// ResNet-50: stages of 3/4/6/3 bottleneck units, widths 64·2^s.
    pub fn resnet50(batch: usize) -> Self {
        ModelSpec {
            family: Family::ResNet,
            blocks: vec![3, 4, 6, 3],
            growth_rate: 64,
            bottleneck_mult: 4,
            stem_channels: 64,
            input: Dims::new(batch, 3, 224, 224),
            scale: Scale::FullShape,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.input.n = batch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.growth_rate == 0 {
            return bad("growth rate must be at least 1");
        }
        if self.bottleneck_mult == 0 {
            return bad("bottleneck multiplier must be at least 1");
        }
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad("every block needs at least one layer");
        }
        if self.stem_channels == 0 {
            return bad("stem must emit at least one channel");
        }
        self.input.checked_len().map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck_mult * self.growth_rate
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<Graph> {
    match spec.family {
        Family::DenseNet => build_densenet(spec),
        Family::ResNet => build_resnet(spec),
    }
}

fn spec_err(e: Error) -> Error {
    match e {
        Error::InvalidShape(m) => Error::InvalidSpec(m),
        e => e,
    }
}

fn stem(b: &mut GraphBuilder, spec: &ModelSpec, x: SlotId) -> Result<SlotId> {
    match spec.scale {
        Scale::Micro => b.conv(x, spec.stem_channels, 3, 1, 1, "stem.conv"),
        Scale::FullShape => {
            let y = b.conv(x, spec.stem_channels, 7, 2, 3, "stem.conv")?;
            let y = b.bn(y, "stem.bn")?;
            let y = b.relu(y, "stem.relu")?;
            // The canonical stem pools 3×3/2 with max; max pooling is outside
            // the op set, and a 2×2/2 average pool yields the same 56×56 shape.
            b.avgpool(y, 2, 2, "stem.pool")
        }
    }
}

fn head(b: &mut GraphBuilder, spec: &ModelSpec, x: SlotId) -> Result<SlotId> {
    match spec.scale {
        Scale::Micro => Ok(x),
        Scale::FullShape => {
            let y = b.bn(x, "head.bn")?;
            let y = b.relu(y, "head.relu")?;
            let d = b.dims(y)?;
            b.avgpool(y, d.h, d.h, "head.pool")
        }
    }
}

pub fn build_densenet(spec: &ModelSpec) -> Result<Graph> {
    if spec.family != Family::DenseNet {
        return Err(Error::InvalidSpec("build_densenet on a non-DenseNet spec".into()));
    }
    spec.validate()?;
    let k = spec.growth_rate;
    let mut b = GraphBuilder::new();
    let input = b.input(spec.input)?;
    let mut x = stem(&mut b, spec, input).map_err(spec_err)?;
    for (bi, &layers) in spec.blocks.iter().enumerate() {
        let blk = bi + 1;
        let c0 = b.dims(x)?.c;
        for l in 1..=layers {
            let p = format!("block{blk}.cpl{l}");
            debug_assert_eq!(b.dims(x)?.c, c0 + (l - 1) * k);
            let fan = b.split(x, 2, &format!("{p}.split"))?;
            let y = b.bn(fan[0], &format!("{p}.bn1"))?;
            let y = b.relu(y, &format!("{p}.relu1"))?;
            let y = b.conv(y, spec.bottleneck_width(), 1, 1, 0, &format!("{p}.conv1x1"))?;
            let y = b.bn(y, &format!("{p}.bn2"))?;
            let y = b.relu(y, &format!("{p}.relu2"))?;
            let y = b.conv(y, k, 3, 1, 1, &format!("{p}.conv3x3"))?;
            x = b.concat(&[fan[1], y], true, &format!("{p}.concat"))?;
        }
        if blk < spec.blocks.len() {
            let p = format!("trans{blk}");
            let c = b.dims(x)?.c;
            let y = b.bn(x, &format!("{p}.bn"))?;
            let y = b.relu(y, &format!("{p}.relu"))?;
            let y = b.conv(y, (c / 2).max(1), 1, 1, 0, &format!("{p}.conv"))?;
            x = b.avgpool(y, 2, 2, &format!("{p}.pool")).map_err(spec_err)?;
        }
    }
    let out = head(&mut b, spec, x).map_err(spec_err)?;
    b.finish(&[out])
}

pub fn build_resnet(spec: &ModelSpec) -> Result<Graph> {
    if spec.family != Family::ResNet {
        return Err(Error::InvalidSpec("build_resnet on a non-ResNet spec".into()));
    }
    spec.validate()?;
    let mut b = GraphBuilder::new();
    let input = b.input(spec.input)?;
    let mut x = stem(&mut b, spec, input).map_err(spec_err)?;
    let mut units = 0;
    for (si, &n_units) in spec.blocks.iter().enumerate() {
        let width = spec.growth_rate << si;
        let out_c = spec.bottleneck_mult * width;
        for u in 1..=n_units {
            let p = format!("stage{}.unit{u}", si + 1);
            let stride = if si > 0 && u == 1 { 2 } else { 1 };
            let in_c = b.dims(x)?.c;
            let fan = b.split(x, 2, &format!("{p}.split"))?;
            let y = b.bn(fan[0], &format!("{p}.bn1"))?;
            let y = b.relu(y, &format!("{p}.relu1"))?;
            let y = b.conv(y, width, 1, 1, 0, &format!("{p}.conv1"))?;
            let y = b.bn(y, &format!("{p}.bn2"))?;
            let y = b.relu(y, &format!("{p}.relu2"))?;
            let y = b.conv(y, width, 3, stride, 1, &format!("{p}.conv2")).map_err(spec_err)?;
            let y = b.bn(y, &format!("{p}.bn3"))?;
            let y = b.relu(y, &format!("{p}.relu3"))?;
            let y = b.conv(y, out_c, 1, 1, 0, &format!("{p}.conv3"))?;
            let skip = if in_c != out_c || stride != 1 {
                b.projection(fan[1], out_c, stride, &format!("{p}.shortcut"))?
            } else {
                fan[1]
            };
            x = b.ews(y, skip, &format!("{p}.sum"))?;
            units += 1;
        }
    }
    let out = head(&mut b, spec, x).map_err(spec_err)?;
    let g = b.finish(&[out])?;
    let expected = 1 + 3 * units;
    if g.layer_conv_count() != expected {
        return Err(Error::InvalidSpec(format!(
            "bottleneck layout has {} convolutions, expected {expected}",
            g.layer_conv_count()
        )));
    }
    if *spec == ModelSpec::resnet50(spec.input.n) {
        assert_eq!(g.layer_conv_count(), 49, "ResNet-50 body has 49 convolutions");
    }
    Ok(g)
}
