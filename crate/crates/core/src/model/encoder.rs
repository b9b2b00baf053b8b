//! Frame encoders: a residual 50-layer network (optionally IBN-a) and a
//! three-block convolutional encoder for desk-scale runs. Parameter names
//! follow the torchvision / IBN-Net layout under an `encoder.` prefix so
//! converted pretrained weights load by name.

use candle_core::Tensor;

use super::layers::{BatchNorm, Conv2d, ConvOpts, Norm};
use super::store::ParamStore;
use crate::Result;

fn conv(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    Conv2d::new(
        store,
        name,
        c_in,
        c_out,
        (k, k),
        ConvOpts {
            stride,
            padding,
            bias: false,
        },
    )
}

pub const TINY_WIDTHS: [usize; 2] = [16, 32];

pub struct TinyEncoder {
    blocks: Vec<(Conv2d, Norm)>,
}

impl TinyEncoder {
    pub fn new(store: &mut ParamStore, embed_dim: usize, last_stride: usize) -> Result<Self> {
        let widths = [3, TINY_WIDTHS[0], TINY_WIDTHS[1], embed_dim];
        let strides = [2, 2, last_stride];
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            let name = format!("encoder.block{i}");
            let c = conv(store, &format!("{name}.conv"), widths[i], widths[i + 1], 3, strides[i], 1)?;
            let n = Norm::new(store, &format!("{name}.bn"), widths[i + 1], false)?;
            blocks.push((c, n));
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for (c, n) in &self.blocks {
            x = n.forward(&c.forward(&x)?, train)?.relu()?;
        }
        Ok(x)
    }
}

struct Downsample {
    conv: Conv2d,
    bn: BatchNorm,
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: Norm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<Downsample>,
}

const EXPANSION: usize = 4;

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        planes: usize,
        stride: usize,
        ibn: bool,
    ) -> Result<Self> {
        let c_out = planes * EXPANSION;
        let downsample = if stride != 1 || c_in != c_out {
            Some(Downsample {
                conv: conv(store, &format!("{name}.downsample.0"), c_in, c_out, 1, stride, 0)?,
                bn: BatchNorm::new(store, &format!("{name}.downsample.1"), c_out)?,
            })
        } else {
            None
        };
        Ok(Self {
            conv1: conv(store, &format!("{name}.conv1"), c_in, planes, 1, 1, 0)?,
            bn1: Norm::new(store, &format!("{name}.bn1"), planes, ibn)?,
            conv2: conv(store, &format!("{name}.conv2"), planes, planes, 3, stride, 1)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), planes)?,
            conv3: conv(store, &format!("{name}.conv3"), planes, c_out, 1, 1, 0)?,
            bn3: BatchNorm::new(store, &format!("{name}.bn3"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.bn.forward(&d.conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub const EMBED_DIM: usize = 2048;

    /// `ibn` swaps the first norm of every bottleneck in stages 1-3 for IBN-a.
    pub fn new(store: &mut ParamStore, last_stride: usize, ibn: bool) -> Result<Self> {
        let conv1 = conv(store, "encoder.conv1", 3, 64, 7, 2, 3)?;
        let bn1 = BatchNorm::new(store, "encoder.bn1", 64)?;
        let stages = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, last_stride)];
        let mut c_in = 64;
        let mut layers = Vec::with_capacity(4);
        for (s, &(planes, blocks, stride)) in stages.iter().enumerate() {
            let use_ibn = ibn && planes != 512;
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let name = format!("encoder.layer{}.{b}", s + 1);
                let stride = if b == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(store, &name, c_in, planes, stride, use_ibn)?);
                c_in = planes * EXPANSION;
            }
            layers.push(stage);
        }
        Ok(Self { conv1, bn1, layers })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        // zero padding is exact for max-pooling non-negative activations
        let mut x = x
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for stage in &self.layers {
            for block in stage {
                x = block.forward(&x, train)?;
            }
        }
        Ok(x)
    }
}

pub enum Encoder {
    Tiny(TinyEncoder),
    ResNet(ResNet50),
}

impl Encoder {
    /// Final convolutional feature map, (N, D, h, w).
    pub fn feature_map(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Encoder::Tiny(e) => e.forward(x, train),
            Encoder::ResNet(e) => e.forward(x, train),
        }
    }
}
