use candle_core::{Tensor, Var, D};

use super::store::{Init, ParamStore};
use crate::Result;

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        opts: ConvOpts,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel.0, kernel.1],
            Init::Kaiming {
                fan: c_out * kernel.0 * kernel.1,
            },
        )?;
        let bias = if opts.bias {
            Some(store.param(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: opts.stride,
            padding: opts.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Batch normalization over (N, C) or (N, C, H, W). Training mode uses batch
/// statistics and updates the running averages in place.
pub struct BatchNorm {
    pub(crate) weight: Var,
    pub(crate) bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

fn channel_shape(x: &Tensor, c: usize) -> Vec<usize> {
    let mut shape = vec![1; x.rank()];
    shape[1] = c;
    shape
}

fn reduce_dims(rank: usize) -> Vec<usize> {
    (0..rank).filter(|&d| d != 1).collect()
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = channel_shape(x, c);
        let (centered, denom) = if train {
            let dims = reduce_dims(x.rank());
            let count = x.elem_count() / c;
            let mean = x.mean_keepdim(dims.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(dims.as_slice())?;
            let m = self.momentum;
            let unbiased = (var.flatten_all()?.detach() * (count as f64 / (count.max(2) - 1) as f64))?;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()?.detach() * m)?)?,
            )?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (centered, (var + self.eps)?.sqrt()?)
        } else {
            let mean = self.running_mean.as_tensor().reshape(shape.as_slice())?;
            let var = self.running_var.as_tensor().reshape(shape.as_slice())?;
            (x.broadcast_sub(&mean)?, (var + self.eps)?.sqrt()?)
        };
        let xhat = centered.broadcast_div(&denom)?;
        Ok(xhat
            .broadcast_mul(&self.weight.as_tensor().reshape(shape.as_slice())?)?
            .broadcast_add(&self.bias.as_tensor().reshape(shape.as_slice())?)?)
    }
}

/// Affine instance normalization over (N, C, H, W).
pub struct InstanceNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = channel_shape(x, c);
        let mean = x.mean_keepdim((2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((2, 3))?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.as_tensor().reshape(shape.as_slice())?)?
            .broadcast_add(&self.bias.as_tensor().reshape(shape.as_slice())?)?)
    }
}

/// Instance norm on the first half of the channels, batch norm on the rest.
pub struct Ibn {
    half: usize,
    inorm: InstanceNorm,
    bnorm: BatchNorm,
}

impl Ibn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let half = channels / 2;
        Ok(Self {
            half,
            inorm: InstanceNorm::new(store, &format!("{name}.IN"), half)?,
            bnorm: BatchNorm::new(store, &format!("{name}.BN"), channels - half)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let a = self.inorm.forward(&x.narrow(1, 0, self.half)?)?;
        let b = self.bnorm.forward(&x.narrow(1, self.half, c - self.half)?, train)?;
        Ok(Tensor::cat(&[a, b], 1)?)
    }
}

pub enum Norm {
    Batch(BatchNorm),
    Ibn(Ibn),
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ibn: bool) -> Result<Self> {
        Ok(if ibn {
            Norm::Ibn(Ibn::new(store, name, channels)?)
        } else {
            Norm::Batch(BatchNorm::new(store, name, channels)?)
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Norm::Batch(bn) => bn.forward(x, train),
            Norm::Ibn(ibn) => ibn.forward(x, train),
        }
    }
}

/// Fully connected layer without a bias term.
pub struct LinearNoBias {
    weight: Var,
}

impl LinearNoBias {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[d_out, d_in], Init::Kaiming { fan: d_in })?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Numerically stable softmax along the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
