use crate::nn::{Conv2d, ForwardCtx, HasParams, InstanceNorm, Layer, Param, Relu, Sequential};
use crate::{Error, FeatureMap, Result, Scalar};

/// `(kernel, stride)` of the six convolutions.
pub const DISCRIMINATOR_LAYERS: [(usize, usize); 6] = [(4, 2), (4, 2), (3, 1), (3, 1), (3, 1), (3, 1)];

/// Smallest input side; it leaves a 2x2 map for the first normalized layer.
pub const DISCRIMINATOR_MIN_SIDE: usize = 8;

/// Side length of the input window seen by one patch response.
pub fn receptive_field() -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for (k, s) in DISCRIMINATOR_LAYERS {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

/// Patch discriminator with raw (unsquashed) responses.
///
/// Its normalization layers keep running statistics, so in evaluation passes every
/// response depends only on its receptive field.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub base_channels: usize,
    pub net: Sequential<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(base_channels: usize) -> Result<Self> {
        if base_channels < 4 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be >= 4, got {base_channels}"
            )));
        }
        let c = base_channels;
        let widths = [c, 2 * c, 4 * c, 4 * c, 4 * c, 1];
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, (&(k, s), &cout)) in DISCRIMINATOR_LAYERS.iter().zip(&widths).enumerate() {
            let first = i == 0;
            let last = i + 1 == widths.len();
            layers.push(Layer::Conv(Conv2d::new(cin, cout, k, s, 1, first || last)));
            if !last {
                if !first {
                    layers.push(Layer::Norm(InstanceNorm::with_running_stats(cout)));
                }
                layers.push(Layer::Relu(Relu::new()));
            }
            cin = cout;
        }
        Ok(Self {
            base_channels,
            net: Sequential::new(layers),
        })
    }

    pub fn output_side(side: usize) -> usize {
        DISCRIMINATOR_LAYERS
            .iter()
            .fold(side, |n, &(k, s)| (n + 2 - k) / s + 1)
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> Result<FeatureMap<T>> {
        let [c, h, w] = x.shape();
        if c != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {c}")));
        }
        if h < DISCRIMINATOR_MIN_SIDE || w < DISCRIMINATOR_MIN_SIDE {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is below the {DISCRIMINATOR_MIN_SIDE}x{DISCRIMINATOR_MIN_SIDE} minimum"
            )));
        }
        Ok(self.net.forward(x, ctx))
    }

    /// Returns the gradient with respect to the input image.
    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        self.net.backward(grad)
    }

    /// Parameter gradients only.
    pub fn backward_params(&mut self, grad: &FeatureMap<T>) {
        self.net.backward_opt(grad, false);
    }
}

super::generator::delegate_params!(Discriminator);
