//! Feature encoder and decoder used by the organ restyling modules.

use crate::nn::{join, Conv2d, ConvTranspose2d, ForwardCtx, HasParams, Layer, Param, Relu, Sequential};
use crate::{Error, FeatureMap, Result, Scalar};

pub const ENCODER_WIDTHS: [usize; 3] = [8, 16, 32];
pub const ENCODER_STRIDES: [usize; 3] = [1, 2, 1];

/// Downsampling factor of each stage output relative to the input.
pub fn stage_factors() -> [usize; 3] {
    let [a, b, c] = ENCODER_STRIDES;
    [a, a * b, a * b * c]
}

/// Frozen three-stage convolutional encoder; every stage output is a style layer.
#[derive(Debug, Clone)]
pub struct AdaOnEncoder<T> {
    pub stages: [Sequential<T>; 3],
}

impl<T: Scalar> AdaOnEncoder<T> {
    pub fn new() -> Self {
        let [a, b, c] = ENCODER_WIDTHS;
        let stage = |cin, cout, stride| {
            Sequential::new(vec![
                Layer::Conv(Conv2d::new(cin, cout, 3, stride, 1, true)),
                Layer::Relu(Relu::new()),
            ])
        };
        Self {
            stages: [
                stage(1, a, ENCODER_STRIDES[0]),
                stage(a, b, ENCODER_STRIDES[1]),
                stage(b, c, ENCODER_STRIDES[2]),
            ],
        }
    }

    /// Activations of the three stages, at the resolutions of [`stage_factors`].
    pub fn forward(&mut self, x: &FeatureMap<T>) -> Result<[FeatureMap<T>; 3]> {
        let [c, h, w] = x.shape();
        let f = stage_factors()[2];
        if c != 1 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder expects 1xHxW with sides divisible by {f}, got {c}x{h}x{w}"
            )));
        }
        let mut ctx = ForwardCtx::eval();
        let f1 = self.stages[0].forward(x, &mut ctx);
        let f2 = self.stages[1].forward(&f1, &mut ctx);
        let f3 = self.stages[2].forward(&f2, &mut ctx);
        Ok([f1, f2, f3])
    }

    /// Input gradient from gradients at any subset of the stage outputs.
    ///
    /// The encoder is frozen; parameter gradients it accumulates are discarded.
    pub fn backward(&mut self, grads: [Option<FeatureMap<T>>; 3]) -> Option<FeatureMap<T>> {
        let mut acc: Option<FeatureMap<T>> = None;
        for (stage, g) in grads.into_iter().enumerate().rev() {
            acc = match (acc, g) {
                (Some(mut a), Some(g)) => {
                    a.add_assign(&g);
                    Some(a)
                }
                (a, g) => a.or(g),
            };
            acc = acc.map(|a| self.stages[stage].backward(&a));
        }
        self.zero_grad();
        acc
    }
}

impl<T: Scalar> Default for AdaOnEncoder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> HasParams<T> for AdaOnEncoder<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.collect_params(&join(prefix, &format!("phi{}", i + 1)), out);
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.collect_params_mut(&join(prefix, &format!("phi{}", i + 1)), out);
        }
    }
}

/// Decoder mirroring the encoder: deepest features back to a one-channel image.
/// The output is linear; callers clamp into the normalized intensity range.
#[derive(Debug, Clone)]
pub struct AdaOnDecoder<T> {
    pub net: Sequential<T>,
}

impl<T: Scalar> AdaOnDecoder<T> {
    pub fn new() -> Self {
        let [a, b, c] = ENCODER_WIDTHS;
        let up = |cin, cout, stride| match stride {
            1 => Layer::Conv(Conv2d::new(cin, cout, 3, 1, 1, true)),
            _ => Layer::ConvTranspose(ConvTranspose2d::new(cin, cout, 3, stride, 1, stride - 1, true)),
        };
        Self {
            net: Sequential::new(vec![
                up(c, b, ENCODER_STRIDES[2]),
                Layer::Relu(Relu::new()),
                up(b, a, ENCODER_STRIDES[1]),
                Layer::Relu(Relu::new()),
                up(a, 1, ENCODER_STRIDES[0]),
            ]),
        }
    }

    pub fn forward(&mut self, t: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(t.channels(), ENCODER_WIDTHS[2], "decoder input channels");
        self.net.forward(t, &mut ForwardCtx::eval())
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) {
        self.net.backward(grad);
    }
}

impl<T: Scalar> Default for AdaOnDecoder<T> {
    fn default() -> Self {
        Self::new()
    }
}

super::generator::delegate_params!(AdaOnDecoder);
