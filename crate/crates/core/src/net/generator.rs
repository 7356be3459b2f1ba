use crate::nn::{
    join, ConvTranspose2d, Conv2d, ForwardCtx, HasParams, InstanceNorm, Layer, Param, Relu,
    ResidualBlock, Sequential, Tanh,
};
use crate::{Error, FeatureMap, Result, Scalar};

pub const GENERATOR_BLOCKS: usize = 9;
pub const SEGMENTER_BLOCKS: usize = 6;
pub const GENERATOR_DROPOUT: f64 = 0.5;

fn conv_block<T: Scalar>(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Vec<Layer<T>> {
    vec![
        Layer::Conv(Conv2d::new(cin, cout, k, s, p, false)),
        Layer::Norm(InstanceNorm::new(cout)),
        Layer::Relu(Relu::new()),
    ]
}

fn up_block<T: Scalar>(cin: usize, cout: usize) -> Vec<Layer<T>> {
    vec![
        Layer::ConvTranspose(ConvTranspose2d::new(cin, cout, 3, 2, 1, 1, false)),
        Layer::Norm(InstanceNorm::new(cout)),
        Layer::Relu(Relu::new()),
    ]
}

fn check_side(x_shape: [usize; 3], in_channels: usize) -> Result<()> {
    let [c, h, w] = x_shape;
    if c != in_channels {
        return Err(Error::Shape(format!(
            "expected {in_channels} input channel(s), got {c}"
        )));
    }
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} must have sides divisible by 4"
        )));
    }
    Ok(())
}

/// Residual encoder-decoder trunk shared by the generator and the segmenter.
///
/// With `input_skips` the raw input, average-pooled to the matching resolution
/// (full, then half), is concatenated onto the features entering the second and
/// third encoder convolutions.
#[derive(Debug, Clone)]
pub struct ResidualTranslator<T> {
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_skips: bool,
    stem: Sequential<T>,
    down1: Sequential<T>,
    down2: Sequential<T>,
    blocks: Sequential<T>,
    up: Sequential<T>,
}

impl<T: Scalar> ResidualTranslator<T> {
    pub fn new(
        base_channels: usize,
        in_channels: usize,
        out_channels: usize,
        blocks: usize,
        dropout: f64,
        input_skips: bool,
        output_tanh: bool,
    ) -> Result<Self> {
        if base_channels < 4 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be >= 4, got {base_channels}"
            )));
        }
        let c = base_channels;
        let skip = if input_skips { in_channels } else { 0 };
        let mut up = up_block(4 * c, 2 * c);
        up.extend(up_block(2 * c, c));
        up.push(Layer::ConvTranspose(ConvTranspose2d::new(
            c,
            out_channels,
            7,
            1,
            3,
            0,
            true,
        )));
        if output_tanh {
            up.push(Layer::Tanh(Tanh::new()));
        }
        Ok(Self {
            base_channels,
            in_channels,
            out_channels,
            input_skips,
            stem: Sequential::new(conv_block(in_channels, c, 7, 1, 3)),
            down1: Sequential::new(conv_block(c + skip, 2 * c, 3, 2, 1)),
            down2: Sequential::new(conv_block(2 * c + skip, 4 * c, 3, 2, 1)),
            blocks: Sequential::new(
                (0..blocks)
                    .map(|_| Layer::Residual(ResidualBlock::new(4 * c, dropout)))
                    .collect(),
            ),
            up: Sequential::new(up),
        })
    }

    pub fn residual_blocks(&self) -> impl Iterator<Item = &ResidualBlock<T>> {
        self.blocks.layers.iter().filter_map(|l| match l {
            Layer::Residual(b) => Some(b),
            _ => None,
        })
    }

    pub fn residual_blocks_mut(&mut self) -> impl Iterator<Item = &mut ResidualBlock<T>> {
        self.blocks.layers.iter_mut().filter_map(|l| match l {
            Layer::Residual(b) => Some(b),
            _ => None,
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> Result<FeatureMap<T>> {
        check_side(x.shape(), self.in_channels)?;
        let mut h = self.stem.forward(x, ctx);
        if self.input_skips {
            h = h.concat(x);
        }
        let mut h = self.down1.forward(&h, ctx);
        if self.input_skips {
            h = h.concat(&x.avg_pool(2));
        }
        let h = self.down2.forward(&h, ctx);
        let h = self.blocks.forward(&h, ctx);
        Ok(self.up.forward(&h, ctx))
    }

    /// Accumulate parameter gradients. The input itself is never differentiated.
    pub fn backward(&mut self, grad: &FeatureMap<T>) {
        let c = self.base_channels;
        let g = self.up.backward(grad);
        let g = self.blocks.backward(&g);
        let mut g = self.down2.backward(&g);
        if self.input_skips {
            g = g.split_channels(2 * c).0;
        }
        let mut g = self.down1.backward(&g);
        if self.input_skips {
            g = g.split_channels(c).0;
        }
        self.stem.backward_opt(&g, false);
    }
}

impl<T: Scalar> HasParams<T> for ResidualTranslator<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        let p = |n: &str| join(prefix, n);
        self.stem.collect_params(&p("stem"), out);
        self.down1.collect_params(&p("down1"), out);
        self.down2.collect_params(&p("down2"), out);
        self.blocks.collect_params(&p("blocks"), out);
        self.up.collect_params(&p("up"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        let p = |n: &str| join(prefix, n);
        self.stem.collect_params_mut(&p("stem"), out);
        self.down1.collect_params_mut(&p("down1"), out);
        self.down2.collect_params_mut(&p("down2"), out);
        self.blocks.collect_params_mut(&p("blocks"), out);
        self.up.collect_params_mut(&p("up"), out);
    }
}

/// Global-stream generator: MR in `[-1, 1]` to CT in `(-1, 1)`.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub net: ResidualTranslator<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(base_channels: usize) -> Result<Self> {
        Ok(Self {
            net: ResidualTranslator::new(
                base_channels,
                1,
                1,
                GENERATOR_BLOCKS,
                GENERATOR_DROPOUT,
                true,
                true,
            )?,
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> Result<FeatureMap<T>> {
        self.net.forward(x, ctx)
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) {
        self.net.backward(grad)
    }
}

/// Organ segmenter producing a per-pixel distribution over the four classes.
#[derive(Debug, Clone)]
pub struct Segmenter<T> {
    pub net: ResidualTranslator<T>,
    probs: Option<FeatureMap<T>>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(base_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            net: ResidualTranslator::new(
                base_channels,
                1,
                num_classes,
                SEGMENTER_BLOCKS,
                0.0,
                false,
                false,
            )?,
            probs: None,
        })
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, ctx: &mut ForwardCtx) -> Result<FeatureMap<T>> {
        let logits = self.net.forward(x, ctx)?;
        let probs = crate::nn::softmax_channels(&logits);
        self.probs = Some(probs.clone());
        Ok(probs)
    }

    /// Takes the gradient with respect to the probabilities.
    pub fn backward(&mut self, grad: &FeatureMap<T>) {
        let probs = self.probs.take().expect("segmenter backward without forward");
        let g = crate::nn::softmax_backward(&probs, grad);
        self.net.backward(&g)
    }

    /// Backward from a gradient already expressed with respect to the logits.
    pub fn backward_logits(&mut self, grad: &FeatureMap<T>) {
        self.probs = None;
        self.net.backward(grad)
    }
}

macro_rules! delegate_params {
    ($ty:ident) => {
        impl<T: Scalar> HasParams<T> for $ty<T> {
            fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
                self.net.collect_params(prefix, out)
            }

            fn collect_params_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut Param<T>)>,
            ) {
                self.net.collect_params_mut(prefix, out)
            }
        }
    };
}

delegate_params!(Generator);
delegate_params!(Segmenter);
pub(crate) use delegate_params;
