use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adaon::{AdaOnDecoder, AdaOnEncoder};
use super::discriminator::Discriminator;
use super::generator::{Generator, Segmenter};
use super::init::{init_gaussian, init_he, INIT_STD};
use crate::adaon::OrganStyleBank;
use crate::nn::{join, Adam, AdamConfig, HasParams, Param};
use crate::phantom::{Organ, NUM_CLASSES};
use crate::seed::{self, stream};
use crate::{Result, Scalar};

/// Model configuration used in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Global and local streams, exclusion-masked reconstruction.
    Full,
    /// Global stream only with plain L1 reconstruction.
    Cgan,
    /// Global stream only, plus whole-image style and content losses.
    WoSeg,
    /// Segmenter without restyling: organ regions carry the MR intensities.
    WoAdaon,
    /// Full local stream but reconstruction over all pixels.
    WoLexc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Cgan,
        Variant::WoSeg,
        Variant::WoAdaon,
        Variant::WoLexc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Cgan => "cgan",
            Variant::WoSeg => "wo_seg",
            Variant::WoAdaon => "wo_adaon",
            Variant::WoLexc => "wo_lexc",
        }
    }

    pub fn has_local_stream(self) -> bool {
        matches!(self, Variant::Full | Variant::WoAdaon | Variant::WoLexc)
    }

    pub fn uses_adaon(self) -> bool {
        matches!(self, Variant::Full | Variant::WoLexc)
    }

    pub fn masked_reconstruction(self) -> bool {
        matches!(self, Variant::Full | Variant::WoAdaon)
    }

    pub fn whole_image_style(self) -> bool {
        self == Variant::WoSeg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (full, cgan, wo_seg, wo_adaon, wo_lexc)"))
    }
}

/// Frozen encoder, one decoder per organ, and the per-organ style statistics.
#[derive(Debug, Clone)]
pub struct AdaOnSet<T> {
    pub encoder: AdaOnEncoder<T>,
    /// Indexed like [`Organ::ALL`].
    pub decoders: [AdaOnDecoder<T>; 3],
    pub bank: Option<OrganStyleBank>,
}

impl<T: Scalar> AdaOnSet<T> {
    pub fn new() -> Self {
        Self {
            encoder: AdaOnEncoder::new(),
            decoders: [AdaOnDecoder::new(), AdaOnDecoder::new(), AdaOnDecoder::new()],
            bank: None,
        }
    }

    pub fn decoder(&self, organ: Organ) -> &AdaOnDecoder<T> {
        &self.decoders[organ as usize - 1]
    }

    pub fn decoder_mut(&mut self, organ: Organ) -> &mut AdaOnDecoder<T> {
        &mut self.decoders[organ as usize - 1]
    }
}

impl<T: Scalar> Default for AdaOnSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> HasParams<T> for AdaOnSet<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.encoder.collect_params(&join(prefix, "f"), out);
        for (organ, d) in Organ::ALL.iter().zip(&self.decoders) {
            d.collect_params(&join(prefix, organ.key()), out);
        }
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        self.encoder.collect_params_mut(&join(prefix, "f"), out);
        for (organ, d) in Organ::ALL.iter().zip(&mut self.decoders) {
            d.collect_params_mut(&join(prefix, organ.key()), out);
        }
    }
}

/// Optimizer state for the three adversarially trained networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers<T> {
    pub generator: Adam<T>,
    pub discriminator: Adam<T>,
    pub segmenter: Adam<T>,
}

/// Every network of the model, its optimizer state and training position.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub base_channels: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub segmenter: Segmenter<T>,
    pub adaon: AdaOnSet<T>,
    pub optim: Optimizers<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Networks with all parameters zero; see [`ModelBundle::initialized`].
    pub fn new(base_channels: usize, variant: Variant, seed: u64, adam: AdamConfig) -> Result<Self> {
        let generator = Generator::new(base_channels)?;
        let discriminator = Discriminator::new(base_channels)?;
        let segmenter = Segmenter::new(base_channels, NUM_CLASSES)?;
        let optim = Optimizers {
            generator: Adam::new(adam, &generator),
            discriminator: Adam::new(adam, &discriminator),
            segmenter: Adam::new(adam, &segmenter),
        };
        Ok(Self {
            base_channels,
            variant,
            seed,
            epoch: 0,
            generator,
            discriminator,
            segmenter,
            adaon: AdaOnSet::new(),
            optim,
        })
    }

    pub fn initialized(
        base_channels: usize,
        variant: Variant,
        seed: u64,
        adam: AdamConfig,
    ) -> Result<Self> {
        let mut b = Self::new(base_channels, variant, seed, adam)?;
        b.init_params(seed);
        Ok(b)
    }

    /// Gaussian initialization of G, D, S and the decoders; He initialization of
    /// the frozen encoder. Each network draws from its own seed stream.
    pub fn init_params(&mut self, seed: u64) {
        let rng = |tag: u64| seed::rng(seed, &[stream::INIT, tag]);
        init_gaussian(&mut self.generator, INIT_STD, &mut rng(0));
        init_gaussian(&mut self.discriminator, INIT_STD, &mut rng(1));
        init_gaussian(&mut self.segmenter, INIT_STD, &mut rng(2));
        init_he(&mut self.adaon.encoder, &mut seed::rng(seed, &[stream::ENCODER]));
        for (i, d) in self.adaon.decoders.iter_mut().enumerate() {
            init_gaussian(d, INIT_STD, &mut rng(3 + i as u64));
        }
        self.adaon.bank = None;
    }

    /// SHA-256 over base width and every parameter name and shape.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("base_channels={}\n", self.base_channels));
        for (name, p) in self.params() {
            h.update(format!("{name}:{:?}\n", p.shape));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, p)| p.value.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar> HasParams<T> for ModelBundle<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.generator.collect_params(&join(prefix, "G"), out);
        self.discriminator.collect_params(&join(prefix, "D"), out);
        self.segmenter.collect_params(&join(prefix, "S"), out);
        self.adaon.collect_params(&join(prefix, "adaon"), out);
    }

    fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param<T>)>,
    ) {
        self.generator.collect_params_mut(&join(prefix, "G"), out);
        self.discriminator.collect_params_mut(&join(prefix, "D"), out);
        self.segmenter.collect_params_mut(&join(prefix, "S"), out);
        self.adaon.collect_params_mut(&join(prefix, "adaon"), out);
    }
}

/// Digest of a parameter set, for change detection in tests and logs.
pub fn param_digest<T: Scalar>(net: &impl HasParams<T>) -> String {
    let mut h = Sha256::new();
    for (name, p) in net.params() {
        h.update(name.as_bytes());
        let mut buf = Vec::with_capacity(p.len() * T::BYTES);
        for &v in &p.value {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
