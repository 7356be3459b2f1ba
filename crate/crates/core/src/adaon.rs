//! Organ-wise restyling: statistic alignment, style bank, decoder training,
//! the local stream and its fusion with the global stream.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::net::{stage_factors, AdaOnDecoder, AdaOnEncoder, AdaOnSet};
use crate::nn::{Adam, AdamConfig, HasParams};
use crate::phantom::Organ;
use crate::{Error, FeatureMap, Result, Scalar};

/// Content variance below which a channel counts as degenerate; its std is
/// then replaced by `sqrt(ADAIN_EPS)` in the division.
pub const ADAIN_EPS: f64 = 1e-5;

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.std).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaInOutput<T> {
    pub features: FeatureMap<T>,
    /// Content channels whose variance fell below [`ADAIN_EPS`].
    pub degenerate_channels: Vec<usize>,
}

/// Unmasked channel statistics.
pub fn channel_statistics<T: Scalar>(feats: &FeatureMap<T>) -> ChannelStats {
    moments(feats, None).expect("feature map is nonempty")
}

fn moments<T: Scalar>(feats: &FeatureMap<T>, mask: Option<&[bool]>) -> Option<ChannelStats> {
    let n = match mask {
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => feats.plane_len(),
    };
    if n == 0 {
        return None;
    }
    let inside = |i: usize| mask.map_or(true, |m| m[i]);
    let mut mean = Vec::with_capacity(feats.channels());
    let mut std = Vec::with_capacity(feats.channels());
    for c in 0..feats.channels() {
        let plane = feats.channel(c);
        let mu = plane
            .iter()
            .enumerate()
            .filter(|(i, _)| inside(*i))
            .map(|(_, v)| v.f64())
            .sum::<f64>()
            / n as f64;
        let var = plane
            .iter()
            .enumerate()
            .filter(|(i, _)| inside(*i))
            .map(|(_, v)| (v.f64() - mu).powi(2))
            .sum::<f64>()
            / n as f64;
        mean.push(mu);
        std.push(var.sqrt());
    }
    Some(ChannelStats { mean, std })
}

/// Statistics over the mask-positive locations only.
pub fn masked_statistics<T: Scalar>(feats: &FeatureMap<T>, mask: &[bool]) -> Result<ChannelStats> {
    if mask.len() != feats.plane_len() {
        return Err(Error::Shape(format!(
            "mask has {} entries, feature plane {}",
            mask.len(),
            feats.plane_len()
        )));
    }
    match mask.iter().filter(|&&b| b).count() {
        0 => Err(Error::EmptyMask),
        1 => Err(Error::DegenerateMask),
        _ => Ok(moments(feats, Some(mask)).expect("nonempty")),
    }
}

/// Re-normalize `content` to the given style statistics.
pub fn adain_with_stats<T: Scalar>(
    content: &FeatureMap<T>,
    content_stats: &ChannelStats,
    style: &ChannelStats,
) -> Result<AdaInOutput<T>> {
    if content.channels() != style.channels() || content_stats.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "adain channel mismatch: content {}, style {}",
            content.channels(),
            style.channels()
        )));
    }
    let mut out = content.clone();
    let mut degenerate_channels = Vec::new();
    for c in 0..content.channels() {
        let var = content_stats.std[c].powi(2);
        if var < ADAIN_EPS {
            degenerate_channels.push(c);
        }
        let scale = style.std[c] / content_stats.std[c].max(ADAIN_EPS.sqrt());
        let (mu_c, mu_s) = (content_stats.mean[c], style.mean[c]);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = T::c(scale * (v.f64() - mu_c) + mu_s));
    }
    Ok(AdaInOutput {
        features: out,
        degenerate_channels,
    })
}

/// Align the per-channel mean and std of `content` with those of `style`.
pub fn adain<T: Scalar>(content: &FeatureMap<T>, style: &FeatureMap<T>) -> Result<AdaInOutput<T>> {
    adain_with_stats(content, &channel_statistics(content), &channel_statistics(style))
}

/// Downsample a pixel mask by `factor`: a feature location is inside when any
/// pixel of its footprint is.
pub fn pool_mask(mask: &[bool], height: usize, width: usize, factor: usize) -> Vec<bool> {
    let (h, w) = (height / factor, width / factor);
    let mut out = vec![false; h * w];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                out[(y / factor) * w + x / factor] = true;
            }
        }
    }
    out
}

/// Masks at the resolution of each encoder stage.
fn stage_masks(mask: &[bool], height: usize, width: usize) -> [Vec<bool>; 3] {
    stage_factors().map(|f| pool_mask(mask, height, width, f))
}

/// Clamp into the normalized intensity range `[-1, 1]`.
fn clamp_unit<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|v| v.max(-T::one()).min(T::one()))
}

pub fn apply_mask<T: Scalar>(img: &FeatureMap<T>, mask: &[bool]) -> FeatureMap<T> {
    let mut out = img.clone();
    let n = img.plane_len();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask[i % n] {
            *v = T::zero();
        }
    }
    out
}

/// Style of one organ: stage statistics averaged over its exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganStyle {
    pub exemplars: usize,
    pub layers: Vec<ChannelStats>,
}

/// Reference style per organ, keyed `B`, `R`, `G`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrganStyleBank {
    pub organs: BTreeMap<String, OrganStyle>,
}

impl OrganStyleBank {
    pub fn get(&self, organ: Organ) -> Option<&OrganStyle> {
        self.organs.get(organ.key())
    }

    /// Average masked statistics of every stage over the exemplars of each organ.
    ///
    /// Exemplars are masked CT images in normalized units with the organ mask.
    pub fn from_exemplars<T: Scalar>(
        encoder: &mut AdaOnEncoder<T>,
        exemplars: &[(Organ, FeatureMap<T>, Vec<bool>)],
    ) -> Result<Self> {
        let mut bank = OrganStyleBank::default();
        for organ in Organ::ALL {
            let mut sums: Option<Vec<ChannelStats>> = None;
            let mut count = 0usize;
            for (_, img, mask) in exemplars.iter().filter(|(o, _, _)| *o == organ) {
                let feats = encoder.forward(&apply_mask(img, mask))?;
                let masks = stage_masks(mask, img.height(), img.width());
                let stats: Result<Vec<_>> = feats
                    .iter()
                    .zip(&masks)
                    .map(|(f, m)| masked_statistics(f, m))
                    .collect();
                // tiny or absent structures carry no usable statistics
                let Ok(stats) = stats else { continue };
                count += 1;
                match &mut sums {
                    None => sums = Some(stats),
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(&stats) {
                            a.mean.iter_mut().zip(&s.mean).for_each(|(x, y)| *x += y);
                            a.std.iter_mut().zip(&s.std).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            if let Some(mut layers) = sums {
                for l in &mut layers {
                    l.mean.iter_mut().for_each(|v| *v /= count as f64);
                    l.std.iter_mut().for_each(|v| *v /= count as f64);
                }
                bank.organs.insert(
                    organ.key().to_string(),
                    OrganStyle {
                        exemplars: count,
                        layers,
                    },
                );
            }
        }
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, style) in &self.organs {
            if style.exemplars == 0 || style.layers.len() != 3 {
                return Err(Error::InvalidConfig(format!("style `{key}` is incomplete")));
            }
            if !style.layers.iter().all(|l| l.is_finite()) {
                return Err(Error::NonFinite {
                    term: format!("style.{key}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaOnConfig {
    pub iterations: usize,
    pub lr: f64,
    pub content_weight: f64,
    pub style_weight: f64,
}

impl Default for AdaOnConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            lr: 1e-3,
            content_weight: 1.0,
            style_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaOnLoss {
    pub content: f64,
    pub style: f64,
}

/// Content and style losses of a decoded image plus their gradient with respect
/// to the (masked) decoded image.
struct StyleContentTerms<T> {
    loss: AdaOnLoss,
    grad: FeatureMap<T>,
}

/// Gradient of `sum_c (mu_c - mu*_c)^2 + (sigma_c - sigma*_c)^2` over masked locations.
fn style_gradient<T: Scalar>(
    feats: &FeatureMap<T>,
    mask: &[bool],
    target: &ChannelStats,
) -> Result<(f64, FeatureMap<T>)> {
    let stats = masked_statistics(feats, mask)?;
    let n = mask.iter().filter(|&&b| b).count() as f64;
    let mut loss = 0.0;
    let mut grad = FeatureMap::zeros(feats.channels(), feats.height(), feats.width());
    for c in 0..feats.channels() {
        let dm = stats.mean[c] - target.mean[c];
        let ds = stats.std[c] - target.std[c];
        loss += dm * dm + ds * ds;
        let sigma = stats.std[c].max(1e-8);
        let plane = feats.channel(c);
        for (i, g) in grad.channel_mut(c).iter_mut().enumerate() {
            if mask[i] {
                let centered = plane[i].f64() - stats.mean[c];
                *g = T::c(2.0 * dm / n + 2.0 * ds * centered / (n * sigma));
            }
        }
    }
    Ok((loss, grad))
}

fn style_content_terms<T: Scalar>(
    encoder: &mut AdaOnEncoder<T>,
    decoded_masked: &FeatureMap<T>,
    masks: &[Vec<bool>; 3],
    target: &FeatureMap<T>,
    style: &OrganStyle,
    config: &AdaOnConfig,
) -> Result<StyleContentTerms<T>> {
    let feats = encoder.forward(decoded_masked)?;
    let mut grads: [Option<FeatureMap<T>>; 3] = [None, None, None];
    let mut style_loss = 0.0;
    for l in 0..3 {
        let (loss, g) = style_gradient(&feats[l], &masks[l], &style.layers[l])?;
        style_loss += loss;
        grads[l] = Some(g.map(|v| v * T::c(config.style_weight)));
    }
    let mut content_loss = 0.0;
    {
        let f3 = &feats[2];
        let m3 = &masks[2];
        let n = (m3.iter().filter(|&&b| b).count() * f3.channels()) as f64;
        let mut g3 = FeatureMap::zeros(f3.channels(), f3.height(), f3.width());
        let plane = f3.plane_len();
        for (i, ((g, &a), &b)) in g3
            .data_mut()
            .iter_mut()
            .zip(f3.data())
            .zip(target.data())
            .enumerate()
        {
            if m3[i % plane] {
                let d = a.f64() - b.f64();
                content_loss += d * d / n;
                *g = T::c(config.content_weight * 2.0 * d / n);
            }
        }
        if let Some(g) = &mut grads[2] {
            g.add_assign(&g3);
        }
    }
    let grad = encoder
        .backward(grads)
        .expect("stage gradients were provided");
    Ok(StyleContentTerms {
        loss: AdaOnLoss {
            content: content_loss,
            style: style_loss,
        },
        grad,
    })
}

/// Stylization target `t` at the deepest stage for one masked content image.
fn stylization_target<T: Scalar>(
    encoder: &mut AdaOnEncoder<T>,
    content: &FeatureMap<T>,
    mask: &[bool],
    style: &OrganStyle,
) -> Result<AdaInOutput<T>> {
    let feats = encoder.forward(&apply_mask(content, mask))?;
    let m3 = pool_mask(mask, content.height(), content.width(), stage_factors()[2]);
    let stats = moments(&feats[2], Some(&m3)).ok_or(Error::EmptyMask)?;
    adain_with_stats(&feats[2], &stats, &style.layers[2])
}

/// Style and content losses of a whole synthesized image, for training without
/// organ masks: style statistics come from the real CT, the content target is
/// the deepest MR feature map restyled to those statistics.
///
/// Returns the losses and their gradient with respect to `output`.
pub fn whole_image_terms<T: Scalar>(
    encoder: &mut AdaOnEncoder<T>,
    output: &FeatureMap<T>,
    mr: &FeatureMap<T>,
    ct: &FeatureMap<T>,
) -> Result<(AdaOnLoss, FeatureMap<T>)> {
    let style_feats = encoder.forward(ct)?;
    let style = OrganStyle {
        exemplars: 1,
        layers: style_feats.iter().map(channel_statistics).collect(),
    };
    let content = encoder.forward(mr)?;
    let t = adain_with_stats(&content[2], &channel_statistics(&content[2]), &style.layers[2])?.features;
    let all = vec![true; output.plane_len()];
    let masks = stage_masks(&all, output.height(), output.width());
    let terms = style_content_terms(encoder, output, &masks, &t, &style, &AdaOnConfig::default())?;
    Ok((terms.loss, terms.grad))
}

/// Content and style losses of a decoder on one exemplar, without updating it.
pub fn adaon_losses<T: Scalar>(
    encoder: &mut AdaOnEncoder<T>,
    decoder: &mut AdaOnDecoder<T>,
    content: &FeatureMap<T>,
    mask: &[bool],
    style: &OrganStyle,
) -> Result<AdaOnLoss> {
    let t = stylization_target(encoder, content, mask, style)?.features;
    let decoded = apply_mask(&clamp_unit(&decoder.forward(&t)), mask);
    let masks = stage_masks(mask, content.height(), content.width());
    let terms = style_content_terms(
        encoder,
        &decoded,
        &masks,
        &t,
        style,
        &AdaOnConfig::default(),
    )?;
    Ok(terms.loss)
}

/// Train one organ's decoder against the frozen encoder.
///
/// `contents` are normalized MR images with the organ mask. Returns the loss
/// curve, one entry per iteration. On a non-finite loss the decoder is restored
/// to its last finite state and an error is returned.
pub fn train_adaon<T: Scalar>(
    organ: Organ,
    encoder: &mut AdaOnEncoder<T>,
    decoder: &mut AdaOnDecoder<T>,
    contents: &[(FeatureMap<T>, Vec<bool>)],
    style: &OrganStyle,
    config: &AdaOnConfig,
    rng: &mut impl Rng,
) -> Result<Vec<AdaOnLoss>> {
    let usable: Vec<&(FeatureMap<T>, Vec<bool>)> = contents
        .iter()
        .filter(|(_, m)| m.iter().filter(|&&b| b).count() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no usable {} content exemplar",
            organ.name()
        )));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        decoder,
    );
    let mut last_good = decoder.clone();
    let mut curve = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let (content, mask) = usable[rng.gen_range(0..usable.len())];
        let t = stylization_target(encoder, content, mask, style)?.features;
        let raw = decoder.forward(&t);
        let decoded = apply_mask(&clamp_unit(&raw), mask);
        let masks = stage_masks(mask, content.height(), content.width());
        let terms = style_content_terms(encoder, &decoded, &masks, &t, style, config)?;
        if !(terms.loss.content.is_finite() && terms.loss.style.is_finite()) {
            *decoder = last_good;
            return Err(Error::NonFinite {
                term: format!("adaon.{}", organ.key()),
            });
        }
        // no gradient through saturated outputs
        let grad = apply_mask(&terms.grad, mask).zip_map(&raw, |g, v| {
            if v.abs() > T::one() {
                T::zero()
            } else {
                g
            }
        });
        decoder.backward(&grad);
        adam.update(decoder);
        if decoder.params().iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite())) {
            last_good = decoder.clone();
        } else {
            *decoder = last_good;
            return Err(Error::NonFinite {
                term: format!("adaon.{}.params", organ.key()),
            });
        }
        curve.push(terms.loss);
    }
    Ok(curve)
}

/// How the local stream renders an organ region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalMode {
    /// Decode the restyled MR features with the organ's decoder.
    Restyle,
    /// Copy the normalized MR intensities.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalStreamOutput<T> {
    /// Full-frame output per organ (indexed like [`Organ::ALL`]), zero outside its mask.
    pub per_organ: [Option<FeatureMap<T>>; 3],
    pub combined: FeatureMap<T>,
    pub masks: [Vec<bool>; 3],
}

impl<T: Scalar> LocalStreamOutput<T> {
    pub fn union_mask(&self) -> Vec<bool> {
        union(&self.masks)
    }
}

pub fn union(masks: &[Vec<bool>; 3]) -> Vec<bool> {
    (0..masks[0].len())
        .map(|i| masks.iter().any(|m| m[i]))
        .collect()
}

/// Render every organ present in `masks` and sum the results.
///
/// `mr` is the normalized MR. Restyled outputs are clamped into `[-1, 1]`.
pub fn local_stream<T: Scalar>(
    mr: &FeatureMap<T>,
    masks: &[Vec<bool>; 3],
    adaon: &mut AdaOnSet<T>,
    mode: LocalMode,
) -> Result<LocalStreamOutput<T>> {
    let n = mr.plane_len();
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::Shape("organ mask does not match the image".into()));
    }
    let overlap = (0..n)
        .filter(|&i| masks.iter().filter(|m| m[i]).count() > 1)
        .count();
    if overlap > 0 {
        return Err(Error::OverlappingMasks(overlap));
    }
    let mut combined = FeatureMap::zeros(1, mr.height(), mr.width());
    let mut per_organ: [Option<FeatureMap<T>>; 3] = [None, None, None];
    for (k, organ) in Organ::ALL.into_iter().enumerate() {
        let mask = &masks[k];
        if !mask.iter().any(|&b| b) {
            continue;
        }
        let out = match mode {
            LocalMode::PassThrough => apply_mask(mr, mask),
            LocalMode::Restyle => {
                let style = adaon
                    .bank
                    .as_ref()
                    .and_then(|b| b.get(organ))
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("no style for {}", organ.name()))
                    })?
                    .clone();
                let t = stylization_target(&mut adaon.encoder, mr, mask, &style)?.features;
                let decoded = adaon.decoder_mut(organ).forward(&t);
                apply_mask(&clamp_unit(&decoded), mask)
            }
        };
        combined.add_assign(&out);
        per_organ[k] = Some(out);
    }
    Ok(LocalStreamOutput {
        per_organ,
        combined,
        masks: masks.clone(),
    })
}

/// `global * (1 - union) + local`, where `local` vanishes outside the union.
pub fn fuse<T: Scalar>(
    global: &FeatureMap<T>,
    local: &FeatureMap<T>,
    union_mask: &[bool],
) -> Result<FeatureMap<T>> {
    if global.shape() != local.shape() || union_mask.len() != global.plane_len() {
        return Err(Error::Shape(format!(
            "fuse: global {:?}, local {:?}, mask {}",
            global.shape(),
            local.shape(),
            union_mask.len()
        )));
    }
    let n = global.plane_len();
    let mut out = global.clone();
    for (i, (o, &l)) in out.data_mut().iter_mut().zip(local.data()).enumerate() {
        if union_mask[i % n] {
            *o = l;
        }
    }
    Ok(out)
}
