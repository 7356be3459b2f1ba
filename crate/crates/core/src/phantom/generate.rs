//! Procedural 2D pelvic phantom with paired MR/CT renderings.
//!
//! Geometry is given in fractions of the grid side, `x` to the right and `y`
//! downwards. Both modalities share body outline and bones; bladder filling,
//! rectum position and rectal gas may differ between them.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{ImageSlice, LabelMap, Modality, Organ, PairedRecord};
use crate::seed::{self, stream};
use crate::{Error, Result};

/// CT intensities in HU.
pub mod ct_value {
    pub const AIR: f32 = -1000.0;
    pub const TISSUE: f32 = 0.0;
    pub const BONE: f32 = 700.0;
    pub const BLADDER: f32 = 10.0;
    pub const RECTUM: f32 = 40.0;
    pub const GAS: f32 = -1000.0;
}

/// MR intensities in arbitrary units before bias field and noise.
pub mod mr_value {
    pub const AIR: f32 = 0.0;
    pub const TISSUE: f32 = 0.45;
    pub const BONE: f32 = 0.12;
    pub const BLADDER: f32 = 0.9;
    pub const RECTUM: f32 = 0.28;
    pub const GAS: f32 = 0.04;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub radii: (f64, f64),
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        dx * dx + dy * dy <= 1.0
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            center: self.center,
            radii: (self.radii.0 * s, self.radii.1 * s),
        }
    }

    fn shifted(&self, d: (f64, f64)) -> Ellipse {
        Ellipse {
            center: (self.center.0 + d.0, self.center.1 + d.1),
            radii: self.radii,
        }
    }

    fn boundary(&self, n: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..n).map(move |i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            (
                self.center.0 + self.radii.0 * t.cos(),
                self.center.1 + self.radii.1 * t.sin(),
            )
        })
    }
}

impl From<Circle> for Ellipse {
    fn from(c: Circle) -> Self {
        Ellipse {
            center: c.center,
            radii: (c.radius, c.radius),
        }
    }
}

/// Which MR/CT differences a sampled phantom carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inconsistency {
    None,
    Bladder,
    Gas,
    Both,
    Random,
}

impl std::str::FromStr for Inconsistency {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "bladder" => Ok(Self::Bladder),
            "gas" => Ok(Self::Gas),
            "both" => Ok(Self::Both),
            "random" => Ok(Self::Random),
            other => Err(format!(
                "unknown inconsistency `{other}` (none, bladder, gas, both, random)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    pub body: Ellipse,
    pub bones: Vec<Circle>,
    /// Bladder at unit filling; each modality scales the radii.
    pub bladder: Ellipse,
    pub rectum: Circle,
    /// Displacement of the rectum (and its gas) in the CT relative to the MR.
    pub rectum_shift_ct: (f64, f64),
    /// Gas pocket center relative to the rectum center.
    pub gas_offset: (f64, f64),
    pub gas_radius: f64,
    pub bladder_scale_mr: f64,
    pub bladder_scale_ct: f64,
    pub gas_present_mr: bool,
    pub gas_present_ct: bool,
    /// Gaussian noise std in the normalized `[-1, 1]` representation of each modality.
    pub noise_sigma: f64,
    pub mr_bias_field_amplitude: f64,
    pub seed: u64,
}

impl PhantomConfig {
    /// Reference anatomy without jitter or injected inconsistency.
    pub fn reference(size: usize, seed: u64) -> Self {
        Self {
            size,
            body: Ellipse {
                center: (0.5, 0.5),
                radii: (0.43, 0.39),
            },
            bones: vec![
                Circle {
                    center: (0.24, 0.55),
                    radius: 0.065,
                },
                Circle {
                    center: (0.76, 0.55),
                    radius: 0.065,
                },
                Circle {
                    center: (0.5, 0.8),
                    radius: 0.035,
                },
            ],
            bladder: Ellipse {
                center: (0.5, 0.34),
                radii: (0.12, 0.09),
            },
            rectum: Circle {
                center: (0.5, 0.62),
                radius: 0.07,
            },
            rectum_shift_ct: (0.0, 0.0),
            gas_offset: (0.0, 0.0),
            gas_radius: 0.04,
            bladder_scale_mr: 1.0,
            bladder_scale_ct: 1.0,
            gas_present_mr: true,
            gas_present_ct: true,
            noise_sigma: 0.0,
            mr_bias_field_amplitude: 0.0,
            seed,
        }
    }

    /// Jittered anatomy with inconsistencies drawn according to `mode`.
    ///
    /// Draws that violate the geometric constraints at this grid size are
    /// rejected and redrawn from the next attempt stream.
    pub fn sample(size: usize, seed: u64, mode: Inconsistency) -> Self {
        const ATTEMPTS: u64 = 256;
        for attempt in 0..ATTEMPTS {
            let c = Self::sample_attempt(size, seed, mode, attempt);
            if c.validate().is_ok() {
                return c;
            }
        }
        Self::sample_attempt(size, seed, mode, ATTEMPTS)
    }

    fn sample_attempt(size: usize, seed: u64, mode: Inconsistency, attempt: u64) -> Self {
        let mut rng = seed::rng(seed, &[stream::PHANTOM_GEOMETRY, attempt]);
        let mut c = Self::reference(size, seed);
        let jit = |r: &mut rand_chacha::ChaCha8Rng, a: f64| r.gen_range(-a..=a);
        c.body.radii.0 += jit(&mut rng, 0.015);
        c.body.radii.1 += jit(&mut rng, 0.015);
        c.bladder.center.0 += jit(&mut rng, 0.02);
        c.bladder.center.1 += jit(&mut rng, 0.015);
        c.bladder.radii.0 *= 1.0 + jit(&mut rng, 0.08);
        c.bladder.radii.1 *= 1.0 + jit(&mut rng, 0.08);
        c.rectum.center.0 += jit(&mut rng, 0.02);
        c.rectum.center.1 += jit(&mut rng, 0.01);
        c.rectum.radius *= 1.0 + jit(&mut rng, 0.08);
        c.gas_radius *= 1.0 + jit(&mut rng, 0.1);
        let room = (c.rectum.radius - c.gas_radius - 1.0 / size as f64).max(0.0);
        c.gas_offset = (jit(&mut rng, room * 0.5), jit(&mut rng, room * 0.5));
        for b in &mut c.bones {
            b.center.0 += jit(&mut rng, 0.01);
            b.center.1 += jit(&mut rng, 0.01);
        }
        c.noise_sigma = 0.01;
        c.mr_bias_field_amplitude = 0.1;

        let mode = match mode {
            Inconsistency::Random => match rng.gen_range(0..4) {
                0 => Inconsistency::None,
                1 => Inconsistency::Bladder,
                2 => Inconsistency::Gas,
                _ => Inconsistency::Both,
            },
            m => m,
        };
        let base_scale = rng.gen_range(0.85..1.15);
        c.bladder_scale_mr = base_scale;
        c.bladder_scale_ct = base_scale;
        let gas = rng.gen_bool(0.5);
        c.gas_present_mr = gas;
        c.gas_present_ct = gas;
        if matches!(mode, Inconsistency::Bladder | Inconsistency::Both) {
            let delta = rng.gen_range(0.15..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            c.bladder_scale_ct = (base_scale + delta).clamp(0.7, 1.25);
            if (c.bladder_scale_ct - c.bladder_scale_mr).abs() < 0.1 {
                c.bladder_scale_ct = (base_scale - delta).clamp(0.7, 1.25);
            }
        }
        if matches!(mode, Inconsistency::Gas | Inconsistency::Both) {
            let in_mr = rng.gen_bool(0.5);
            c.gas_present_mr = in_mr;
            c.gas_present_ct = !in_mr;
            c.rectum_shift_ct = (jit(&mut rng, 0.03), jit(&mut rng, 0.02));
        }
        c
    }

    pub fn with_gas(mut self, mr: bool, ct: bool) -> Self {
        self.gas_present_mr = mr;
        self.gas_present_ct = ct;
        self
    }

    /// Same anatomy with the CT rendered exactly as the MR anatomy.
    pub fn consistent(mut self) -> Self {
        self.bladder_scale_ct = self.bladder_scale_mr;
        self.gas_present_ct = self.gas_present_mr;
        self.rectum_shift_ct = (0.0, 0.0);
        self
    }

    fn organs(&self, modality: Modality) -> (Ellipse, Ellipse, Option<Ellipse>) {
        let (scale, shift, gas) = match modality {
            Modality::MR => (self.bladder_scale_mr, (0.0, 0.0), self.gas_present_mr),
            Modality::CT => (self.bladder_scale_ct, self.rectum_shift_ct, self.gas_present_ct),
        };
        let bladder = self.bladder.scaled(scale);
        let rectum = Ellipse::from(self.rectum).shifted(shift);
        let gas = gas.then(|| {
            Ellipse::from(Circle {
                center: (
                    self.rectum.center.0 + shift.0 + self.gas_offset.0,
                    self.rectum.center.1 + shift.1 + self.gas_offset.1,
                ),
                radius: self.gas_radius,
            })
        });
        (bladder, rectum, gas)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPhantom(m));
        if self.size < 32 || !self.size.is_power_of_two() {
            return bad(format!("size {} must be a power of two >= 32", self.size));
        }
        let frac_ok = |r: f64| r > 0.0 && r < 0.5;
        let mut radii = vec![
            self.body.radii.0,
            self.body.radii.1,
            self.bladder.radii.0,
            self.bladder.radii.1,
            self.rectum.radius,
            self.gas_radius,
        ];
        radii.extend(self.bones.iter().map(|b| b.radius));
        if !radii.iter().all(|&r| frac_ok(r)) {
            return bad("all radii must lie in (0, 0.5)".into());
        }
        if self.bladder_scale_mr <= 0.0 || self.bladder_scale_ct <= 0.0 {
            return bad("bladder scales must be positive".into());
        }
        if self.noise_sigma < 0.0 || self.mr_bias_field_amplitude < 0.0 {
            return bad("noise and bias amplitudes must be non-negative".into());
        }
        if self.mr_bias_field_amplitude >= 1.0 {
            return bad("bias amplitude must stay below 1".into());
        }
        let px = 1.0 / self.size as f64;
        // body must keep a pixel of air to the border
        let body_margin = Ellipse {
            center: self.body.center,
            radii: (self.body.radii.0 + px, self.body.radii.1 + px),
        };
        if body_margin.boundary(360).any(|(x, y)| x <= 0.0 || y <= 0.0 || x >= 1.0 || y >= 1.0) {
            return bad("body ellipse touches the image border".into());
        }
        let shrunk_body = Ellipse {
            center: self.body.center,
            radii: (self.body.radii.0 - px, self.body.radii.1 - px),
        };
        let inside_body = |e: &Ellipse| e.boundary(180).all(|(x, y)| shrunk_body.contains(x, y));
        for b in &self.bones {
            if !inside_body(&Ellipse::from(*b)) {
                return bad("bone outside body".into());
            }
        }
        let separated = |a: &Ellipse, b: &Ellipse| {
            let grow = |e: &Ellipse| Ellipse {
                center: e.center,
                radii: (e.radii.0 + 0.75 * px, e.radii.1 + 0.75 * px),
            };
            let (ga, gb) = (grow(a), grow(b));
            !ga.boundary(180).any(|(x, y)| gb.contains(x, y))
                && !gb.boundary(180).any(|(x, y)| ga.contains(x, y))
        };
        for modality in [Modality::MR, Modality::CT] {
            let (bladder, rectum, gas) = self.organs(modality);
            for (name, organ) in [("bladder", &bladder), ("rectum", &rectum)] {
                if !inside_body(organ) {
                    return bad(format!("{name} exits the body in {modality:?}"));
                }
                if self.bones.iter().any(|b| !separated(organ, &Ellipse::from(*b))) {
                    return bad(format!("{name} touches bone in {modality:?}"));
                }
            }
            if !separated(&bladder, &rectum) {
                return bad(format!("bladder touches rectum in {modality:?}"));
            }
            if let Some(g) = gas {
                let inner = Ellipse {
                    center: rectum.center,
                    radii: (rectum.radii.0 - 0.5 * px, rectum.radii.1 - 0.5 * px),
                };
                if !g.boundary(180).all(|(x, y)| inner.contains(x, y)) {
                    return bad(format!("gas leaves the rectum in {modality:?}"));
                }
            }
        }
        Ok(())
    }
}

fn rasterize(size: usize, shape: &Ellipse) -> Vec<bool> {
    let s = size as f64;
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            shape.contains((x as f64 + 0.5) / s, (y as f64 + 0.5) / s)
        })
        .collect()
}

/// Bias field of the form `1 + a * smooth(x, y)` with `|smooth| <= 1`.
fn bias_field(size: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let phase: [f64; 3] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let s = size as f64;
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 / s, (i % size) as f64 / s);
            let v = 0.5 * (PI * x + phase[0]).sin()
                + 0.3 * (PI * y + phase[1]).cos()
                + 0.2 * (PI * (x + y) + phase[2]).sin();
            1.0 + amplitude * v
        })
        .collect()
}

/// Labels per modality plus the structural masks shared by both.
pub struct PhantomGeometry {
    pub body: Vec<bool>,
    pub bone: Vec<bool>,
    pub label_mr: LabelMap,
    pub label_ct: LabelMap,
}

pub fn phantom_geometry(config: &PhantomConfig) -> Result<PhantomGeometry> {
    config.validate()?;
    let n = config.size;
    let body = rasterize(n, &config.body);
    let mut bone = vec![false; n * n];
    for b in &config.bones {
        for (dst, v) in bone.iter_mut().zip(rasterize(n, &Ellipse::from(*b))) {
            *dst |= v;
        }
    }
    let label = |modality: Modality| -> Result<LabelMap> {
        let (bladder, rectum, gas) = config.organs(modality);
        let mut classes = vec![0u8; n * n];
        for (c, v) in classes.iter_mut().zip(rasterize(n, &bladder)) {
            if v {
                *c = Organ::Bladder.class_id();
            }
        }
        for (c, v) in classes.iter_mut().zip(rasterize(n, &rectum)) {
            if v {
                *c = Organ::Rectum.class_id();
            }
        }
        if let Some(g) = gas {
            for (c, v) in classes.iter_mut().zip(rasterize(n, &g)) {
                if v {
                    *c = Organ::Gas.class_id();
                }
            }
        }
        LabelMap::new(n, modality, classes)
    };
    Ok(PhantomGeometry {
        label_mr: label(Modality::MR)?,
        label_ct: label(Modality::CT)?,
        body,
        bone,
    })
}

/// Render paired MR/CT slices with their organ labels.
///
/// Deterministic in `config` (including its seed).
pub fn generate_phantom(config: &PhantomConfig) -> Result<(ImageSlice, ImageSlice, LabelMap, LabelMap)> {
    let geo = phantom_geometry(config)?;
    let n = config.size;
    let tissue_value = |cls: u8, body: bool, bone: bool, mr: bool| -> f32 {
        match (Organ::from_class(cls), body, bone, mr) {
            (Some(Organ::Bladder), _, _, true) => mr_value::BLADDER,
            (Some(Organ::Rectum), _, _, true) => mr_value::RECTUM,
            (Some(Organ::Gas), _, _, true) => mr_value::GAS,
            (Some(Organ::Bladder), _, _, false) => ct_value::BLADDER,
            (Some(Organ::Rectum), _, _, false) => ct_value::RECTUM,
            (Some(Organ::Gas), _, _, false) => ct_value::GAS,
            (None, _, true, true) => mr_value::BONE,
            (None, _, true, false) => ct_value::BONE,
            (None, true, false, true) => mr_value::TISSUE,
            (None, true, false, false) => ct_value::TISSUE,
            (None, false, false, true) => mr_value::AIR,
            (None, false, false, false) => ct_value::AIR,
        }
    };

    let mut rng = seed::rng(config.seed, &[stream::PHANTOM_NOISE]);
    let bias = bias_field(n, config.mr_bias_field_amplitude, &mut rng);
    let mr_noise = Normal::new(0.0, 0.5 * config.noise_sigma).map_err(|e| Error::InvalidPhantom(e.to_string()))?;
    let ct_noise = Normal::new(0.0, 1500.0 * config.noise_sigma).map_err(|e| Error::InvalidPhantom(e.to_string()))?;
    let noisy = config.noise_sigma > 0.0;

    let mut mr = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let base = tissue_value(geo.label_mr.classes()[i], geo.body[i], geo.bone[i], true) as f64;
        let mut v = base * bias[i];
        if noisy {
            v += mr_noise.sample(&mut rng);
        }
        mr.push(v.clamp(0.0, 1.0) as f32);
    }
    let mut ct = Vec::with_capacity(n * n);
    for i in 0..n * n {
        let mut v = tissue_value(geo.label_ct.classes()[i], geo.body[i], geo.bone[i], false) as f64;
        if noisy {
            v += ct_noise.sample(&mut rng);
        }
        ct.push(v.clamp(-1000.0, 2000.0) as f32);
    }
    Ok((
        ImageSlice::new(n, Modality::MR, mr)?,
        ImageSlice::new(n, Modality::CT, ct)?,
        geo.label_mr,
        geo.label_ct,
    ))
}

/// Convenience wrapper producing a [`PairedRecord`].
pub fn generate_record(config: &PhantomConfig, subject_id: impl Into<String>) -> Result<PairedRecord> {
    let (mr, ct, label_mr, label_ct) = generate_phantom(config)?;
    Ok(PairedRecord {
        subject_id: subject_id.into(),
        mr,
        ct,
        label_mr,
        label_ct,
    })
}

/// `count` subjects, one slice each, with per-record seeds derived from `seed`.
pub fn generate_cohort(
    count: usize,
    size: usize,
    seed: u64,
    mode: Inconsistency,
) -> Result<Vec<PairedRecord>> {
    (0..count)
        .map(|i| {
            let cfg = PhantomConfig::sample(size, seed::derive(seed, &[stream::DATASET, i as u64]), mode);
            generate_record(&cfg, format!("subject{i:03}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_and_sampled_configs_validate() {
        PhantomConfig::reference(64, 0).validate().unwrap();
        PhantomConfig::reference(32, 0).validate().unwrap();
        for seed in 0..200 {
            for mode in [
                Inconsistency::None,
                Inconsistency::Bladder,
                Inconsistency::Gas,
                Inconsistency::Both,
                Inconsistency::Random,
            ] {
                let c = PhantomConfig::sample(64, seed, mode);
                c.validate().unwrap_or_else(|e| panic!("seed {seed} {mode:?}: {e}"));
            }
        }
    }

    #[test]
    fn oversized_bladder_is_rejected() {
        let mut c = PhantomConfig::reference(64, 0);
        c.bladder_scale_mr = 3.0;
        assert!(matches!(generate_phantom(&c), Err(Error::InvalidPhantom(_))));
    }

    #[test]
    fn mr_only_gas_appears_only_in_mr_labels() {
        let c = PhantomConfig::reference(64, 1).with_gas(true, false);
        let (_, _, lmr, lct) = generate_phantom(&c).unwrap();
        assert!(lmr.classes().contains(&3));
        assert!(!lct.classes().contains(&3));
    }

    #[test]
    fn consistent_noiseless_config_gives_equal_labels() {
        let mut c = PhantomConfig::sample(64, 5, Inconsistency::None);
        c.noise_sigma = 0.0;
        let (_, _, lmr, lct) = generate_phantom(&c).unwrap();
        assert_eq!(lmr.classes(), lct.classes());
    }

    #[test]
    fn generation_is_bit_identical_for_same_seed() {
        let c = PhantomConfig::sample(64, 42, Inconsistency::Both);
        let a = generate_phantom(&c).unwrap();
        let b = generate_phantom(&c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_ct_gas_is_exactly_minus_1000() {
        let c = PhantomConfig::reference(64, 3);
        let (_, ct, _, lct) = generate_phantom(&c).unwrap();
        let gas: Vec<f32> = ct
            .pixels()
            .iter()
            .zip(lct.classes())
            .filter(|(_, &l)| l == 3)
            .map(|(&v, _)| v)
            .collect();
        assert!(!gas.is_empty());
        assert_eq!(gas.iter().sum::<f32>() / gas.len() as f32, -1000.0);
    }

    #[test]
    fn mr_bladder_is_ct_bladder_scaled() {
        let mut c = PhantomConfig::reference(64, 0);
        c.bladder_scale_mr = 1.2;
        c.bladder_scale_ct = 0.8;
        let (_, _, lmr, lct) = generate_phantom(&c).unwrap();
        let count = |l: &LabelMap| l.class_counts()[1] as f64;
        let ratio = count(&lmr) / count(&lct);
        assert!((ratio - 1.5f64.powi(2)).abs() < 0.25, "area ratio {ratio}");
        // CT bladder is contained in the MR bladder
        for (a, b) in lmr.mask(Organ::Bladder).iter().zip(lct.mask(Organ::Bladder)) {
            assert!(!b || *a);
        }
    }

    #[test]
    fn rendered_contrasts_follow_tissue_classes() {
        let c = PhantomConfig::reference(64, 0);
        let (mr, ct, lmr, _) = generate_phantom(&c).unwrap();
        let idx = |cls: u8| lmr.classes().iter().position(|&l| l == cls).unwrap();
        assert_eq!(ct.pixels()[idx(1)], ct_value::BLADDER);
        assert_eq!(ct.pixels()[0], ct_value::AIR);
        assert!(mr.pixels()[idx(1)] > mr.pixels()[idx(2)]);
        assert!(mr.pixels()[idx(3)] < 0.1);
    }
}
