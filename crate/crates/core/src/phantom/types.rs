use serde::{Deserialize, Serialize};

use crate::{Error, FeatureMap, Result, Scalar};

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    MR,
    CT,
}

impl Modality {
    pub fn range(self) -> (f32, f32) {
        match self {
            Modality::MR => (0.0, 1.0),
            Modality::CT => (HU_MIN, HU_MAX),
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Modality::MR => "a.u.",
            Modality::CT => "HU",
        }
    }
}

/// Organ classes carried by label maps. Background is class 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Organ {
    Bladder = 1,
    Rectum = 2,
    Gas = 3,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::Bladder, Organ::Rectum, Organ::Gas];

    pub fn class_id(self) -> u8 {
        self as u8
    }

    pub fn from_class(id: u8) -> Option<Organ> {
        match id {
            1 => Some(Organ::Bladder),
            2 => Some(Organ::Rectum),
            3 => Some(Organ::Gas),
            _ => None,
        }
    }

    /// Short key used in checkpoints and reports: `B`, `R`, `G`.
    pub fn key(self) -> &'static str {
        match self {
            Organ::Bladder => "B",
            Organ::Rectum => "R",
            Organ::Gas => "G",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::Bladder => "bladder",
            Organ::Rectum => "rectum",
            Organ::Gas => "gas",
        }
    }
}

pub const NUM_CLASSES: usize = 4;

fn check_side(h: usize, w: usize) -> Result<()> {
    if h != w || !h.is_power_of_two() || h < 32 {
        return Err(Error::InvalidImage(format!(
            "grid must be square, power-of-two and at least 32 per side, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Single-channel 2D intensity grid. CT pixels are Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    size: usize,
    modality: Modality,
    pixels: Vec<f32>,
}

impl ImageSlice {
    pub fn new(size: usize, modality: Modality, pixels: Vec<f32>) -> Result<Self> {
        check_side(size, size)?;
        if pixels.len() != size * size {
            return Err(Error::InvalidImage(format!(
                "expected {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        let (lo, hi) = modality.range();
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite pixel {v}")));
        }
        if let Some(v) = pixels.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::OutOfRange(format!(
                "{modality:?} pixel {v} outside [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            size,
            modality,
            pixels,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.size + x]
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }
}

/// Per-pixel organ class map over {background, bladder, rectum, rectal gas}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    size: usize,
    source: Modality,
    classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(size: usize, source: Modality, classes: Vec<u8>) -> Result<Self> {
        check_side(size, size)?;
        if classes.len() != size * size {
            return Err(Error::InvalidImage(format!(
                "expected {} labels, got {}",
                size * size,
                classes.len()
            )));
        }
        if let Some(c) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::OutOfRange(format!("unknown class id {c}")));
        }
        Ok(Self {
            size,
            source,
            classes,
        })
    }

    pub fn background(size: usize, source: Modality) -> Result<Self> {
        Self::new(size, source, vec![0; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn source(&self) -> Modality {
        self.source
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.size + x]
    }

    pub fn mask(&self, organ: Organ) -> Vec<bool> {
        let id = organ.class_id();
        self.classes.iter().map(|&c| c == id).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.classes.iter().map(|&c| c != 0).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        counts
    }
}

/// One subject slice: paired images and their organ labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord {
    pub subject_id: String,
    pub mr: ImageSlice,
    pub ct: ImageSlice,
    pub label_mr: LabelMap,
    pub label_ct: LabelMap,
}

impl PairedRecord {
    pub fn size(&self) -> usize {
        self.mr.size()
    }
}

/// Affine map of a slice into the `[-1, 1]` training range.
///
/// CT maps `[-1000, 2000] HU`; MR maps `[0, 1]`.
pub fn normalize_for_training<T: Scalar>(img: &ImageSlice) -> Result<FeatureMap<T>> {
    let (lo, hi) = img.modality().range();
    let (lo, hi) = (lo as f64, hi as f64);
    let span = hi - lo;
    let data = img
        .pixels()
        .iter()
        .map(|&v| {
            let v = v as f64;
            if !(lo..=hi).contains(&v) {
                return Err(Error::OutOfRange(format!("pixel {v} outside [{lo}, {hi}]")));
            }
            Ok(T::c(2.0 * (v - lo) / span - 1.0))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(FeatureMap::from_vec(1, img.size(), img.size(), data))
}

pub fn normalize_hu(hu: f64) -> f64 {
    2.0 * (hu - HU_MIN as f64) / (HU_MAX - HU_MIN) as f64 - 1.0
}

pub fn denormalize_hu(v: f64) -> f64 {
    (v + 1.0) * 0.5 * (HU_MAX - HU_MIN) as f64 + HU_MIN as f64
}

/// Inverse of [`normalize_for_training`] for CT.
pub fn denormalize_ct<T: Scalar>(fm: &FeatureMap<T>) -> Result<ImageSlice> {
    if fm.channels() != 1 || fm.height() != fm.width() {
        return Err(Error::Shape(format!(
            "expected 1xNxN feature map, got {:?}",
            fm.shape()
        )));
    }
    let pixels = fm
        .data()
        .iter()
        .map(|v| {
            let v = v.f64();
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!(
                    "normalized value {v} outside [-1, 1]"
                )));
            }
            Ok(denormalize_hu(v).clamp(HU_MIN as f64, HU_MAX as f64) as f32)
        })
        .collect::<Result<Vec<f32>>>()?;
    ImageSlice::new(fm.height(), Modality::CT, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ct_with(values: &[f32]) -> ImageSlice {
        let mut px = vec![0.0; 32 * 32];
        px[..values.len()].copy_from_slice(values);
        ImageSlice::new(32, Modality::CT, px).unwrap()
    }

    #[test]
    fn ct_endpoints_and_midpoint_map_affinely() {
        let img = ct_with(&[-1000.0, 2000.0, 500.0]);
        let n = normalize_for_training::<f64>(&img).unwrap();
        assert_eq!(n.data()[0], -1.0);
        assert_eq!(n.data()[1], 1.0);
        assert_eq!(n.data()[2], 0.0);
    }

    #[test]
    fn ct_round_trip_within_1e5_hu() {
        let vals: Vec<f32> = (0..1024).map(|i| -1000.0 + i as f32 * 2.93).collect();
        let img = ImageSlice::new(32, Modality::CT, vals).unwrap();
        let back = denormalize_ct(&normalize_for_training::<f64>(&img).unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn mr_maps_unit_interval() {
        let mut px = vec![0.5; 32 * 32];
        px[0] = 0.0;
        px[1] = 1.0;
        let img = ImageSlice::new(32, Modality::MR, px).unwrap();
        let n = normalize_for_training::<f32>(&img).unwrap();
        assert_eq!(&n.data()[..3], &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_invariants_are_enforced() {
        assert!(ImageSlice::new(16, Modality::MR, vec![0.0; 256]).is_err());
        assert!(ImageSlice::new(48, Modality::MR, vec![0.0; 48 * 48]).is_err());
        assert!(matches!(
            ImageSlice::new(32, Modality::CT, vec![2500.0; 1024]),
            Err(Error::OutOfRange(_))
        ));
        assert!(ImageSlice::new(32, Modality::MR, vec![f32::NAN; 1024]).is_err());
        assert!(LabelMap::new(32, Modality::MR, vec![4; 1024]).is_err());
    }

    #[test]
    fn denormalize_rejects_out_of_range() {
        let fm = FeatureMap::<f32>::filled(1, 32, 32, 1.5);
        assert!(matches!(denormalize_ct(&fm), Err(Error::OutOfRange(_))));
    }
}
