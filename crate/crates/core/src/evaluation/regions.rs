use crate::phantom::{ImageSlice, LabelMap, Modality, Organ};
use crate::{Error, Result};

/// Pixels at or above this value count as bone.
pub const BONE_THRESHOLD_HU: f32 = 150.0;
/// Pixels at or below this value inside the body count as gas.
pub const GAS_THRESHOLD_HU: f32 = -500.0;
/// Pixels above this value seed the body mask.
pub const BODY_THRESHOLD_HU: f32 = -500.0;

/// Offsets of the 3x3 cross structuring element.
const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

fn ct_pair(real: &ImageSlice, syn: &ImageSlice) -> Result<()> {
    if real.size() != syn.size() {
        return Err(Error::Shape(format!("images are {} and {} wide", real.size(), syn.size())));
    }
    if real.modality() != Modality::CT || syn.modality() != Modality::CT {
        return Err(Error::InvalidImage("bone region needs CT-domain images".into()));
    }
    Ok(())
}

/// Union of thresholded bone in the real and synthetic CT.
pub fn bone_region(real: &ImageSlice, syn: &ImageSlice) -> Result<Vec<bool>> {
    ct_pair(real, syn)?;
    Ok(real
        .pixels()
        .iter()
        .zip(syn.pixels())
        .map(|(&a, &b)| a >= BONE_THRESHOLD_HU || b >= BONE_THRESHOLD_HU)
        .collect())
}

/// Pixels labelled `organ` in both the MR and CT label maps.
pub fn organ_intersection_region(
    label_mr: &LabelMap,
    label_ct: &LabelMap,
    organ: Organ,
) -> Result<Vec<bool>> {
    if label_mr.size() != label_ct.size() {
        return Err(Error::Shape(format!(
            "label maps are {} and {} wide",
            label_mr.size(),
            label_ct.size()
        )));
    }
    let id = organ.class_id();
    Ok(label_mr
        .classes()
        .iter()
        .zip(label_ct.classes())
        .map(|(&a, &b)| a == id && b == id)
        .collect())
}

fn at(mask: &[bool], n: usize, y: usize, x: usize, dy: isize, dx: isize) -> Option<bool> {
    let yy = y as isize + dy;
    let xx = x as isize + dx;
    if yy < 0 || xx < 0 || yy >= n as isize || xx >= n as isize {
        None
    } else {
        Some(mask[yy as usize * n + xx as usize])
    }
}

/// Binary erosion by the 3x3 cross; outside the image counts as unset.
pub fn erode(mask: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = CROSS
                .iter()
                .all(|&(dy, dx)| at(mask, n, y, x, dy, dx).unwrap_or(false));
        }
    }
    out
}

pub fn dilate(mask: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = CROSS
                .iter()
                .any(|&(dy, dx)| at(mask, n, y, x, dy, dx).unwrap_or(false));
        }
    }
    out
}

pub fn opening(mask: &[bool], n: usize) -> Vec<bool> {
    dilate(&erode(mask, n), n)
}

pub fn closing(mask: &[bool], n: usize) -> Vec<bool> {
    erode(&dilate(mask, n), n)
}

/// 4-connected component labelling. Unset pixels get 0; components are
/// numbered from 1 in raster order of their first pixel.
pub fn connected_components(mask: &[bool], n: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; n * n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n * n {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (y, x) = (k / n, k % n);
            for &(dy, dx) in &CROSS[1..] {
                if at(mask, n, y, x, dy, dx) == Some(true) {
                    let j = (y as isize + dy) as usize * n + (x as isize + dx) as usize;
                    if labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Mask with every hole (unset component not touching the border) filled.
pub fn fill_holes(mask: &[bool], n: usize) -> Vec<bool> {
    let outside: Vec<bool> = mask.iter().map(|&v| !v).collect();
    let (labels, count) = connected_components(&outside, n);
    let mut touches = vec![false; count as usize + 1];
    for i in 0..n {
        for k in [i, (n - 1) * n + i, i * n, i * n + n - 1] {
            touches[labels[k] as usize] = true;
        }
    }
    labels
        .iter()
        .zip(mask)
        .map(|(&l, &m)| m || !touches[l as usize])
        .collect()
}

/// Body outline of a CT slice: non-air pixels with enclosed cavities filled.
pub fn body_mask(ct: &ImageSlice) -> Result<Vec<bool>> {
    if ct.modality() != Modality::CT {
        return Err(Error::InvalidImage("body mask needs a CT-domain image".into()));
    }
    let tissue: Vec<bool> = ct.pixels().iter().map(|&v| v > BODY_THRESHOLD_HU).collect();
    Ok(fill_holes(&tissue, ct.size()))
}

/// Gas pockets of a CT slice: air-valued pixels inside the body, cleaned by an
/// opening then a closing with the 3x3 cross.
pub fn gas_identify(ct: &ImageSlice) -> Result<Vec<bool>> {
    let body = body_mask(ct)?;
    let n = ct.size();
    let raw: Vec<bool> = ct
        .pixels()
        .iter()
        .zip(&body)
        .map(|(&v, &b)| b && v <= GAS_THRESHOLD_HU)
        .collect();
    Ok(closing(&opening(&raw, n), n))
}
