use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::metrics::{dsc, mae, psnr, ssim};
use super::regions::{bone_region, gas_identify, organ_intersection_region};
use crate::net::ModelBundle;
use crate::phantom::{ImageSlice, LabelMap, Organ, PairedRecord};
use crate::training::{infer, Inference};
use crate::{Error, Result, Scalar};

/// Anything that turns an MR slice into a synthetic CT and organ labels.
pub trait Synthesizer {
    fn synthesize(&mut self, mr: &ImageSlice) -> Result<Inference>;
}

impl<T: Scalar> Synthesizer for ModelBundle<T> {
    fn synthesize(&mut self, mr: &ImageSlice) -> Result<Inference> {
        infer(self, mr)
    }
}

/// Metrics of one test subject. Region MAEs are `None` when the region is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub mae_entire: f64,
    pub mae_bone: Option<f64>,
    pub mae_gas: Option<f64>,
    pub mae_rectum: Option<f64>,
    pub mae_bladder: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    /// Keyed by organ name.
    pub dsc: BTreeMap<String, f64>,
}

impl SubjectMetrics {
    /// Every metric under its aggregate key.
    pub fn values(&self) -> Vec<(String, Option<f64>)> {
        let mut v = vec![
            ("mae_entire".to_string(), Some(self.mae_entire)),
            ("mae_bone".to_string(), self.mae_bone),
            ("mae_gas".to_string(), self.mae_gas),
            ("mae_rectum".to_string(), self.mae_rectum),
            ("mae_bladder".to_string(), self.mae_bladder),
            ("psnr".to_string(), Some(self.psnr)),
            ("ssim".to_string(), Some(self.ssim)),
        ];
        for (organ, d) in &self.dsc {
            v.push((format!("dsc_{organ}"), Some(*d)));
        }
        v
    }
}

/// Mean and sample standard deviation over the subjects where a metric exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Sorted by subject id.
    pub subjects: Vec<SubjectMetrics>,
    /// Metrics absent for every subject have no entry.
    pub aggregates: BTreeMap<String, Summary>,
    pub notes: Vec<String>,
}

pub const ENTIRE_NOTE: &str =
    "mae_entire covers every pixel, inconsistent organ regions included";
pub const GAS_NOTE: &str =
    "mae_gas covers MR gas labels intersected with gas identified in the real CT";

impl MetricsReport {
    pub fn from_subjects(label: impl Into<String>, mut subjects: Vec<SubjectMetrics>) -> Self {
        subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &subjects {
            for (key, v) in s.values() {
                let col = columns.entry(key).or_default();
                if let Some(v) = v {
                    col.push(v);
                }
            }
        }
        let aggregates = columns
            .into_iter()
            .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
            .collect();
        Self {
            label: label.into(),
            subjects,
            aggregates,
            notes: vec![ENTIRE_NOTE.into(), GAS_NOTE.into()],
        }
    }

    pub fn get(&self, key: &str) -> Option<Summary> {
        self.aggregates.get(key).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.subjects
            .iter()
            .flat_map(|s| s.values())
            .filter_map(|(_, v)| v)
            .chain(self.aggregates.values().flat_map(|s| [s.mean, s.std]))
            .all(f64::is_finite)
    }
}

/// Metrics of one record given a model's output.
pub fn subject_metrics(record: &PairedRecord, out: &Inference) -> Result<SubjectMetrics> {
    let (ct, syn) = (&record.ct, &out.synct);
    let bone = bone_region(ct, syn)?;
    let ct_gas = gas_identify(ct)?;
    let gas: Vec<bool> = record
        .label_mr
        .mask(Organ::Gas)
        .iter()
        .zip(&ct_gas)
        .map(|(&a, &b)| a && b)
        .collect();
    let rectum = organ_intersection_region(&record.label_mr, &record.label_ct, Organ::Rectum)?;
    let bladder = organ_intersection_region(&record.label_mr, &record.label_ct, Organ::Bladder)?;
    let mut dsc_map = BTreeMap::new();
    for organ in Organ::ALL {
        let d = dsc(&out.pred_labels.mask(organ), &record.label_mr.mask(organ))?;
        dsc_map.insert(organ.name().to_string(), d);
    }
    Ok(SubjectMetrics {
        subject_id: record.subject_id.clone(),
        mae_entire: mae(ct, syn, None)?.expect("images are nonempty"),
        mae_bone: mae(ct, syn, Some(&bone))?,
        mae_gas: mae(ct, syn, Some(&gas))?,
        mae_rectum: mae(ct, syn, Some(&rectum))?,
        mae_bladder: mae(ct, syn, Some(&bladder))?,
        psnr: psnr(ct, syn)?,
        ssim: ssim(ct, syn)?,
        dsc: dsc_map,
    })
}

/// Runs the model on every record and aggregates in subject-id order.
/// Comparison panels go to `plots` when given.
pub fn evaluate(
    model: &mut impl Synthesizer,
    records: &[PairedRecord],
    label: &str,
    plots: Option<&Path>,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptySplit);
    }
    if let Some(dir) = plots {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut subjects = Vec::with_capacity(records.len());
    for r in records {
        let out = model.synthesize(&r.mr)?;
        if let Some(dir) = plots {
            write_panel(&dir.join(format!("{}.png", r.subject_id)), r, &out)?;
        }
        subjects.push(subject_metrics(r, &out)?);
    }
    Ok(MetricsReport::from_subjects(label, subjects))
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub const REPORTS_JSON: &str = "reports.json";
pub const TABLE_TXT: &str = "table.txt";

/// Writes all reports as one JSON array plus the aligned text table.
pub fn emit_report(reports: &[MetricsReport], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(REPORTS_JSON);
    let text = serde_json::to_string_pretty(reports).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = out_dir.join(TABLE_TXT);
    fs::write(&path, format_table(reports)).map_err(|e| Error::io(&path, e))
}

fn cell(s: Option<Summary>, digits: usize) -> String {
    match s {
        Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
        None => "n/a".into(),
    }
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// MAE (HU), PSNR and SSIM table followed by the DSC table.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mae_rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                cell(r.get("mae_entire"), 1),
                cell(r.get("mae_bone"), 1),
                cell(r.get("mae_gas"), 1),
                cell(r.get("mae_rectum"), 1),
                cell(r.get("mae_bladder"), 1),
                cell(r.get("psnr"), 2),
                cell(r.get("ssim"), 3),
            ]
        })
        .collect();
    let dsc_rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(Organ::ALL.iter().map(|o| cell(r.get(&format!("dsc_{}", o.name())), 3)));
            row
        })
        .collect();
    let mut out = String::from("MAE (HU)\n");
    out += &render(
        &["model", "Entire pelvis", "Bone", "Rectal Gas", "Rectum", "Bladder", "PSNR (dB)", "SSIM"],
        &mae_rows,
    );
    out += "\nDSC\n";
    out += &render(&["model", "Bladder", "Rectum", "Rectal Gas"], &dsc_rows);
    out
}

const PANEL_SCALE: u32 = 4;

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn ct_gray(hu: f32) -> Rgb<u8> {
    // Display window [-1000, 1000] HU.
    gray((hu as f64 + 1000.0) / 2000.0)
}

fn label_color(class: u8, base: Rgb<u8>) -> Rgb<u8> {
    match Organ::from_class(class) {
        Some(Organ::Bladder) => Rgb([230, 200, 40]),
        Some(Organ::Rectum) => Rgb([210, 60, 60]),
        Some(Organ::Gas) => Rgb([60, 200, 220]),
        None => base,
    }
}

/// Five tiles left to right: MR, real CT, synCT, |synCT - CT| (0 to 500 HU)
/// and the predicted labels over the MR.
pub fn write_panel(path: &Path, record: &PairedRecord, out: &Inference) -> Result<()> {
    let n = record.size();
    let tiles: [Box<dyn Fn(usize) -> Rgb<u8>>; 5] = [
        Box::new(|i| gray(record.mr.pixels()[i] as f64)),
        Box::new(|i| ct_gray(record.ct.pixels()[i])),
        Box::new(|i| ct_gray(out.synct.pixels()[i])),
        Box::new(|i| gray((out.synct.pixels()[i] - record.ct.pixels()[i]).abs() as f64 / 500.0)),
        Box::new(|i| {
            label_color(
                out.pred_labels.classes()[i],
                gray(record.mr.pixels()[i] as f64),
            )
        }),
    ];
    let side = n as u32 * PANEL_SCALE;
    let mut img = RgbImage::new(side * tiles.len() as u32, side);
    for (t, f) in tiles.iter().enumerate() {
        for y in 0..side {
            for x in 0..side {
                let i = (y / PANEL_SCALE) as usize * n + (x / PANEL_SCALE) as usize;
                img.put_pixel(t as u32 * side + x, y, f(i));
            }
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Labels taken straight from a record, for oracle checks.
pub fn oracle_inference(record: &PairedRecord) -> Inference {
    Inference {
        synct: record.ct.clone(),
        pred_labels: LabelMap::clone(&record.label_mr),
    }
}
