//! Image-fidelity and overlap metrics, evaluation regions and report emission.

mod metrics;
mod regions;
mod report;

pub use metrics::{
    dsc, gaussian_window, mae, psnr, psnr_from_mse, ssim, ssim_unit, unit_intensity, PSNR_CAP_DB,
    PSNR_MIN_MSE, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use regions::{
    body_mask, bone_region, closing, connected_components, dilate, erode, fill_holes,
    gas_identify, opening, organ_intersection_region, BODY_THRESHOLD_HU, BONE_THRESHOLD_HU,
    GAS_THRESHOLD_HU,
};
pub use report::{
    emit_report, evaluate, format_table, oracle_inference, read_report, subject_metrics,
    write_panel, write_report, MetricsReport, SubjectMetrics, Summary, Synthesizer, ENTIRE_NOTE,
    GAS_NOTE, REPORTS_JSON, TABLE_TXT,
};
