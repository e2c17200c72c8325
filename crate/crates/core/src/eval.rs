//! Per-subject, per-view PSNR/SSIM over the ground-truth human bounding box.
//!
//! Report files:
//! - `eval.csv`: `subject,view,psnr,ssim,lpips`, one row per evaluated view.
//!   PSNR of identical crops is written as `inf`; `lpips` is reserved and empty.
//! - `eval_summary.json`: means over finite rows, row counts and skip notes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CanonicalView;
use crate::image::{Rgb, RgbImage};
use crate::metrics::{psnr, ssim, Crop};
use crate::pipeline::Reconstructor;
use crate::splat::render;
use crate::synth::{SubjectViews, ViewBundle, ViewTag};

/// Margin around the mask bounding box, pixels.
pub const CROP_MARGIN: usize = 5;
pub const REPORT_CSV: &str = "eval.csv";
pub const SUMMARY_JSON: &str = "eval_summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalViews {
    Canonical,
    Novel,
    All,
}

impl EvalViews {
    fn selects(self, tag: &ViewTag) -> bool {
        matches!(
            (self, tag),
            (EvalViews::All, _) | (EvalViews::Canonical, ViewTag::Canonical(_)) | (EvalViews::Novel, ViewTag::Novel { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject: String,
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: usize,
    /// Rows whose PSNR is the identical-image sentinel.
    pub infinite_rows: usize,
    /// Mean PSNR over finite rows; absent when there are none.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        let finite: Vec<f64> = self.rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let ssims: Vec<f64> = self.rows.iter().map(|r| r.ssim).collect();
        EvalSummary {
            rows: self.rows.len(),
            infinite_rows: self.rows.len() - finite.len(),
            mean_psnr: mean(&finite),
            mean_ssim: mean(&ssims),
            skipped: self.skipped.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,view,psnr,ssim,lpips\n");
        for r in &self.rows {
            let p = if r.psnr.is_finite() { format!("{:.6}", r.psnr) } else { "inf".to_string() };
            writeln!(s, "{},{},{p},{:.6},", r.subject, r.view, r.ssim).expect("writing to a string");
        }
        s
    }

    /// Writes the CSV table and JSON summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(REPORT_CSV);
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(SUMMARY_JSON);
        let text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Scores `predict(subject, view)` against every selected view. Subjects
/// missing a view or with an empty mask are skipped and noted.
pub fn evaluate_with(
    subjects: &[SubjectViews],
    views: EvalViews,
    mut predict: impl FnMut(&SubjectViews, &ViewBundle) -> Result<RgbImage>,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for subject in subjects {
        let selected: Vec<&ViewBundle> = subject.bundles.iter().filter(|b| views.selects(&b.view_tag)).collect();
        if selected.is_empty() {
            log::warn!("subject {} has no {views:?} views", subject.id);
            report.skipped.push(format!("{}: no {views:?} views", subject.id));
            continue;
        }
        for b in selected {
            let name = b.view_tag.file_stem();
            let Some(crop) = Crop::from_mask(&b.mask, CROP_MARGIN) else {
                log::warn!("subject {} view {name} has an empty mask", subject.id);
                report.skipped.push(format!("{}/{name}: empty mask", subject.id));
                continue;
            };
            let img = predict(subject, b)?;
            report.rows.push(EvalRow {
                subject: subject.id.clone(),
                view: name,
                psnr: psnr(&img, &b.image, &crop)?,
                ssim: ssim(&img, &b.image, &crop)?,
            });
        }
    }
    Ok(report)
}

/// Reconstructs each subject from its front/back views and renders every
/// selected view. Subjects lacking an input view are skipped.
pub fn evaluate(rec: &Reconstructor, subjects: &[SubjectViews], views: EvalViews, background: Rgb) -> Result<EvalReport> {
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for s in subjects {
        let has = |v: CanonicalView| s.bundles.iter().any(|b| b.view_tag == ViewTag::Canonical(v));
        if has(CanonicalView::Front) && has(CanonicalView::Back) {
            usable.push(s.clone());
        } else {
            log::warn!("subject {} lacks a front or back input view", s.id);
            skipped.push(format!("{}: missing input view", s.id));
        }
    }
    let mut cache: Option<(String, crate::gaussian::GaussianSet)> = None;
    let mut report = evaluate_with(&usable, views, |subject, bundle| {
        let front = subject.canonical(CanonicalView::Front);
        if cache.as_ref().is_none_or(|(id, _)| *id != subject.id) {
            let back = subject.canonical(CanonicalView::Back);
            let r = rec.reconstruct(&front.image, &front.mask, &back.image, &back.mask)?;
            cache = Some((subject.id.clone(), r.gaussians));
        }
        let set = &cache.as_ref().expect("cache filled above").1;
        Ok(render(set, &bundle.camera.relative_to(&front.camera), background)?.image)
    })?;
    skipped.append(&mut report.skipped);
    report.skipped = skipped;
    Ok(report)
}
