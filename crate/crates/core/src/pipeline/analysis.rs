use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{edit_pass, initial_lambda, prepare, stage_plan, EditInputs, EditSettings, Recorder, RunTrace};
use crate::denoiser::{check_same_shape, Grid};
use crate::error::{Error, Result};
use crate::objective::{cosine_similarity, JointEncoder};
use crate::promptmix::PromptEmbedding;

/// Peak-to-peak range of pixel values, used by [`psnr`].
pub const PIXEL_RANGE: f64 = 2.0;

pub(super) fn rms(a: &Grid, b: &Grid) -> Result<f64> {
    check_same_shape(a, b)?;
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Root-mean-square difference over pixels where `mask == keep`.
pub fn masked_rms(a: &Grid, b: &Grid, mask: &Grid, keep: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    check_same_shape(a, mask)?;
    let (mut ss, mut n) = (0.0, 0usize);
    for ((x, y), m) in a.iter().zip(b).zip(mask) {
        if *m == keep {
            ss += (x - y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("mask selects no pixels equal to {keep}")));
    }
    Ok((ss / n as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB for pixel values spanning [`PIXEL_RANGE`].
pub fn psnr(reference: &Grid, test: &Grid) -> Result<f64> {
    let e = rms(reference, test)?;
    Ok(20.0 * (PIXEL_RANGE / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub t: usize,
    pub lambda: f64,
    pub d_src: f64,
    pub d_tgt: f64,
}

fn euclid(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Euclidean distances from each mixed text embedding to the source- and
/// target-image embeddings. `mixed[t - 1]` belongs to step `t`.
pub(super) fn embedding_distances(
    mixed: &[PromptEmbedding],
    source: &Grid,
    target: &Grid,
    enc: &dyn JointEncoder,
) -> Result<Vec<DistanceRow>> {
    let es = enc.encode_image(source)?;
    let et = enc.encode_image(target)?;
    mixed
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let e = enc.encode_text(m)?;
            Ok(DistanceRow {
                t: i + 1,
                lambda: f64::NAN,
                d_src: euclid(&e, &es),
                d_tgt: euclid(&e, &et),
            })
        })
        .collect()
}

/// Per-step distances recomputed from a recorded run.
pub fn trace_embedding_distances(run: &RunTrace, enc: &dyn JointEncoder) -> Result<Vec<DistanceRow>> {
    let missing = |what: &str| Error::InvalidArgument(format!("run trace has no {what}"));
    let source = run.source_image.as_ref().ok_or_else(|| missing("source image"))?;
    let target = run.target_image.as_ref().ok_or_else(|| missing("target image"))?;
    if run.mixed_embeddings.is_empty() {
        return Err(missing("per-step mixed embeddings"));
    }
    let lambda = run.lambda_final.as_ref().ok_or_else(|| missing("lambda vector"))?;
    if lambda.steps() != run.mixed_embeddings.len() {
        return Err(missing("lambda entry for every step"));
    }
    let mut rows = embedding_distances(&run.mixed_embeddings, source, target, enc)?;
    for r in &mut rows {
        r.lambda = lambda.at(r.t);
    }
    Ok(rows)
}

pub fn write_distances_csv(path: &Path, rows: &[DistanceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Desk-scale analogs of the usual image-editing scores. Cosines are `None`
/// when an embedding (or embedding change) is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    /// Image-image cosine of edit and source.
    pub clip_i: Option<f64>,
    /// Image-text cosine of edit and target prompt.
    pub clip_t: Option<f64>,
    /// Image-image cosine of edit and source under the second encoder.
    pub dino_i: Option<f64>,
    /// Image-image cosine of edit and target reference.
    pub target_similarity: Option<f64>,
    /// Cosine between the image change and the prompt change.
    pub alignment: Option<f64>,
    pub off_edit_rms: Option<f64>,
    pub on_edit_rms: Option<f64>,
    pub degenerate: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn score_metrics(
    source: &Grid,
    edit: &Grid,
    target_reference: Option<&Grid>,
    src_prompt: &PromptEmbedding,
    tgt_prompt: &PromptEmbedding,
    mask: Option<&Grid>,
    enc: &dyn JointEncoder,
    alt: &dyn JointEncoder,
) -> Result<MetricScores> {
    let mut degenerate = Vec::new();
    let mut flag = |name: &str, v: Option<f64>| {
        if v.is_none() {
            degenerate.push(name.to_string());
        }
        v
    };
    let ee = enc.encode_image(edit)?;
    let es = enc.encode_image(source)?;
    let clip_i = flag("clip_i", cosine_similarity(&ee, &es)?);
    let clip_t = flag("clip_t", cosine_similarity(&ee, &enc.encode_text(tgt_prompt)?)?);
    let dino_i = flag(
        "dino_i",
        cosine_similarity(&alt.encode_image(edit)?, &alt.encode_image(source)?)?,
    );
    let target_similarity = match target_reference {
        Some(r) => flag("target_similarity", cosine_similarity(&ee, &enc.encode_image(r)?)?),
        None => None,
    };
    let dt = enc.encode_text(tgt_prompt)? - enc.encode_text(src_prompt)?;
    let alignment = flag("alignment", cosine_similarity(&(&ee - &es), &dt)?);
    let (off_edit_rms, on_edit_rms) = match mask {
        Some(m) => (
            Some(masked_rms(edit, source, m, 0.0)?),
            masked_rms(edit, source, m, 1.0).ok(),
        ),
        None => (None, None),
    };
    Ok(MetricScores {
        clip_i,
        clip_t,
        dino_i,
        target_similarity,
        alignment,
        off_edit_rms,
        on_edit_rms,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub freq_quantile: f64,
    pub grad_quantile: f64,
    pub t_edit: Option<usize>,
    pub t_boost: Option<usize>,
    /// Off-edit RMS error against the source (whole image without a mask).
    pub off_edit_error: Option<f64>,
    pub alignment: Option<f64>,
    pub target_similarity: Option<f64>,
    pub error: Option<String>,
}

/// Re-places the stages and re-runs the edit for every quantile pair. The
/// inversion and pilot run are shared; cells run concurrently with the
/// configured seed, so a cell at the default quantiles matches [`super::run_edit`].
pub fn quantile_sweep(
    settings: &EditSettings,
    inputs: &EditInputs<'_>,
    freq_qs: &[f64],
    grad_qs: &[f64],
) -> Result<Vec<SweepRow>> {
    if freq_qs.is_empty() || grad_qs.is_empty() {
        return Err(Error::InvalidArgument("quantile lists must be non-empty".into()));
    }
    let mut rec = Recorder {
        trace: RunTrace::new(settings, serde_json::Value::Null),
        out_dir: None,
    };
    let prep = prepare(settings, inputs, &mut rec)?;
    let cells: Vec<(f64, f64)> = freq_qs
        .iter()
        .flat_map(|&f| grad_qs.iter().map(move |&g| (f, g)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(fq, gq)| {
            let mut cell = settings.clone();
            cell.stages.freq_quantile = fq;
            cell.stages.grad_quantile = gq;
            cell.stage_override = None;
            let mut row = SweepRow {
                freq_quantile: fq,
                grad_quantile: gq,
                t_edit: None,
                t_boost: None,
                off_edit_error: None,
                alignment: None,
                target_similarity: None,
                error: None,
            };
            let result = (|| -> Result<()> {
                let plan = stage_plan(&cell, &inputs.decoder, &prep.pilot)?;
                row.t_edit = Some(plan.t_edit);
                row.t_boost = Some(plan.t_boost);
                let lambda = initial_lambda(&cell, &plan)?;
                let (_, _, edited) = edit_pass(&cell, inputs, &prep, &plan, &lambda)?;
                let m = score_metrics(
                    &prep.source_pixels,
                    &edited,
                    inputs.target_reference.as_ref(),
                    &prep.src,
                    &prep.tgt,
                    inputs.mask.as_ref(),
                    inputs.encoder,
                    inputs.alt_encoder,
                )?;
                row.off_edit_error = Some(match m.off_edit_rms {
                    Some(v) => v,
                    None => rms(&edited, &prep.source_pixels)?,
                });
                row.alignment = m.alignment;
                row.target_similarity = m.target_similarity;
                Ok(())
            })();
            if let Err(e) = result {
                row.error = Some(e.to_string());
            }
            row
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn psnr_and_masks() {
        let a = Array3::zeros((1, 2, 2));
        let mut b = a.clone();
        b[[0, 0, 0]] = 0.2;
        let mask = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| if y == 0 && x == 0 { 1.0 } else { 0.0 });
        assert_eq!(masked_rms(&a, &b, &mask, 0.0).unwrap(), 0.0);
        assert!((masked_rms(&a, &b, &mask, 1.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((psnr(&a, &b).unwrap() - 20.0 * (2.0f64 / 0.1).log10()).abs() < 1e-12);
        assert!(masked_rms(&a, &b, &Array3::zeros((1, 2, 2)), 1.0).is_err());
    }
}
