//! Inference with mean-thresholded indicators and the metric suite.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CfcbmError, Result};
use crate::hierarchy::ConceptHierarchy;
use crate::model::{forward, BatchInputs, Indicators, Mode, ModelParams};
use crate::numerics::{argmax, Matrix};
use crate::store::{BinaryMatrix, EmbeddingDataset};

pub const BIN_WIDTH: f64 = 0.05;
pub const N_BINS: usize = 40;
/// A concept is class-active when present in more than this fraction of the
/// class's examples.
pub const CLASS_ACTIVE_FRACTION: f64 = 0.4;

/// Rounds to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predictions_high: Vec<usize>,
    pub predictions_low: Vec<usize>,
    /// N×H hard high-level indicators.
    pub z_h: BinaryMatrix,
    /// (N·P)×L linked hard low-level indicators.
    pub z: BinaryMatrix,
    pub n_patches: usize,
}

pub fn to_binary(m: &Matrix) -> Result<BinaryMatrix> {
    let data = m
        .data()
        .iter()
        .map(|&x| {
            if x == 0.0 {
                Ok(0)
            } else if x == 1.0 {
                Ok(1)
            } else {
                Err(CfcbmError::Domain(format!(
                    "indicator value {x} is not binary"
                )))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMatrix::new(m.rows(), m.cols(), data)
}

/// Deterministic inference: posterior means thresholded at `tau`, then both heads.
pub fn infer(
    ds: &EmbeddingDataset,
    params: &ModelParams,
    hierarchy: &ConceptHierarchy,
    mode: Mode,
    tau: f64,
) -> Result<Inference> {
    params.check_shapes(ds.embed_dim(), ds.n_high(), ds.n_low(), ds.n_classes)?;
    let inputs = BatchInputs::from_dataset(ds)?;
    let trace = forward(
        params,
        &inputs,
        hierarchy,
        mode,
        &Indicators::Threshold { tau },
    )?;
    let preds = |m: &Matrix| (0..m.rows()).map(|r| argmax(m.row(r))).collect();
    Ok(Inference {
        predictions_high: preds(&trace.logits_high),
        predictions_low: preds(&trace.logits_low),
        z_h: to_binary(&trace.z_h)?,
        z: to_binary(&trace.z_combined)?,
        n_patches: ds.n_patches,
    })
}

fn counts(z: &[u8], gt: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if z.len() != gt.len() {
        return Err(CfcbmError::Dimension(format!(
            "indicator length {} vs ground truth length {}",
            z.len(),
            gt.len()
        )));
    }
    let (mut m11, mut m10, mut m01, mut m00) = (0, 0, 0, 0);
    for (&a, &b) in z.iter().zip(gt) {
        match (a, b) {
            (1, 1) => m11 += 1,
            (1, 0) => m10 += 1,
            (0, 1) => m01 += 1,
            (0, 0) => m00 += 1,
            _ => {
                return Err(CfcbmError::Domain(format!(
                    "non-binary entry in pair ({a}, {b})"
                )))
            }
        }
    }
    Ok((m11, m10, m01, m00))
}

/// `M11 / (M11 + M10 + M01)`; two all-zero vectors score 1.
pub fn jaccard(z: &[u8], gt: &[u8]) -> Result<f64> {
    let (m11, m10, m01, _) = counts(z, gt)?;
    let denom = m11 + m10 + m01;
    Ok(if denom == 0 {
        1.0
    } else {
        m11 as f64 / denom as f64
    })
}

/// Fraction of coordinates where the two vectors agree.
pub fn matching_accuracy(z: &[u8], gt: &[u8]) -> Result<f64> {
    let (m11, _, _, m00) = counts(z, gt)?;
    Ok(if z.is_empty() {
        1.0
    } else {
        (m11 + m00) as f64 / z.len() as f64
    })
}

/// Reduces (N·P)×L patch indicators to N×L: active if active in any patch.
pub fn example_indicator_for_matching(z: &BinaryMatrix, n_patches: usize) -> Result<BinaryMatrix> {
    if n_patches == 0 || !z.rows.is_multiple_of(n_patches) {
        return Err(CfcbmError::Dimension(format!(
            "{} patch rows do not split into groups of {n_patches}",
            z.rows
        )));
    }
    let n = z.rows / n_patches;
    let mut data = vec![0u8; n * z.cols];
    for r in 0..z.rows {
        let dst = &mut data[(r / n_patches) * z.cols..][..z.cols];
        for (d, &v) in dst.iter_mut().zip(z.row(r)) {
            *d |= v;
        }
    }
    BinaryMatrix::new(n, z.cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    /// C×L, number of class examples with the concept active.
    pub counts: Vec<Vec<u64>>,
    pub class_sizes: Vec<usize>,
    /// C×L, active in strictly more than 40% of the class's examples.
    pub active: BinaryMatrix,
}

pub fn class_concept_summary(
    indicators: &BinaryMatrix,
    labels: &[usize],
    n_classes: usize,
) -> Result<ClassSummary> {
    if labels.len() != indicators.rows {
        return Err(CfcbmError::Dimension(format!(
            "{} labels for {} indicator rows",
            labels.len(),
            indicators.rows
        )));
    }
    let l = indicators.cols;
    let mut counts = vec![vec![0u64; l]; n_classes];
    let mut sizes = vec![0usize; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(CfcbmError::Index(format!(
                "label {y} with {n_classes} classes"
            )));
        }
        sizes[y] += 1;
        for (c, &v) in counts[y].iter_mut().zip(indicators.row(i)) {
            *c += u64::from(v);
        }
    }
    let mut active = vec![0u8; n_classes * l];
    for y in 0..n_classes {
        if sizes[y] == 0 {
            continue;
        }
        for j in 0..l {
            if counts[y][j] as f64 / sizes[y] as f64 > CLASS_ACTIVE_FRACTION {
                active[y * l + j] = 1;
            }
        }
    }
    Ok(ClassSummary {
        counts,
        class_sizes: sizes,
        active: BinaryMatrix::new(n_classes, l, active)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_fraction: Option<f64>,
}

fn bin_edge(b: usize) -> f64 {
    -1.0 + BIN_WIDTH * b as f64
}

/// Half-open bin `[edge(b), edge(b+1))`; 1.0 falls in the last bin.
pub fn bin_index(s: f64) -> usize {
    let mut b = (((s + 1.0) / BIN_WIDTH).floor().max(0.0) as usize).min(N_BINS - 1);
    if b > 0 && s < bin_edge(b) {
        b -= 1;
    }
    if b + 1 < N_BINS && s >= bin_edge(b + 1) {
        b += 1;
    }
    b
}

/// Concept count and active fraction per similarity bin.
pub fn alignment_bins(
    similarities: &Matrix,
    indicators: &BinaryMatrix,
) -> Result<Vec<AlignmentBin>> {
    if similarities.shape() != (indicators.rows, indicators.cols) {
        return Err(CfcbmError::dims(
            "alignment inputs",
            similarities.shape(),
            (indicators.rows, indicators.cols),
        ));
    }
    let mut total = [0u64; N_BINS];
    let mut active = [0u64; N_BINS];
    for (&s, &z) in similarities.data().iter().zip(&indicators.data) {
        let b = bin_index(s);
        total[b] += 1;
        active[b] += u64::from(z);
    }
    Ok((0..N_BINS)
        .map(|b| AlignmentBin {
            lower: round6(bin_edge(b)),
            upper: round6(bin_edge(b + 1)),
            count: total[b],
            active_fraction: (total[b] > 0).then(|| round6(active[b] as f64 / total[b] as f64)),
        })
        .collect())
}

/// 100 × mean fraction of active entries per row.
pub fn sparsity(indicators: &BinaryMatrix) -> f64 {
    if indicators.data.is_empty() {
        return 0.0;
    }
    let on: u64 = indicators.data.iter().map(|&v| u64::from(v)).sum();
    100.0 * on as f64 / indicators.data.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub high: Vec<AlignmentBin>,
    pub low: Vec<AlignmentBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub accuracy_high: f64,
    pub accuracy_low: f64,
    pub sparsity_high: f64,
    pub sparsity_low: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard_example: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard_class: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_accuracy_example: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_accuracy_class: Option<f64>,
    /// C×L_all counts of examples with each (OR-over-patches) attribute active.
    pub per_class_activation: Vec<Vec<u64>>,
    pub alignment_bins: AlignmentReport,
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

fn mean_rowwise(
    a: &BinaryMatrix,
    b: &BinaryMatrix,
    rows: impl Iterator<Item = usize>,
    f: fn(&[u8], &[u8]) -> Result<f64>,
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in rows {
        sum += f(a.row(r), b.row(r))?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Builds the report from an inference result.
pub fn report_from_inference(ds: &EmbeddingDataset, inf: &Inference) -> Result<EvaluationReport> {
    let inputs = BatchInputs::from_dataset(ds)?;
    let per_example = example_indicator_for_matching(&inf.z, inf.n_patches)?;
    let summary = class_concept_summary(&per_example, &ds.labels, ds.n_classes)?;

    let (mut jaccard_example, mut matching_accuracy_example) = (None, None);
    if let Some(gt) = &ds.example_ground_truth {
        if (gt.rows, gt.cols) != (per_example.rows, per_example.cols) {
            return Err(CfcbmError::dims(
                "example ground truth",
                (gt.rows, gt.cols),
                (per_example.rows, per_example.cols),
            ));
        }
        jaccard_example = Some(round6(mean_rowwise(&per_example, gt, 0..gt.rows, jaccard)?));
        matching_accuracy_example = Some(round6(mean_rowwise(
            &per_example,
            gt,
            0..gt.rows,
            matching_accuracy,
        )?));
    }
    let (mut jaccard_class, mut matching_accuracy_class) = (None, None);
    if let Some(gt) = &ds.class_ground_truth {
        if (gt.rows, gt.cols) != (summary.active.rows, summary.active.cols) {
            return Err(CfcbmError::dims(
                "class ground truth",
                (gt.rows, gt.cols),
                (summary.active.rows, summary.active.cols),
            ));
        }
        let populated = || (0..ds.n_classes).filter(|&c| summary.class_sizes[c] > 0);
        jaccard_class = Some(round6(mean_rowwise(
            &summary.active,
            gt,
            populated(),
            jaccard,
        )?));
        matching_accuracy_class = Some(round6(mean_rowwise(
            &summary.active,
            gt,
            populated(),
            matching_accuracy,
        )?));
    }

    Ok(EvaluationReport {
        accuracy_high: round6(accuracy(&inf.predictions_high, &ds.labels)),
        accuracy_low: round6(accuracy(&inf.predictions_low, &ds.labels)),
        sparsity_high: round6(sparsity(&inf.z_h)),
        sparsity_low: round6(sparsity(&inf.z)),
        jaccard_example,
        jaccard_class,
        matching_accuracy_example,
        matching_accuracy_class,
        per_class_activation: summary.counts,
        alignment_bins: AlignmentReport {
            high: alignment_bins(&inputs.s_h, &inf.z_h)?,
            low: alignment_bins(&inputs.s_l, &inf.z)?,
        },
    })
}

pub fn evaluate(
    ds: &EmbeddingDataset,
    params: &ModelParams,
    hierarchy: &ConceptHierarchy,
    mode: Mode,
    tau: f64,
) -> Result<EvaluationReport> {
    report_from_inference(ds, &infer(ds, params, hierarchy, mode, tau)?)
}

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ACTIVATION_FILE: &str = "per_class_activation.csv";
pub const ALIGNMENT_FILE: &str = "alignment_bins.csv";
pub const CONFIG_FILE: &str = "effective_config.json";

pub const METRIC_COLUMNS: [&str; 8] = [
    "accuracy_high",
    "accuracy_low",
    "sparsity_high",
    "sparsity_low",
    "jaccard_example",
    "jaccard_class",
    "matching_accuracy_example",
    "matching_accuracy_class",
];

fn cell(x: Option<f64>) -> String {
    x.map(|v| round6(v).to_string()).unwrap_or_default()
}

impl EvaluationReport {
    pub fn metric_row(&self) -> Vec<String> {
        [
            Some(self.accuracy_high),
            Some(self.accuracy_low),
            Some(self.sparsity_high),
            Some(self.sparsity_low),
            self.jaccard_example,
            self.jaccard_class,
            self.matching_accuracy_example,
            self.matching_accuracy_class,
        ]
        .into_iter()
        .map(cell)
        .collect()
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CfcbmError::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CfcbmError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

/// Writes the report JSON, the metric table, per-class activation and
/// alignment plot data, plus the effective configuration when given.
/// Returns the paths written.
pub fn emit_report(
    report: &EvaluationReport,
    out_dir: &Path,
    low_names: Option<&[String]>,
    effective_config: Option<&serde_json::Value>,
) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let path = out_dir.join(REPORT_FILE);
    write_json(&path, report)?;
    written.push(path);

    let path = out_dir.join(METRICS_FILE);
    write_file(
        &path,
        &format!(
            "{}\n{}\n",
            METRIC_COLUMNS.join(","),
            report.metric_row().join(",")
        ),
    )?;
    written.push(path);

    for (name, text) in [
        (ACTIVATION_FILE, activation_csv(report, low_names)),
        (ALIGNMENT_FILE, alignment_csv(report)),
    ] {
        let path = out_dir.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }

    if let Some(cfg) = effective_config {
        let path = out_dir.join(CONFIG_FILE);
        write_json(&path, cfg)?;
        written.push(path);
    }
    Ok(written)
}

/// One row per class, one column per low-level attribute.
pub fn activation_csv(report: &EvaluationReport, low_names: Option<&[String]>) -> String {
    let l = report.per_class_activation.first().map_or(0, Vec::len);
    let header: Vec<String> = match low_names {
        Some(names) if names.len() == l => names.iter().map(|n| csv_field(n)).collect(),
        _ => (0..l).map(|j| format!("attr{j}")).collect(),
    };
    let mut text = format!("class,{}\n", header.join(","));
    for (c, row) in report.per_class_activation.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        text.push_str(&format!("{c},{}\n", cells.join(",")));
    }
    text
}

/// Both levels' bins; empty bins leave the fraction cell blank.
pub fn alignment_csv(report: &EvaluationReport) -> String {
    let mut text = String::from("level,lower,upper,count,active_fraction\n");
    for (level, bins) in [
        ("high", &report.alignment_bins.high),
        ("low", &report.alignment_bins.low),
    ] {
        for b in bins {
            text.push_str(&format!(
                "{level},{},{},{},{}\n",
                b.lower,
                b.upper,
                b.count,
                cell(b.active_fraction)
            ));
        }
    }
    text
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvaluationReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CfcbmError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
