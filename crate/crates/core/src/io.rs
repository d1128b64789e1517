//! Logits tables, evaluation reports and reliability-diagram rendering.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::LabeledBatch;
use crate::error::{invalid, Error, Result};
use crate::metrics::{metric_report, reliability_table, MetricReport, ReliabilityRow};
use crate::posthoc::{apply_temperature, default_grid, fit_temperature};

fn header(classes: usize) -> Vec<String> {
    std::iter::once("label".to_string())
        .chain((0..classes).map(|k| format!("logit_{k}")))
        .collect()
}

/// Writes `label,logit_0,...` rows; logits carry 17 significant digits.
pub fn write_logits<W: Write>(batch: &LabeledBatch, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{}", header(batch.classes()).join(","))?;
    let mut line = String::new();
    for (row, label) in batch.rows().zip(batch.labels()) {
        line.clear();
        write!(line, "{label}").expect("write to string");
        for z in row {
            write!(line, ",{z:.16e}").expect("write to string");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_logits<R: Read>(input: R) -> Result<LabeledBatch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let parse_err = |line: u64, message: String| Error::Parse { line, message };

    let head = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let classes = head.len().saturating_sub(1);
    if classes < 2 || head.iter().collect::<Vec<_>>() != header(classes) {
        return Err(parse_err(1, "expected header label,logit_0,...,logit_{K-1} with K >= 2".into()));
    }

    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != classes + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", classes + 1, record.len()),
            ));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[0])))?;
        if label >= classes {
            return Err(parse_err(line, format!("label {label} out of range for {classes} classes")));
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let z: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("bad logit {field:?}")))?;
            if !z.is_finite() {
                return Err(parse_err(line, format!("non-finite logit {field:?}")));
            }
            logits.push(z);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    LabeledBatch::new(logits, labels, classes)
}

pub fn write_logits_file(batch: &LabeledBatch, path: &Path) -> Result<()> {
    write_logits(batch, File::create(path)?)
}

pub fn read_logits_file(path: &Path) -> Result<LabeledBatch> {
    read_logits(File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 over the evaluated content and evaluation settings.
    pub config_hash: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bins: usize,
    pub samples: usize,
    pub classes: usize,
    pub pre: MetricReport,
    pub post: Option<MetricReport>,
    pub temperature: Option<f64>,
    pub reliability_pre: Vec<ReliabilityRow>,
    pub reliability_post: Option<Vec<ReliabilityRow>>,
    pub provenance: Provenance,
}

fn hash_batch(hasher: &mut Sha256, batch: &LabeledBatch) {
    hasher.update((batch.len() as u64).to_le_bytes());
    hasher.update((batch.classes() as u64).to_le_bytes());
    for &l in batch.labels() {
        hasher.update((l as u64).to_le_bytes());
    }
    for z in batch.logits() {
        hasher.update(z.to_bits().to_le_bytes());
    }
}

/// Metrics of `test` and, when `validation` is given, a temperature fitted
/// on it together with the post-scaling metrics of `test`.
///
/// Both batches are put in canonical row order first, so the report does
/// not depend on how the rows were ordered.
pub fn evaluate(
    test: &LabeledBatch,
    validation: Option<&LabeledBatch>,
    bins: usize,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let test = test.canonicalized();
    let validation = validation.map(LabeledBatch::canonicalized);

    let mut hasher = Sha256::new();
    hasher.update((bins as u64).to_le_bytes());
    hash_batch(&mut hasher, &test);
    if let Some(val) = &validation {
        if val.classes() != test.classes() {
            return Err(invalid("validation and test files disagree on the class count"));
        }
        hasher.update(b"fit-temperature");
        hash_batch(&mut hasher, val);
    }
    let config_hash = hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").expect("write to string");
            s
        });

    let pre = metric_report(&test, bins)?;
    let reliability_pre = reliability_table(&test, bins)?;
    let (post, temperature, reliability_post) = match &validation {
        Some(val) => {
            let t = fit_temperature(val, &default_grid(), bins)?.temperature;
            let scaled = apply_temperature(&test, t)?;
            let mut post = metric_report(&scaled, bins)?;
            post.temperature = Some(t);
            (Some(post), Some(t), Some(reliability_table(&scaled, bins)?))
        }
        None => (None, None, None),
    };

    Ok(EvalReport {
        bins,
        samples: test.len(),
        classes: test.classes(),
        pre,
        post,
        temperature,
        reliability_pre,
        reliability_post,
        provenance: Provenance { config_hash, seed },
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Static SVG reliability diagram: accuracy bars per nonempty bin, the
/// identity diagonal, and the over/under-confidence gap drawn on each bar.
pub fn reliability_svg(rows: &[ReliabilityRow], bins: usize) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let x = |v: f64| PAD + v * SIZE;
    let y = |v: f64| PAD + (1.0 - v) * SIZE;
    let total = SIZE + 2.0 * PAD;

    let mut svg = String::new();
    let w = &mut svg;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    )
    .unwrap();
    writeln!(w, r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for row in rows {
        let (left, right) = (x(row.lo), x(row.hi));
        let width = right - left;
        let (acc_top, conf_top) = (y(row.accuracy), y(row.confidence));
        writeln!(
            w,
            r##"<rect x="{left:.3}" y="{acc_top:.3}" width="{width:.3}" height="{:.3}" fill="#3b6ea5" stroke="#1d3b5c"/>"##,
            y(0.0) - acc_top
        )
        .unwrap();
        let (gap_top, gap_bottom) = (acc_top.min(conf_top), acc_top.max(conf_top));
        writeln!(
            w,
            r##"<rect x="{left:.3}" y="{gap_top:.3}" width="{width:.3}" height="{:.3}" fill="#d9534f" fill-opacity="0.4"/>"##,
            gap_bottom - gap_top
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">Confidence ({bins} bins)</text>"#,
        x(0.5),
        total - 10.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="14" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 14 {})">Accuracy</text>"#,
        y(0.5),
        y(0.5)
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}
