//! Benchmark manifests over the shapes corpus, their evaluation, and the
//! sweep and report tables built on top of them.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use maskedit_core::captions::{apply_variation, parse_caption, AttributeKind, AttributeSpec};
use maskedit_core::diffusion::{StructureBranch, ToyDenoiser};
use maskedit_core::edit::{edit, sweep_tau_c, EditConfig, EditJob, SweepProbe, SweepRow};
use maskedit_core::layout::{extract_binary_mask, LabelMap};
use maskedit_core::metrics::{drop_table, masked_rmse, ConfusionMatrix, DropTable, Region};
use maskedit_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, Error, Result};
use crate::io::{read_label_map, read_tensor, write_bytes, write_label_map, write_tensor};
use crate::llm::{template_id, LlmClient};
use crate::segment::segment;
use crate::shapes::{ShapesSample, NUM_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REFERENCE_FILE: &str = "reference.jsonl";

/// One edited sample. Paths are relative to the manifest's directory.
/// Reconstruction rows leave the variation fields empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub source_id: usize,
    pub variation_kind: Option<AttributeKind>,
    pub variation_value: Option<String>,
    pub degree: f32,
    pub source_caption: String,
    pub target_caption: String,
    pub mask_file: String,
    pub edited_file: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ManifestRow {
    /// `kind:value`, or `reference` for reconstructions.
    pub fn variation_label(&self) -> String {
        match (&self.variation_kind, &self.variation_value) {
            (Some(k), Some(v)) => format!("{}:{v}", k.as_str()),
            _ => "reference".to_string(),
        }
    }
}

/// Hex SHA-256 of the config's JSON encoding.
pub fn config_hash(config: &EditConfig) -> String {
    let json = serde_json::to_vec(config).expect("EditConfig serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `kind:value`, e.g. `color:violet` or `style:oil pastel`.
pub fn parse_variation(text: &str, degree: f32) -> Result<AttributeSpec> {
    let (kind, value) = text
        .split_once(':')
        .ok_or_else(|| Error::Core(maskedit_core::Error::Domain(format!("variation {text:?} is not kind:value"))))?;
    Ok(AttributeSpec::new(kind.trim().parse()?, value.trim(), degree)?)
}

/// Produces target captions either from the built-in templates or through
/// an LLM endpoint.
pub enum CaptionEditor {
    Templates,
    Llm(LlmClient),
}

impl CaptionEditor {
    pub fn target_caption(&self, source: &str, spec: &AttributeSpec) -> Result<String> {
        let parse = parse_caption(source)?;
        match self {
            CaptionEditor::Templates => Ok(apply_variation(&parse, spec)?),
            CaptionEditor::Llm(client) => {
                let caption = client.edit(template_id(spec.kind), source)?;
                parse_caption(&caption)?;
                Ok(caption)
            }
        }
    }
}

/// Edit job turning `sample` into its `spec` variation, or a reconstruction
/// when `spec` is `None`.
pub fn job_for(sample: &ShapesSample, target_caption: String, spec: Option<AttributeSpec>, config: &EditConfig) -> EditJob {
    let mut config = config.clone();
    if let Some(s) = &spec {
        config.degree_c = s.degree;
    }
    EditJob {
        source: sample.image.clone(),
        source_caption: sample.caption.clone(),
        target_caption,
        layout: sample.layout.clone(),
        target_class: sample.record.shape.class_id(),
        attribute: spec,
        config,
    }
}

fn slug(value: &str) -> String {
    value.replace(' ', "_")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            row: i,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("manifest rows serialise");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

/// Checks that every referenced file exists and every target caption parses.
pub fn validate_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        for f in [&r.mask_file, &r.edited_file] {
            if !dir.join(f).is_file() {
                return Err(Error::Manifest {
                    row: i,
                    message: format!("missing file {f}"),
                });
            }
        }
        parse_caption(&r.target_caption).map_err(|e| Error::Manifest {
            row: i,
            message: format!("target caption does not parse: {e}"),
        })?;
    }
    Ok(())
}

/// Written benchmark: the variation rows and the reconstruction reference set.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub rows: Vec<ManifestRow>,
    pub reference: Vec<ManifestRow>,
}

/// Edits every source with every variation, plus one reconstruction per
/// source, writing images, masks and both manifests under `out`.
pub fn make_benchmark(
    out: &Path,
    sources: &[ShapesSample],
    variations: &[AttributeSpec],
    config: &EditConfig,
    editor: &CaptionEditor,
    model: &ToyDenoiser,
    branch: &StructureBranch,
) -> Result<Benchmark> {
    let hash = config_hash(config);
    let mut rows = Vec::new();
    let mut reference = Vec::new();
    for s in sources {
        let id = s.record.id;
        let mask_rel = format!("masks/{id:05}.pgm");
        write_label_map(&out.join(&mask_rel), &s.layout)?;

        let rec_rel = format!("reference/{id:05}.mten");
        let rec = edit(&job_for(s, s.caption.clone(), None, config), model, branch)?;
        write_tensor(&out.join(&rec_rel), &rec.latent)?;
        reference.push(ManifestRow {
            source_id: id,
            variation_kind: None,
            variation_value: None,
            degree: config.degree_c,
            source_caption: s.caption.clone(),
            target_caption: s.caption.clone(),
            mask_file: mask_rel.clone(),
            edited_file: rec_rel,
            config_hash: hash.clone(),
            seed: config.seed,
        });

        for spec in variations {
            let target = editor.target_caption(&s.caption, spec)?;
            let job = job_for(s, target.clone(), Some(spec.clone()), config);
            let result = edit(&job, model, branch)?;
            let rel = format!("edited/{id:05}-{}-{}.mten", spec.kind.as_str(), slug(&spec.value));
            write_tensor(&out.join(&rel), &result.latent)?;
            rows.push(ManifestRow {
                source_id: id,
                variation_kind: Some(spec.kind),
                variation_value: Some(spec.value.clone()),
                degree: spec.degree,
                source_caption: s.caption.clone(),
                target_caption: target,
                mask_file: mask_rel.clone(),
                edited_file: rel,
                config_hash: config_hash(&job.config),
                seed: config.seed,
            });
        }
    }
    write_manifest(&out.join(MANIFEST_FILE), &rows)?;
    write_manifest(&out.join(REFERENCE_FILE), &reference)?;
    Ok(Benchmark { rows, reference })
}

/// Segmentation quality of one variation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationScore {
    pub variation: String,
    pub samples: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub reference: VariationScore,
    pub variations: Vec<VariationScore>,
    /// The variations as one row of a drop table against the reference.
    pub table: DropTable,
}

/// Where predictions for a manifest row come from.
fn prediction(dir: &Path, row: &ManifestRow, predictions: Option<&Path>) -> Result<LabelMap> {
    match predictions {
        Some(p) => read_label_map(&p.join(&row.edited_file).with_extension("pgm")),
        None => Ok(segment(&read_tensor(&dir.join(&row.edited_file))?)?),
    }
}

fn score_rows(dir: &Path, rows: &[&ManifestRow], predictions: Option<&Path>) -> Result<(usize, f64)> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES as usize);
    for r in rows {
        let gt = read_label_map(&dir.join(&r.mask_file))?;
        let pred = prediction(dir, r, predictions)?;
        cm.accumulate(&gt, &pred, None)?;
    }
    Ok((rows.len(), cm.miou()?))
}

/// Scores a benchmark directory. Predictions are read from
/// `predictions/<edited_file>.pgm` when given, otherwise produced by the toy
/// segmenter.
pub fn evaluate(dir: &Path, predictions: Option<&Path>) -> Result<EvaluationReport> {
    let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
    let reference = read_manifest(&dir.join(REFERENCE_FILE))?;
    validate_manifest(dir, &rows)?;
    validate_manifest(dir, &reference)?;
    let (n, miou) = score_rows(dir, &reference.iter().collect::<Vec<_>>(), predictions)?;
    let reference_score = VariationScore {
        variation: "reference".into(),
        samples: n,
        miou,
    };

    let mut groups: Vec<(String, Vec<&ManifestRow>)> = Vec::new();
    for r in &rows {
        let label = r.variation_label();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, g)) => g.push(r),
            None => groups.push((label, vec![r])),
        }
    }
    let mut variations = Vec::with_capacity(groups.len());
    for (label, group) in &groups {
        let (n, miou) = score_rows(dir, group, predictions)?;
        variations.push(VariationScore {
            variation: label.clone(),
            samples: n,
            miou,
        });
    }
    let names: Vec<String> = variations.iter().map(|v| v.variation.clone()).collect();
    let table = drop_table(
        &names,
        &[(
            "toy".to_string(),
            100.0 * reference_score.miou,
            variations.iter().map(|v| 100.0 * v.miou).collect(),
        )],
    )?;
    Ok(EvaluationReport {
        reference: reference_score,
        variations,
        table,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Whitespace-separated columns with a `#` header, readable by gnuplot.
fn write_dat(path: &Path, header: &[&str], blocks: &[Vec<Vec<String>>]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# {}", header.join(" ")).unwrap();
    for (i, block) in blocks.iter().enumerate() {
        if i > 0 {
            out.extend_from_slice(b"\n\n");
        }
        for row in block {
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    write_bytes(path, &out)
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// `evaluation.csv` and `evaluation.dat` under `out`.
pub fn write_evaluation(out: &Path, report: &EvaluationReport) -> Result<Vec<PathBuf>> {
    let csv_path = out.join("evaluation.csv");
    let dat_path = out.join("evaluation.dat");
    let row = &report.table.rows[0];
    let deltas = row.cell_deltas();
    let mut rows = vec![vec![
        "reference".to_string(),
        report.reference.samples.to_string(),
        num(report.reference.miou),
        num(0.0),
    ]];
    for (v, d) in report.variations.iter().zip(&deltas) {
        rows.push(vec![v.variation.clone(), v.samples.to_string(), num(v.miou), num(d / 100.0)]);
    }
    rows.push(vec![
        "overall".to_string(),
        report.variations.iter().map(|v| v.samples).sum::<usize>().to_string(),
        num(row.overall / 100.0),
        num(row.delta / 100.0),
    ]);
    write_csv(
        &csv_path,
        &["variation", "samples", "miou", "delta"].map(String::from),
        &rows,
    )?;
    let dat: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| vec![i.to_string(), r[2].clone(), r[3].clone(), format!("\"{}\"", r[0])])
        .collect();
    write_dat(&dat_path, &["index", "miou", "delta", "variation"], &[dat])?;
    Ok(vec![csv_path, dat_path])
}

/// Reads a table with header `model,val,<variation>...` (percent values).
pub fn read_cells(path: &Path) -> Result<(Vec<String>, Vec<(String, f64, Vec<f64>)>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.len() < 3 || &header[0] != "model" || &header[1] != "val" {
        return Err(format_err(path, "header must start with model,val and name at least one variation"));
    }
    let variations: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| format_err(path, format!("{v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push((rec[0].to_string(), values[0], values[1..].to_vec()));
    }
    Ok((variations, records))
}

/// `report.csv` (cells plus Overall and delta) and `report.dat` (one gnuplot
/// block per model) under `out`.
pub fn write_report(out: &Path, table: &DropTable) -> Result<Vec<PathBuf>> {
    let csv_path = out.join("report.csv");
    let dat_path = out.join("report.dat");
    let mut header = vec!["model".to_string(), "val".to_string()];
    header.extend(table.variations.iter().cloned());
    header.push("overall".into());
    header.push("delta".into());
    let fmt = |v: f64| format!("{v:.2}");
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone(), fmt(r.val)];
            row.extend(r.cells.iter().map(|&c| fmt(c)));
            row.push(fmt(r.overall));
            row.push(fmt(r.delta));
            row
        })
        .collect();
    write_csv(&csv_path, &header, &rows)?;
    let blocks: Vec<Vec<Vec<String>>> = table
        .rows
        .iter()
        .map(|r| {
            let mut block = vec![vec![format!("# {}", r.model)]];
            for (i, (c, d)) in r.cells.iter().zip(r.cell_deltas()).enumerate() {
                block.push(vec![i.to_string(), fmt(*c), fmt(d), format!("\"{}\"", table.variations[i])]);
            }
            block
        })
        .collect();
    write_dat(&dat_path, &["index", "miou", "delta", "variation"], &blocks)?;
    Ok(vec![csv_path, dat_path])
}

/// Structural distance is one minus the toy segmenter's pixel accuracy
/// against the job layout; the embedding is per-channel mean and spread.
pub struct ToyProbe;

impl ToyProbe {
    pub fn pixel_accuracy(layout: &LabelMap, pred: &LabelMap) -> f64 {
        let same = layout
            .classes()
            .iter()
            .zip(pred.classes())
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / layout.classes().len() as f64
    }
}

impl SweepProbe for ToyProbe {
    fn structural_distance(&self, job: &EditJob, edited: &Tensor) -> maskedit_core::Result<f64> {
        Ok(1.0 - Self::pixel_accuracy(&job.layout, &segment(edited)?))
    }

    fn embed(&self, image: &Tensor) -> maskedit_core::Result<Vec<f64>> {
        let c = image.dims()[0];
        let plane = image.len() / c;
        let data = image.to_f64();
        let mut out = Vec::with_capacity(2 * c);
        for ch in data.chunks(plane) {
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            out.push(mean);
            out.push(var.sqrt());
        }
        Ok(out)
    }
}

pub fn run_tau_c_sweep(
    jobs: &[EditJob],
    values: &[f64],
    model: &ToyDenoiser,
    branch: &StructureBranch,
) -> Result<Vec<SweepRow>> {
    Ok(sweep_tau_c(jobs, values, model, branch, &ToyProbe)?)
}

pub fn write_tau_c_sweep(out: &Path, rows: &[SweepRow]) -> Result<Vec<PathBuf>> {
    let csv_path = out.join("sweep_tau_c.csv");
    let dat_path = out.join("sweep_tau_c.dat");
    let opt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "nan".into());
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![num(r.tau_c), num(r.structural_distance), opt(r.fid)])
        .collect();
    write_csv(&csv_path, &["tau_c", "structural_distance", "fid"].map(String::from), &table)?;
    write_dat(&dat_path, &["tau_c", "structural_distance", "fid"], &[table])?;
    Ok(vec![csv_path, dat_path])
}

/// Mean effect of one degree value over a job set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeRow {
    pub degree: f32,
    /// RMSE between edit and source inside the target mask.
    pub inside_change: f64,
    pub outside_change: f64,
    /// Toy segmenter mIoU of the edits against the layouts.
    pub miou: f64,
}

pub fn run_degree_sweep(
    jobs: &[EditJob],
    values: &[f32],
    model: &ToyDenoiser,
    branch: &StructureBranch,
) -> Result<Vec<DegreeRow>> {
    if jobs.is_empty() {
        return Err(Error::Core(maskedit_core::Error::Domain("sweep needs at least one job".into())));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &c in values {
        let (mut inside, mut outside) = (0.0, 0.0);
        let mut cm = ConfusionMatrix::new(NUM_CLASSES as usize);
        for job in jobs {
            let mut j = job.clone();
            j.config.degree_c = c;
            let mask = extract_binary_mask(&j.layout, j.target_class)?;
            let out = edit(&j, model, branch)?.latent;
            inside += masked_rmse(&out, &j.source, &mask, Region::Inside)?;
            outside += masked_rmse(&out, &j.source, &mask, Region::Outside)?;
            cm.accumulate(&j.layout, &segment(&out)?, None)?;
        }
        let n = jobs.len() as f64;
        rows.push(DegreeRow {
            degree: c,
            inside_change: inside / n,
            outside_change: outside / n,
            miou: cm.miou()?,
        });
    }
    Ok(rows)
}

pub fn write_degree_sweep(out: &Path, rows: &[DegreeRow]) -> Result<Vec<PathBuf>> {
    let csv_path = out.join("sweep_degree.csv");
    let dat_path = out.join("sweep_degree.dat");
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![num(r.degree as f64), num(r.inside_change), num(r.outside_change), num(r.miou)])
        .collect();
    let header = ["degree", "inside_change", "outside_change", "miou"];
    write_csv(&csv_path, &header.map(String::from), &table)?;
    write_dat(&dat_path, &header, &[table])?;
    Ok(vec![csv_path, dat_path])
}
