//! Command-line front end. `run` executes one parsed command; the binary
//! turns its error into a single JSON line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maskedit_core::captions::{benchmark_variations, AttributeSpec};
use maskedit_core::diffusion::{train_toy, Architecture, TrainConfig};
use maskedit_core::edit::{edit, EditConfig};
use maskedit_core::metrics::{clip_acc, fid, gradnorm_score, overlap_area, drop_table, EmbeddingSet, DEFAULT_BINS};
use maskedit_core::Tensor;
use serde_json::json;

use crate::benchmark::{
    evaluate, job_for, make_benchmark, parse_variation, read_cells, run_degree_sweep, run_tau_c_sweep,
    write_degree_sweep, write_evaluation, write_report, write_tau_c_sweep, CaptionEditor, REFERENCE_FILE,
};
use crate::error::{io_err, Error, Result};
use crate::io::{read_numeric_rows, write_bytes, write_tensor};
use crate::llm::LlmClient;
use crate::shapes::{generate, read_corpus, write_corpus, ShapesSample};
use crate::weights::{load_weights, save_weights};

#[derive(Debug, Parser)]
#[command(name = "maskedit", version, about = "Mask-guided attribute editing on a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes corpus.
    GenShapes {
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy denoiser and structure branch on a corpus.
    TrainToy {
        #[arg(long)]
        corpus: PathBuf,
        /// Weight directory to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON training config; flags override its fields.
        #[arg(long)]
        train_config: Option<PathBuf>,
    },
    /// Edit one corpus sample.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        /// Corpus id of the source sample.
        #[arg(long)]
        id: usize,
        /// `kind:value`, e.g. `color:violet`.
        #[arg(long, conflicts_with = "target_caption")]
        variation: Option<String>,
        /// Explicit target caption instead of a variation.
        #[arg(long)]
        target_caption: Option<String>,
        #[command(flatten)]
        edit: EditArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit corpus sources with a list of variations and write a manifest
    /// plus the reconstruction reference set.
    MakeBenchmark {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of corpus sources to use, from the start.
        #[arg(long)]
        count: Option<usize>,
        /// Repeatable `kind:value`; defaults to the twelve benchmark variations.
        #[arg(long = "variation")]
        variations: Vec<String>,
        #[command(flatten)]
        edit: EditArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter sweeps over a handful of sources.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Score a benchmark directory with the toy segmenter or given predictions.
    Evaluate {
        /// The benchmark's manifest.jsonl; reference.jsonl sits next to it.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory mirroring the benchmark with `.pgm` predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overall and delta columns for a `model,val,<variation>...` CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID between two embedding files.
    Fid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Fraction of rows whose first column exceeds the second.
    ClipAcc {
        /// Rows of `sim_to_target,sim_to_source`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-row GradNorm scores.
    Gradnorm {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Optional one-score-per-line output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram overlap of two score samples.
    Overlap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum SweepKind {
    /// Structural distance and FID per structure-branch threshold.
    TauC {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
        values: Vec<f64>,
    },
    /// Inside and outside change per degree coefficient.
    Degree {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 2.0, 3.0])]
        values: Vec<f32>,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Weight directory written by train-toy.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// JSON edit config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Degree for the variations; defaults to the config's degree_c.
    #[arg(long)]
    pub degree: Option<f32>,
    /// Caption-editing endpoint; without it templates are used.
    #[arg(long, env = "MASKEDIT_LLM_ENDPOINT")]
    pub llm_endpoint: Option<String>,
    /// Use the templates even when an endpoint is configured.
    #[arg(long)]
    pub offline: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value = "color:violet")]
    pub variation: String,
    #[command(flatten)]
    pub edit: EditArgs,
    #[arg(long)]
    pub out: PathBuf,
}

impl EditArgs {
    fn config(&self) -> Result<EditConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                serde_json::from_str(&text).map_err(|source| Error::Json {
                    path: p.clone(),
                    source,
                })?
            }
            None => EditConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn editor(&self) -> CaptionEditor {
        match &self.llm_endpoint {
            Some(url) if !self.offline => CaptionEditor::Llm(LlmClient::from_env(url.clone())),
            _ => CaptionEditor::Templates,
        }
    }

    fn degree(&self, cfg: &EditConfig) -> f32 {
        self.degree.unwrap_or(cfg.degree_c)
    }
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    write_bytes(path, format!("{text}\n").as_bytes())
}

fn sample_by_id(samples: Vec<ShapesSample>, id: usize) -> Result<ShapesSample> {
    samples
        .into_iter()
        .find(|s| s.record.id == id)
        .ok_or_else(|| Error::Usage(format!("corpus has no sample with id {id}")))
}

fn sweep_jobs(args: &SweepArgs) -> Result<Vec<maskedit_core::edit::EditJob>> {
    let cfg = args.edit.config()?;
    let spec = parse_variation(&args.variation, args.edit.degree(&cfg))?;
    let editor = args.edit.editor();
    let samples = read_corpus(&args.model.corpus)?;
    samples
        .iter()
        .take(args.count)
        .map(|s| Ok(job_for(s, editor.target_caption(&s.caption, &spec)?, Some(spec.clone()), &cfg)))
        .collect()
}

fn single_column(path: &Path) -> Result<Vec<f64>> {
    read_numeric_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Usage(format!("{}: row {i} should hold one value", path.display()))),
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenShapes { count, seed, out } => {
            let samples = generate(count, seed)?;
            write_corpus(&out, &samples)?;
            print_json(json!({"samples": samples.len(), "out": out}));
        }
        Command::TrainToy {
            corpus,
            out,
            epochs,
            seed,
            train_config,
        } => {
            let mut cfg: TrainConfig = match &train_config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(io_err(p))?;
                    serde_json::from_str(&text).map_err(|source| Error::Json {
                        path: p.clone(),
                        source,
                    })?
                }
                None => TrainConfig::default(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let arch = Architecture::default();
            let samples = read_corpus(&corpus)?;
            let examples = samples
                .iter()
                .map(|s| s.train_example(&arch))
                .collect::<Result<Vec<_>>>()?;
            let trained = train_toy(&examples, arch, &cfg)?;
            save_weights(&out, &trained.denoiser, &trained.branch, Some(&cfg), &trained.epoch_losses)?;
            print_json(json!({"epoch_losses": trained.epoch_losses, "out": out}));
        }
        Command::Edit {
            model,
            id,
            variation,
            target_caption,
            edit: args,
            out,
        } => {
            let cfg = args.config()?;
            let (denoiser, branch) = load_weights(&model.weights)?;
            let sample = sample_by_id(read_corpus(&model.corpus)?, id)?;
            let (target, spec): (String, Option<AttributeSpec>) = match (variation, target_caption) {
                (Some(v), _) => {
                    let spec = parse_variation(&v, args.degree(&cfg))?;
                    (args.editor().target_caption(&sample.caption, &spec)?, Some(spec))
                }
                (None, Some(t)) => (t, None),
                (None, None) => return Err(Error::Usage("edit needs --variation or --target-caption".into())),
            };
            let job = job_for(&sample, target, spec, &cfg);
            let result = edit(&job, &denoiser, &branch)?;
            write_tensor(&out.join("edited.mten"), &result.latent)?;
            write_json(&out.join("provenance.json"), &result.provenance)?;
            print_json(json!({"target_caption": job.target_caption, "out": out}));
        }
        Command::MakeBenchmark {
            model,
            count,
            variations,
            edit: args,
            out,
        } => {
            let cfg = args.config()?;
            let degree = args.degree(&cfg);
            let specs = if variations.is_empty() {
                benchmark_variations()
                    .into_iter()
                    .map(|mut s| {
                        s.degree = degree;
                        s
                    })
                    .collect()
            } else {
                variations
                    .iter()
                    .map(|v| parse_variation(v, degree))
                    .collect::<Result<Vec<_>>>()?
            };
            let (denoiser, branch) = load_weights(&model.weights)?;
            let mut samples = read_corpus(&model.corpus)?;
            if let Some(n) = count {
                samples.truncate(n);
            }
            let bench = make_benchmark(&out, &samples, &specs, &cfg, &args.editor(), &denoiser, &branch)?;
            print_json(json!({"rows": bench.rows.len(), "reference": bench.reference.len(), "out": out}));
        }
        Command::Sweep { kind } => match kind {
            SweepKind::TauC { sweep, values } => {
                let jobs = sweep_jobs(&sweep)?;
                let (denoiser, branch) = load_weights(&sweep.model.weights)?;
                let rows = run_tau_c_sweep(&jobs, &values, &denoiser, &branch)?;
                let files = write_tau_c_sweep(&sweep.out, &rows)?;
                print_json(json!({"rows": rows, "files": files}));
            }
            SweepKind::Degree { sweep, values } => {
                let jobs = sweep_jobs(&sweep)?;
                let (denoiser, branch) = load_weights(&sweep.model.weights)?;
                let rows = run_degree_sweep(&jobs, &values, &denoiser, &branch)?;
                let files = write_degree_sweep(&sweep.out, &rows)?;
                print_json(json!({"rows": rows, "files": files}));
            }
        },
        Command::Evaluate {
            manifest,
            predictions,
            out,
        } => {
            let dir = manifest.parent().unwrap_or(Path::new("."));
            if !dir.join(REFERENCE_FILE).is_file() {
                return Err(Error::Usage(format!(
                    "{} has no {REFERENCE_FILE} next to it",
                    manifest.display()
                )));
            }
            let report = evaluate(dir, predictions.as_deref())?;
            let files = write_evaluation(&out, &report)?;
            print_json(json!({
                "reference_miou": report.reference.miou,
                "variations": report.variations,
                "overall": report.table.rows[0].overall / 100.0,
                "files": files,
            }));
        }
        Command::Report { input, out } => {
            let (variations, records) = read_cells(&input)?;
            let table = drop_table(&variations, &records)?;
            let files = write_report(&out, &table)?;
            let rows: Vec<_> = table
                .rows
                .iter()
                .map(|r| json!({"model": r.model, "overall": r.overall, "delta": r.delta}))
                .collect();
            print_json(json!({"rows": rows, "files": files}));
        }
        Command::Fid { a, b } => {
            let ea = EmbeddingSet::from_rows(&read_numeric_rows(&a)?)?;
            let eb = EmbeddingSet::from_rows(&read_numeric_rows(&b)?)?;
            print_json(json!({"fid": fid(&ea, &eb)?}));
        }
        Command::ClipAcc { input } => {
            let pairs = read_numeric_rows(&input)?
                .into_iter()
                .enumerate()
                .map(|(i, r)| match r.as_slice() {
                    [t, s] => Ok((*t, *s)),
                    _ => Err(Error::Usage(format!("{}: row {i} should hold two values", input.display()))),
                })
                .collect::<Result<Vec<_>>>()?;
            print_json(json!({"clip_acc": clip_acc(&pairs)?, "pairs": pairs.len()}));
        }
        Command::Gradnorm { logits, features, out } => {
            let l = read_numeric_rows(&logits)?;
            let f = read_numeric_rows(&features)?;
            if l.len() != f.len() {
                return Err(Error::Usage(format!("{} logit rows but {} feature rows", l.len(), f.len())));
            }
            let scores = l
                .iter()
                .zip(&f)
                .map(|(l, f)| Ok(gradnorm_score(&Tensor::from_f64(&[l.len()], l)?, &Tensor::from_f64(&[f.len()], f)?)?))
                .collect::<Result<Vec<f64>>>()?;
            if let Some(p) = &out {
                let text: String = scores.iter().map(|s| format!("{s}\n")).collect();
                write_bytes(p, text.as_bytes())?;
            }
            let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
            print_json(json!({"samples": scores.len(), "mean": mean}));
        }
        Command::Overlap { a, b, bins } => {
            let area = overlap_area(&single_column(&a)?, &single_column(&b)?, bins)?;
            print_json(json!({"overlap": area, "bins": bins}));
        }
    }
    Ok(())
}

/// The JSON line printed for a failed command.
pub fn error_line(err: &Error) -> String {
    json!({"error": {"kind": err.kind(), "message": err.to_string()}}).to_string()
}
