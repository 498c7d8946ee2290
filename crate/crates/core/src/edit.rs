//! One attribute edit: invert the source, then resample under the target
//! caption with feature and attention injection, mask-guided attention and
//! the structure branch, each switched by its own step gate.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::captions::{caption_diff, AttributeSpec};
use crate::diffusion::model::{BranchOutput, ForwardOptions, LayerBiases, StructureBranch, ToyDenoiser, NULL_TOKEN};
use crate::diffusion::sampler::{invert_with, sample_with, Evaluation, StepRecord};
use crate::diffusion::schedule::{cfg_mix, make_schedule};
use crate::diffusion::{chw_to_pixels, pixels_to_chw};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::layout::{extract_binary_mask, BinaryMask, LabelMap};
use crate::metrics::{fid, EmbeddingSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Fraction of steps, from the noisiest, with decoder feature injection.
    pub tau_f: f64,
    /// Fraction of steps with self-attention map injection.
    #[serde(rename = "tau_A", alias = "tau_a")]
    pub tau_a: f64,
    /// Noise level, as a fraction of the schedule, down to which the
    /// structure branch stays active. Smaller means longer.
    pub tau_c: f64,
    /// Same convention as `tau_c`, for mask-guided attention.
    pub tau_m: f64,
    pub guidance_scale: f64,
    #[serde(rename = "T_sample", alias = "t_sample")]
    pub t_sample: usize,
    #[serde(rename = "T_invert", alias = "t_invert")]
    pub t_invert: usize,
    pub seed: u64,
    pub degree_c: f32,
    /// Turns mask-guided attention off entirely, for ablations.
    pub mask_guidance: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            tau_f: 0.8,
            tau_a: 0.5,
            tau_c: 0.5,
            tau_m: 0.0,
            guidance_scale: 7.5,
            t_sample: 50,
            t_invert: 1000,
            seed: 1,
            degree_c: 1.0,
            mask_guidance: true,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_f", self.tau_f), ("tau_A", self.tau_a), ("tau_c", self.tau_c), ("tau_m", self.tau_m)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(domain_err!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.t_sample == 0 || self.t_invert == 0 {
            return Err(domain_err!("step counts must be positive"));
        }
        if !self.guidance_scale.is_finite() {
            return Err(domain_err!("guidance scale must be finite"));
        }
        if !(self.degree_c >= 0.0 && self.degree_c.is_finite()) {
            return Err(domain_err!("degree_c must be finite and non-negative"));
        }
        Ok(())
    }

    /// Gate decisions of step `step` out of `total`, counted from the noisiest.
    pub fn gates(&self, step: usize, total: usize) -> StepGates {
        StepGates {
            features: injection_gate(step, total, self.tau_f),
            maps: injection_gate(step, total, self.tau_a),
            structure: until_gate(step, total, self.tau_c),
            mask: self.mask_guidance && until_gate(step, total, self.tau_m),
        }
    }
}

// absorbs round-off such as 0.7 * 10 = 7.000000000000001
fn ceil_steps(tau: f64, total: usize) -> usize {
    libm::ceil(tau * total as f64 - 1e-9).max(0.0) as usize
}

/// True for the first `ceil(tau * total)` steps.
pub fn injection_gate(step: usize, total: usize, tau: f64) -> bool {
    step < ceil_steps(tau, total)
}

/// True while the noise level is above `tau` of the schedule, i.e. for the
/// first `ceil((1 - tau) * total)` steps. `tau = 0` keeps the gate open for
/// every step.
pub fn until_gate(step: usize, total: usize, tau: f64) -> bool {
    step < ceil_steps(1.0 - tau, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGates {
    pub features: bool,
    pub maps: bool,
    pub structure: bool,
    pub mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditJob {
    /// Source latent, `C x H x W`.
    pub source: Tensor,
    pub source_caption: String,
    pub target_caption: String,
    pub layout: LabelMap,
    pub target_class: u16,
    /// `None` for a reconstruction with an unchanged caption.
    pub attribute: Option<AttributeSpec>,
    pub config: EditConfig,
}

impl EditJob {
    pub fn mode(&self) -> EditMode {
        match &self.attribute {
            Some(a) if !a.kind.is_local() => EditMode::Global,
            _ => EditMode::Local,
        }
    }

    /// Region the edit is confined to: the target class in local mode, the
    /// whole image in global mode.
    pub fn edit_mask(&self) -> Result<BinaryMask> {
        match self.mode() {
            EditMode::Global => Ok(BinaryMask::ones(self.layout.height(), self.layout.width())),
            EditMode::Local => {
                if !self.layout.contains_class(self.target_class) {
                    return Err(domain_err!("target class {} is absent from the layout", self.target_class));
                }
                extract_binary_mask(&self.layout, self.target_class)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProvenance {
    pub step: usize,
    pub level: usize,
    /// Inversion record the injected quantities came from.
    pub source_step: usize,
    pub gates: StepGates,
}

/// Everything needed to audit an edit after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: EditConfig,
    pub mode: EditMode,
    pub source_caption: String,
    pub target_caption: String,
    pub target_class: u16,
    pub attribute: Option<AttributeSpec>,
    /// Target-caption token positions boosted by cross-attention.
    pub attribute_tokens: Vec<usize>,
    pub inversion_gates: Vec<StepGates>,
    pub steps: Vec<StepProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub latent: Tensor,
    pub provenance: Provenance,
}

struct Branches<'a> {
    model: &'a ToyDenoiser,
    guidance: f64,
    uncond: [usize; 1],
}

/// Per-branch injection sources: conditional first.
struct Inject<'a> {
    features: Option<[&'a [f64]; 2]>,
    maps: Option<[[&'a [f64]; 2]; 2]>,
}

impl Branches<'_> {
    fn guided(
        &self,
        x: &[f64],
        level: usize,
        tokens: &[usize],
        cond_bias: Option<&LayerBiases>,
        uncond_bias: Option<&LayerBiases>,
        structure: Option<&BranchOutput>,
        inject: &Inject<'_>,
    ) -> Result<Evaluation> {
        let mut eps = Vec::with_capacity(2);
        let mut features = Vec::with_capacity(2);
        let mut maps = Vec::with_capacity(2);
        for (b, (toks, bias)) in [(tokens, cond_bias), (&self.uncond[..], uncond_bias)].into_iter().enumerate() {
            let opts = ForwardOptions {
                biases: bias,
                inject_features: inject.features.map(|f| f[b]),
                inject_maps: match inject.maps {
                    Some(m) => [Some(m[b][0]), Some(m[b][1])],
                    None => [None, None],
                },
                structure,
            };
            let out = self.model.forward(x, level, toks, opts)?;
            eps.push(out.eps);
            features.push(out.features);
            maps.push(out.maps);
        }
        Ok(Evaluation {
            eps: cfg_mix(&eps[1], &eps[0], self.guidance),
            features,
            maps,
        })
    }
}

fn record_f64(r: &StepRecord) -> (Vec<Vec<f64>>, Vec<[Vec<f64>; 2]>) {
    (
        r.features.iter().map(Tensor::to_f64).collect(),
        r.maps.iter().map(|[a, b]| [a.to_f64(), b.to_f64()]).collect(),
    )
}

/// Runs one edit. The result is a deterministic function of the job, the
/// model and the branch.
pub fn edit(job: &EditJob, model: &ToyDenoiser, branch: &StructureBranch) -> Result<EditOutput> {
    let cfg = &job.config;
    cfg.validate()?;
    if !model.is_trained() {
        return Err(Error::Untrained);
    }
    let arch = model.architecture();
    let dims = [arch.in_channels, arch.grid, arch.grid];
    if job.source.dims() != dims {
        return Err(shape_err!("source latent is {:?}, model expects {:?}", job.source.dims(), dims));
    }
    if (job.layout.height(), job.layout.width()) != (arch.grid, arch.grid) {
        return Err(shape_err!(
            "layout is {}x{}, model grid is {}",
            job.layout.height(),
            job.layout.width(),
            arch.grid
        ));
    }
    if let Some(a) = &job.attribute {
        a.validate()?;
    }
    let src_tokens = arch.tokenize(&job.source_caption)?;
    let tgt_tokens = arch.tokenize(&job.target_caption)?;
    let mode = job.mode();
    let mask = job.edit_mask()?;
    let attr = caption_diff(&job.source_caption, &job.target_caption);

    let grids = arch.attention_grids();
    let self_only = LayerBiases::from_mask(&mask, grids, None)?;
    let target_bias = LayerBiases::from_mask(&mask, grids, Some((&attr, tgt_tokens.len(), cfg.degree_c)))?;
    let (structure, _) = branch.forward(&job.layout)?;
    let schedule = make_schedule(arch.train_steps, arch.beta_min, arch.beta_max)?;
    let runner = Branches {
        model,
        guidance: cfg.guidance_scale,
        uncond: [NULL_TOKEN],
    };
    let no_inject = Inject {
        features: None,
        maps: None,
    };

    let (ts, ti) = (cfg.t_sample, cfg.t_invert);
    let align = |s: usize| s * ti / ts;
    let sample_gates: Vec<StepGates> = (0..ts).map(|s| cfg.gates(s, ts)).collect();
    let mut wanted = alloc::vec![false; ti];
    for (s, g) in sample_gates.iter().enumerate() {
        if g.features || g.maps {
            wanted[align(s)] = true;
        }
    }

    // The inversion mirrors the sampling conditions at each level, with the
    // source caption; the clean level borrows the gates of the last step.
    let mut inversion_gates = Vec::with_capacity(ti);
    let trajectory = invert_with(
        &chw_to_pixels(&job.source)?,
        dims,
        ti,
        &schedule,
        |step, level, x| {
            let g = cfg.gates(step.unwrap_or(ti - 1), ti);
            if step.is_some() {
                inversion_gates.push(g);
            }
            let bias = g.mask.then_some(&self_only);
            runner.guided(x, level, &src_tokens, bias, bias, g.structure.then_some(&structure), &no_inject)
        },
        |s| wanted[s],
    )?;
    inversion_gates.reverse();

    let mut steps = Vec::with_capacity(ts);
    let x = sample_with(&chw_to_pixels(&trajectory.final_latent)?, ts, &schedule, |s, level, x| {
        let g = sample_gates[s];
        let source_step = align(s);
        let record = if g.features || g.maps {
            let r = trajectory
                .records
                .iter()
                .find(|r| r.step == source_step)
                .expect("every gated step has a record");
            Some(record_f64(r))
        } else {
            None
        };
        let inject = Inject {
            features: record
                .as_ref()
                .filter(|_| g.features)
                .map(|(f, _)| [f[0].as_slice(), f[1].as_slice()]),
            maps: record
                .as_ref()
                .filter(|_| g.maps)
                .map(|(_, m)| [[m[0][0].as_slice(), m[0][1].as_slice()], [m[1][0].as_slice(), m[1][1].as_slice()]]),
        };
        steps.push(StepProvenance {
            step: s,
            level,
            source_step,
            gates: g,
        });
        let (cond, uncond) = if g.mask { (Some(&target_bias), Some(&self_only)) } else { (None, None) };
        Ok(runner
            .guided(x, level, &tgt_tokens, cond, uncond, g.structure.then_some(&structure), &inject)?
            .eps)
    })?;

    Ok(EditOutput {
        latent: pixels_to_chw(&x, dims[0], dims[1], dims[2])?,
        provenance: Provenance {
            config: cfg.clone(),
            mode,
            source_caption: job.source_caption.clone(),
            target_caption: job.target_caption.clone(),
            target_class: job.target_class,
            attribute: job.attribute.clone(),
            attribute_tokens: attr.indices().to_vec(),
            inversion_gates,
            steps,
        },
    })
}

/// Caller-supplied measurements for [`sweep_tau_c`].
pub trait SweepProbe {
    /// Distance between the structure of `edited` and the job's layout.
    fn structural_distance(&self, job: &EditJob, edited: &Tensor) -> Result<f64>;
    /// Feature vector for the realism comparison.
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_c: f64,
    /// Mean structural distance over the jobs.
    pub structural_distance: f64,
    /// FID between edited and source embeddings; needs two or more jobs.
    pub fid: Option<f64>,
}

/// Re-runs every job for each `tau_c` value.
pub fn sweep_tau_c(
    jobs: &[EditJob],
    values: &[f64],
    model: &ToyDenoiser,
    branch: &StructureBranch,
    probe: &dyn SweepProbe,
) -> Result<Vec<SweepRow>> {
    if jobs.is_empty() {
        return Err(domain_err!("sweep needs at least one job"));
    }
    let sources = jobs
        .iter()
        .map(|j| probe.embed(&j.source))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for &tau_c in values {
        let mut dist = 0.0;
        let mut edited = Vec::with_capacity(jobs.len());
        for job in jobs {
            let mut j = job.clone();
            j.config.tau_c = tau_c;
            let out = edit(&j, model, branch)?;
            dist += probe.structural_distance(&j, &out.latent)?;
            edited.push(probe.embed(&out.latent)?);
        }
        let fid = if jobs.len() >= 2 {
            Some(fid(&EmbeddingSet::from_rows(&edited)?, &EmbeddingSet::from_rows(&sources)?)?)
        } else {
            None
        };
        rows.push(SweepRow {
            tau_c,
            structural_distance: dist / jobs.len() as f64,
            fid,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::AttributeKind;
    use crate::diffusion::Architecture;
    use crate::metrics::{masked_rmse, Region};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_examples() {
        let on: Vec<usize> = (0..50).filter(|&s| injection_gate(s, 50, 0.8)).collect();
        assert_eq!(on, (0..40).collect::<Vec<_>>());
        assert!((0..50).all(|s| injection_gate(s, 50, 1.0)));
        assert!((0..50).all(|s| until_gate(s, 50, 0.0)));
        assert!((0..50).all(|s| !injection_gate(s, 50, 0.0)));
        assert_eq!((0..10).filter(|&s| injection_gate(s, 10, 0.7)).count(), 7);
        assert_eq!((0..50).filter(|&s| until_gate(s, 50, 0.5)).count(), 25);
        assert_eq!((0..50).filter(|&s| until_gate(s, 50, 0.8)).count(), 10);
        let g = EditConfig::default().gates(30, 50);
        assert_eq!(
            g,
            StepGates {
                features: true,
                maps: false,
                structure: false,
                mask: true
            }
        );
    }

    #[test]
    fn config_json_uses_symbol_names() {
        let json = serde_json::to_string(&EditConfig::default()).unwrap();
        assert!(json.contains("\"tau_A\":0.5") && json.contains("\"T_sample\":50"));
        let back: EditConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, EditConfig::default());
        let partial: EditConfig = serde_json::from_str(r#"{"tau_c":0.25}"#).unwrap();
        assert_eq!(partial.tau_c, 0.25);
        assert_eq!(partial.t_invert, 1000);
    }

    #[test]
    fn config_validation() {
        let bad = EditConfig {
            tau_m: 1.5,
            ..EditConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EditConfig {
            t_sample: 0,
            ..EditConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_setup() -> (ToyDenoiser, StructureBranch, EditJob) {
        let arch = Architecture {
            grid: 4,
            widths: [4, 6],
            time_dim: 4,
            time_hidden: 6,
            embed_dim: 4,
            max_tokens: 12,
            layout_classes: 3,
            ..Architecture::default()
        };
        let mut model = ToyDenoiser::new(arch.clone(), 2).unwrap();
        model.mark_trained();
        let branch = StructureBranch::new(arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = Tensor::new(alloc::vec![3, 4, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let layout = LabelMap::new(4, 4, 3, alloc::vec![0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        let job = EditJob {
            source,
            source_caption: "a photo of a red square.".into(),
            target_caption: "a photo of a blue square.".into(),
            layout,
            target_class: 1,
            attribute: Some(AttributeSpec::new(AttributeKind::Color, "blue", 1.0).unwrap()),
            config: EditConfig {
                t_sample: 6,
                t_invert: 12,
                ..EditConfig::default()
            },
        };
        (model, branch, job)
    }

    #[test]
    fn provenance_matches_recomputed_gates() {
        let (model, branch, job) = tiny_setup();
        let out = edit(&job, &model, &branch).unwrap();
        let p = &out.provenance;
        assert_eq!(p.attribute_tokens, alloc::vec![4]);
        assert_eq!(p.mode, EditMode::Local);
        assert_eq!(p.steps.len(), 6);
        for sp in &p.steps {
            assert_eq!(sp.gates, job.config.gates(sp.step, 6));
            assert_eq!(sp.source_step, sp.step * 2);
        }
        for (s, g) in p.inversion_gates.iter().enumerate() {
            assert_eq!(*g, job.config.gates(s, 12));
        }
        let json = serde_json::to_string(p).unwrap();
        let back: Provenance = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, p);
    }

    #[test]
    fn edits_are_deterministic() {
        let (model, branch, job) = tiny_setup();
        let a = edit(&job, &model, &branch).unwrap();
        let b = edit(&job, &model, &branch).unwrap();
        assert_eq!(a.latent.data(), b.latent.data());
    }

    #[test]
    fn all_ones_mask_with_zero_degree_matches_disabled_guidance() {
        let (model, branch, mut job) = tiny_setup();
        job.attribute = Some(AttributeSpec::new(AttributeKind::Style, "sketch", 0.0).unwrap());
        job.target_caption = "a sketch of a red square.".into();
        job.config.degree_c = 0.0;
        let on = edit(&job, &model, &branch).unwrap();
        job.config.mask_guidance = false;
        let off = edit(&job, &model, &branch).unwrap();
        assert_eq!(on.provenance.mode, EditMode::Global);
        for (a, b) in on.latent.data().iter().zip(off.latent.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn error_cases() {
        let (mut model, branch, job) = tiny_setup();
        let mut absent = job.clone();
        absent.target_class = 2;
        absent.layout = LabelMap::filled(4, 4, 3, 0).unwrap();
        assert!(matches!(edit(&absent, &model, &branch), Err(Error::Domain(_))));
        let mut vocab = job.clone();
        vocab.target_caption = "a photo of a purple square.".into();
        assert!(matches!(edit(&vocab, &model, &branch), Err(Error::Vocabulary(_))));
        model = ToyDenoiser::new(model.architecture().clone(), 0).unwrap();
        assert!(matches!(edit(&job, &model, &branch), Err(Error::Untrained)));
    }

    struct Rmse;
    impl SweepProbe for Rmse {
        fn structural_distance(&self, job: &EditJob, edited: &Tensor) -> Result<f64> {
            masked_rmse(&job.source, edited, &BinaryMask::ones(4, 4), Region::Inside)
        }
        fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
            Ok(image.to_f64()[..2].to_vec())
        }
    }

    #[test]
    fn sweep_shapes() {
        let (model, branch, job) = tiny_setup();
        let rows = sweep_tau_c(core::slice::from_ref(&job), &[0.5], &model, &branch, &Rmse).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].fid.is_none());
        let rows = sweep_tau_c(&[job.clone(), job], &[0.0, 1.0], &model, &branch, &Rmse).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].fid.is_some());
        assert!(sweep_tau_c(&[], &[0.5], &model, &branch, &Rmse).is_err());
    }
}
