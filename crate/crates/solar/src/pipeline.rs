//! Orchestration: run configuration, the two training loops, checkpointing,
//! corpus embedding, benchmark synthesis, and evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::evaluation::{
    aggregate, bootstrap_ci, precision, recall_at_k, BenchmarkTriplet, MetricsReport,
};
use crate::losses::{gd_loss, gla_loss, itc_loss, ld_loss, stage1_total, stage2_loss};
use crate::maskgen::{
    fit_gaussians, hard_mask, local_global_sims, qda_threshold, rho_at, MaskVector, ScheduleKind,
};
use crate::mining::{build_index, FeatureSpace, HardNegativeIndex};
use crate::model::{Adapted, Model, ModelConfig};
use crate::providers::{synth_generate, Dataset, PairedSample, SynthConfig, SynthGenerator};
use crate::rng::{mix, stream};
use crate::sample_construction::{build_group, plan_variants, Polarity};
use crate::segmentation::{adaptive_segment, score_segments, split_by_threshold, SegmentParams, Segmentation};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub d: usize,
    pub heads: usize,
    pub adapter_hidden: usize,
    pub ff_hidden: usize,
    pub layers: usize,
    pub init_eta: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper { d: 32, heads: 4, adapter_hidden: 64, ff_hidden: 64, layers: 3, init_eta: 0.07 }
    }
}

impl ModelHyper {
    pub fn to_model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            d: self.d,
            heads: self.heads,
            adapter_hidden: self.adapter_hidden,
            ff_hidden: self.ff_hidden,
            layers: self.layers,
            init_eta: self.init_eta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub anneal: ScheduleKind,
    /// defaults to steps / 2 when absent
    pub total_anneal_steps: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            batch_size: 64,
            steps: 500,
            lr: 1e-2,
            delta: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            anneal: ScheduleKind::Linear,
            total_anneal_steps: None,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub use_mined: bool,
    pub use_constructed_negatives: bool,
    /// ablation: positives from random masks instead of intersection masks
    pub random_positive_masks: bool,
    pub segment: SegmentParams,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            batch_size: 32,
            steps: 200,
            lr: 1e-2,
            use_mined: true,
            use_constructed_negatives: true,
            random_positive_masks: false,
            segment: SegmentParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub k: usize,
    pub per_anchor: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { k: 10, per_anchor: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub triplets: usize,
    pub distractors: usize,
    pub bootstrap_iters: usize,
    pub bootstrap_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { triplets: 200, distractors: 5000, bootstrap_iters: 10_000, bootstrap_level: 0.95 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub dataset_size: usize,
    pub model: ModelHyper,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub mining: MiningConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig {
                dictionary_size: 16,
                shared_concepts_per_pair: 3,
                unique_concepts_per_modality: 2,
                concept_dim: 16,
                patch_grid: (8, 8),
                text_length: 24,
                noise_sigma: 0.05,
                seed: 13,
                teacher_dim: None,
            },
            dataset_size: 512,
            model: ModelHyper::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            mining: MiningConfig::default(),
            eval: EvalConfig::default(),
            seed: 13,
            out_dir: PathBuf::from("runs/solar"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate(false)?;
        if self.stage1.batch_size < 2 {
            return Err(SolarError::Config("stage1 batch_size must be >= 2".into()));
        }
        if self.stage2.batch_size < 2 {
            return Err(SolarError::Config("stage2 batch_size must be >= 2".into()));
        }
        if self.dataset_size <= self.mining.k {
            return Err(SolarError::Config(format!(
                "dataset_size {} must exceed mining k {}",
                self.dataset_size, self.mining.k
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config(self.synth.concept_dim)
    }
}

/// Load config from an optional JSON file, apply `--set key.path=value`
/// overrides, then the SOLAR_SEED environment variable.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| SolarError::Load(format!("{}: {}", p.display(), e)))?;
            serde_json::from_str::<serde_json::Value>(&text)?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| SolarError::Config(format!("--set needs key=value, got '{s}'")))?;
        let new: serde_json::Value =
            serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let bad = || SolarError::Config(format!("cannot set '{key}': not an object"));
        let mut cur = &mut value;
        for part in &parts[..parts.len() - 1] {
            cur = cur
                .as_object_mut()
                .ok_or_else(bad)?
                .entry(part.to_string())
                .or_insert(serde_json::Value::Object(Default::default()));
        }
        cur.as_object_mut()
            .ok_or_else(bad)?
            .insert(parts[parts.len() - 1].to_string(), new.clone());
    }
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    if let Ok(seed) = std::env::var("SOLAR_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| SolarError::Config(format!("SOLAR_SEED not an integer: '{seed}'")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ----------------------------------------------------------- checkpoints

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    model: ModelConfig,
    step: usize,
    stage: u8,
}

pub fn save_checkpoint(model: &Model, step: usize, stage: u8, dir: &Path) -> Result<()> {
    // write params into a staging directory first so an interrupted save
    // never leaves a readable-but-corrupt checkpoint behind
    let staging = dir.with_extension("partial");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    model.save_params(&staging)?;
    let manifest = CheckpointManifest { model: model.cfg.clone(), step, stage };
    std::fs::write(staging.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&staging, dir)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, usize, u8)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| SolarError::Load(format!("{}: {}", dir.join("manifest.json").display(), e)))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let model = Model::load_params(manifest.model, dir)?;
    Ok((model, manifest.step, manifest.stage))
}

// ------------------------------------------------------------- training

fn sgd_step(model: &mut Model, gradients: &[Tensor], lr: f64, skip: &[&str]) {
    for (p, g) in model.params.iter_mut().zip(gradients) {
        if skip.contains(&p.name.as_str()) {
            continue;
        }
        for (w, gi) in p.tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gi;
        }
    }
}

fn batch_indices<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    assert!(batch <= n, "batch {batch} larger than dataset {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..batch {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(batch);
    pool
}

#[derive(Serialize)]
struct Stage1LogLine {
    step: usize,
    stage: u8,
    itc: f64,
    gla: f64,
    gla_l2v: f64,
    gla_v2l: f64,
    gd: f64,
    gd_vision: f64,
    gd_language: f64,
    ld: f64,
    ld_vision: f64,
    ld_language: f64,
    total: f64,
    rho: f64,
    tau_v: Option<f64>,
    tau_l: Option<f64>,
    mask_fallback: bool,
}

struct MaskSet {
    masks_v: Vec<MaskVector>,
    masks_l: Vec<MaskVector>,
    tau_v: Option<f64>,
    tau_l: Option<f64>,
    fallback: bool,
}

/// Per-sample soft masks from the batch score pools; any mask-path failure
/// (inverted signal, degenerate pools) falls back to all-ones masks.
fn batch_masks(
    tape: &Tape,
    adapted: &[Adapted],
    pools: &crate::losses::ScorePools,
    rho: f64,
) -> MaskSet {
    let attempt = || -> Result<(Vec<MaskVector>, Vec<MaskVector>, f64, f64)> {
        let (pos_v, neg_v) = fit_gaussians(&pools.pos_l2v, &pools.neg_l2v)?;
        let tau_v = qda_threshold(pos_v, neg_v)?;
        let (pos_l, neg_l) = fit_gaussians(&pools.pos_v2l, &pools.neg_v2l)?;
        let tau_l = qda_threshold(pos_l, neg_l)?;
        let mut masks_v = Vec::with_capacity(adapted.len());
        let mut masks_l = Vec::with_capacity(adapted.len());
        for a in adapted {
            let (s_l2v, s_v2l) = local_global_sims(
                tape.value(a.v_prime),
                tape.value(a.l_cls).data(),
                tape.value(a.l_prime),
                tape.value(a.v_cls).data(),
            )?;
            let hv = hard_mask(&s_l2v, tau_v);
            let hl = hard_mask(&s_v2l, tau_l);
            masks_v.push(soften(&hv, rho));
            masks_l.push(soften(&hl, rho));
        }
        Ok((masks_v, masks_l, tau_v, tau_l))
    };
    match attempt() {
        Ok((masks_v, masks_l, tau_v, tau_l)) => MaskSet {
            masks_v,
            masks_l,
            tau_v: Some(tau_v),
            tau_l: Some(tau_l),
            fallback: false,
        },
        Err(_) => MaskSet {
            masks_v: adapted
                .iter()
                .map(|a| MaskVector::ones(tape.value(a.v_prime).rows()))
                .collect(),
            masks_l: adapted
                .iter()
                .map(|a| MaskVector::ones(tape.value(a.l_prime).rows()))
                .collect(),
            tau_v: None,
            tau_l: None,
            fallback: true,
        },
    }
}

fn soften(hard: &MaskVector, rho: f64) -> MaskVector {
    let weights = hard.weights().iter().map(|&m| rho + (1.0 - rho) * m).collect();
    if rho == 0.0 {
        MaskVector::hard(weights)
    } else {
        MaskVector::soft(weights)
    }
}

fn teacher_globals(samples: &[&PairedSample], image: bool) -> Tensor {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            if image {
                s.teacher_image.global.data().to_vec()
            } else {
                s.teacher_text.global.data().to_vec()
            }
        })
        .collect();
    Tensor::from_rows(&rows)
}

pub struct Stage1Outcome {
    pub model: Model,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

pub fn train_stage1(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<Stage1Outcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let s1 = &cfg.stage1;
    let total_anneal = s1.total_anneal_steps.unwrap_or(s1.steps / 2).max(1);
    let ckpt_dir = out_dir.join("stage1");
    let log_path = out_dir.join("stage1_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;

    for step in 0..s1.steps {
        let mut rng = stream(cfg.seed, mix(0x51a6_e000, step as u64));
        let idx = batch_indices(ds.len(), s1.batch_size, &mut rng);
        let samples: Vec<&PairedSample> = idx.iter().map(|&i| &ds.samples[i]).collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let adapted: Vec<Adapted> = samples
            .iter()
            .map(|s| bound.adapt(&mut tape, s))
            .collect::<Result<_>>()?;

        let (gla, gla_l2v, gla_v2l, pools) = gla_loss(&mut tape, &adapted, s1.delta)?;

        let rho = rho_at(step, total_anneal, s1.anneal)?;
        let masks = batch_masks(&tape, &adapted, &pools, rho);

        let mut fvs = Vec::with_capacity(adapted.len());
        let mut fls = Vec::with_capacity(adapted.len());
        for (i, a) in adapted.iter().enumerate() {
            let (fv, fl) =
                bound.alignment_embeds(&mut tape, a, &masks.masks_v[i], &masks.masks_l[i])?;
            fvs.push(fv);
            fls.push(fl);
        }
        let f_v = tape.concat_rows(&fvs);
        let f_l = tape.concat_rows(&fls);
        let eta = bound.eta(&mut tape);
        let itc = itc_loss(&mut tape, f_v, f_l, eta)?;

        let v_cls_parts: Vec<Var> = adapted.iter().map(|a| a.v_cls).collect();
        let l_cls_parts: Vec<Var> = adapted.iter().map(|a| a.l_cls).collect();
        let v_cls_batch = tape.concat_rows(&v_cls_parts);
        let l_cls_batch = tape.concat_rows(&l_cls_parts);
        let gd_v = gd_loss(&mut tape, v_cls_batch, &teacher_globals(&samples, true))?;
        let gd_l = gd_loss(&mut tape, l_cls_batch, &teacher_globals(&samples, false))?;
        let gd = tape.add(gd_v, gd_l);

        let mut ld_v_terms = Vec::new();
        let mut ld_l_terms = Vec::new();
        for (a, s) in adapted.iter().zip(&samples) {
            ld_v_terms.push(ld_loss(&mut tape, a.v_prime, &s.teacher_image.locals)?);
            ld_l_terms.push(ld_loss(&mut tape, a.l_prime, &s.teacher_text.locals)?);
        }
        let ld_v_cat = tape.concat_rows(&ld_v_terms);
        let ld_v = tape.mean_all(ld_v_cat);
        let ld_l_cat = tape.concat_rows(&ld_l_terms);
        let ld_l = tape.mean_all(ld_l_cat);
        let ld = tape.add(ld_v, ld_l);

        let total = stage1_total(&mut tape, itc, gla, gd, ld, s1.lambda1, s1.lambda2, s1.lambda3);
        let total_val = tape.value(total).item();
        if !total_val.is_finite() {
            // params are still the last good state: persist them and abort
            save_checkpoint(&model, step, 1, &ckpt_dir)?;
            return Err(SolarError::NonFinite(format!(
                "stage 1 loss became non-finite at step {step}"
            )));
        }

        let line = Stage1LogLine {
            step,
            stage: 1,
            itc: tape.value(itc).item(),
            gla: tape.value(gla).item(),
            gla_l2v: tape.value(gla_l2v).item(),
            gla_v2l: tape.value(gla_v2l).item(),
            gd: tape.value(gd).item(),
            gd_vision: tape.value(gd_v).item(),
            gd_language: tape.value(gd_l).item(),
            ld: tape.value(ld).item(),
            ld_vision: tape.value(ld_v).item(),
            ld_language: tape.value(ld_l).item(),
            total: total_val,
            rho,
            tau_v: masks.tau_v,
            tau_l: masks.tau_l,
            mask_fallback: masks.fallback,
        };
        writeln!(log, "{}", serde_json::to_string(&line)?)?;

        let grads = tape.backward(total);
        let gradients = bound.gradients(&tape, &grads);
        drop(bound);
        if gradients.iter().any(|g| !g.is_finite()) {
            save_checkpoint(&model, step, 1, &ckpt_dir)?;
            return Err(SolarError::NonFinite(format!(
                "stage 1 gradients became non-finite at step {step}"
            )));
        }
        sgd_step(&mut model, &gradients, s1.lr, &[]);

        if s1.checkpoint_every > 0 && (step + 1) % s1.checkpoint_every == 0 {
            save_checkpoint(&model, step + 1, 1, &ckpt_dir)?;
        }
    }
    save_checkpoint(&model, s1.steps, 1, &ckpt_dir)?;
    Ok(Stage1Outcome { model, checkpoint_dir: ckpt_dir, log_path })
}

/// Hard-mask F1 against ground truth, averaged over samples and both
/// modalities, with thresholds fit on this set's own score pools.
/// QDA threshold with a pooled-mean fallback for score pools the Gaussian
/// model cannot separate (undertrained checkpoints, inverted signal).
fn threshold_or_mean(pos: &[f64], neg: &[f64]) -> f64 {
    fit_gaussians(pos, neg)
        .and_then(|(p, n)| qda_threshold(p, n))
        .unwrap_or_else(|_| {
            let all: f64 = pos.iter().chain(neg).sum();
            all / (pos.len() + neg.len()) as f64
        })
}

pub fn mask_f1(model: &Model, samples: &[&PairedSample], delta: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(SolarError::Config("mask_f1 needs >= 2 samples".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let adapted: Vec<Adapted> = samples
        .iter()
        .map(|s| bound.adapt(&mut tape, s))
        .collect::<Result<_>>()?;
    let (_, _, _, pools) = gla_loss(&mut tape, &adapted, delta)?;
    let tau_v = threshold_or_mean(&pools.pos_l2v, &pools.neg_l2v);
    let tau_l = threshold_or_mean(&pools.pos_v2l, &pools.neg_v2l);

    let mut f1_sum = 0.0;
    let mut count = 0usize;
    for (a, s) in adapted.iter().zip(samples) {
        let truth = s
            .ground_truth
            .as_ref()
            .ok_or_else(|| SolarError::Config(format!("sample {} has no ground truth", s.id)))?;
        let (s_l2v, s_v2l) = local_global_sims(
            tape.value(a.v_prime),
            tape.value(a.l_cls).data(),
            tape.value(a.l_prime),
            tape.value(a.v_cls).data(),
        )?;
        f1_sum += hard_mask(&s_l2v, tau_v).f1_against(&truth.0);
        f1_sum += hard_mask(&s_v2l, tau_l).f1_against(&truth.1);
        count += 2;
    }
    Ok(f1_sum / count as f64)
}

// ------------------------------------------------------------- stage 2

/// Frozen per-sample scoring artifacts reused across all stage-2 steps.
pub struct ScoredSample {
    pub s_l2v: Vec<f64>,
    pub s_v2l: Vec<f64>,
    pub seg: Segmentation,
    pub intersection: Vec<usize>,
    pub difference: Vec<usize>,
}

pub struct FrozenScoring {
    pub tau_v: f64,
    pub tau_l: f64,
    pub per_sample: Vec<ScoredSample>,
    pub eta: f64,
}

/// Run the frozen stage-1 model over the dataset once: thresholds from the
/// pooled scores, then per-sample relevance scores, segmentation, and the
/// intersection/difference split.
pub fn frozen_scoring(
    stage1: &Model,
    ds: &Dataset,
    delta: f64,
    seg_params: &SegmentParams,
) -> Result<FrozenScoring> {
    let mut tape = Tape::new();
    let bound = stage1.bind(&mut tape);
    let adapted: Vec<Adapted> = ds
        .samples
        .iter()
        .map(|s| bound.adapt(&mut tape, s))
        .collect::<Result<_>>()?;
    let (_, _, _, pools) = gla_loss(&mut tape, &adapted, delta)?;
    let tau_v = threshold_or_mean(&pools.pos_l2v, &pools.neg_l2v);
    let tau_l = threshold_or_mean(&pools.pos_v2l, &pools.neg_v2l);
    let eta = stage1.param("log_eta").tensor.item().exp();

    let mut per_sample = Vec::with_capacity(ds.len());
    for a in &adapted {
        let (s_l2v, s_v2l) = local_global_sims(
            tape.value(a.v_prime),
            tape.value(a.l_cls).data(),
            tape.value(a.l_prime),
            tape.value(a.v_cls).data(),
        )?;
        let mut seg = adaptive_segment(tape.value(a.v_prime), seg_params)?;
        score_segments(&mut seg, &s_l2v);
        let (intersection, difference) = split_by_threshold(&seg, tau_v);
        per_sample.push(ScoredSample { s_l2v, s_v2l, seg, intersection, difference });
    }
    Ok(FrozenScoring { tau_v, tau_l, per_sample, eta })
}

#[derive(Serialize)]
struct Stage2LogLine {
    step: usize,
    stage: u8,
    loss: f64,
    groups: usize,
    skipped_anchors: usize,
}

pub struct Stage2Outcome {
    pub model: Model,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

/// Joint embedding of one sample with an optional concatenated-token mask.
fn joint_embed_sample(
    tape: &mut Tape,
    bound: &crate::model::Bound,
    sample: &PairedSample,
    mask: Option<&[f64]>,
) -> Result<Var> {
    let a = bound.adapt(tape, sample)?;
    bound.joint_embed(tape, a.v_prime, a.l_prime, mask)
}

pub fn train_stage2(
    cfg: &RunConfig,
    ds: &Dataset,
    stage1: &Model,
    index: &HardNegativeIndex,
    out_dir: &Path,
) -> Result<Stage2Outcome> {
    std::fs::create_dir_all(out_dir)?;
    let s2 = &cfg.stage2;
    let scoring = frozen_scoring(stage1, ds, cfg.stage1.delta, &s2.segment)?;
    let mut model = stage1.clone();
    let frozen_names = ["proj_v", "proj_l", "log_eta"];
    let ckpt_dir = out_dir.join("stage2");
    let log_path = out_dir.join("stage2_log.jsonl");
    let mut log = std::fs::File::create(&log_path)?;
    let id_to_index: BTreeMap<&str, usize> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    for step in 0..s2.steps {
        let mut rng = stream(cfg.seed, mix(0x52a6_e000, step as u64));
        let idx = batch_indices(ds.len(), s2.batch_size, &mut rng);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);

        // anchors first; they double as each other's in-batch negatives
        let mut anchors = Vec::with_capacity(idx.len());
        for &i in &idx {
            anchors.push(joint_embed_sample(&mut tape, &bound, &ds.samples[i], None)?);
        }
        // each mined negative embedded at most once per step
        let mut mined_cache: BTreeMap<usize, Var> = BTreeMap::new();

        let mut groups = Vec::new();
        let mut skipped = 0usize;
        for (pos_in_batch, &i) in idx.iter().enumerate() {
            let sample = &ds.samples[i];
            let info = &scoring.per_sample[i];
            let mut arng = stream(cfg.seed, mix(mix(0xc0a5_7ac7, step as u64), i as u64));
            let (inter, diff): (&[usize], &[usize]) = if s2.random_positive_masks {
                // ablation: ignore the relevance split for positives
                (&all_segments(&info.seg), &info.difference)
            } else {
                (&info.intersection, &info.difference)
            };
            let tau_l = if s2.random_positive_masks { f64::NEG_INFINITY } else { scoring.tau_l };
            let variants = plan_variants(
                &sample.id,
                &info.seg,
                inter,
                diff,
                &info.s_v2l,
                tau_l,
                &mut arng,
            );
            let mut positives = Vec::new();
            let mut constructed = Vec::new();
            for v in &variants {
                let mut mask = v.image_mask.weights().to_vec();
                mask.extend_from_slice(v.text_mask.weights());
                let emb = joint_embed_sample(&mut tape, &bound, sample, Some(&mask))?;
                match v.polarity() {
                    Polarity::Positive => positives.push(emb),
                    Polarity::Negative => constructed.push(emb),
                }
            }
            if !s2.use_constructed_negatives {
                constructed.clear();
            }
            let mut mined = Vec::new();
            if s2.use_mined {
                for nid in index.sample_negatives(&sample.id, cfg.mining.per_anchor, &mut arng) {
                    let ni = *id_to_index.get(nid.as_str()).ok_or_else(|| {
                        SolarError::Config(format!("mined id {nid} not in dataset"))
                    })?;
                    let var = match mined_cache.get(&ni) {
                        Some(v) => *v,
                        None => {
                            let v =
                                joint_embed_sample(&mut tape, &bound, &ds.samples[ni], None)?;
                            mined_cache.insert(ni, v);
                            v
                        }
                    };
                    mined.push(var);
                }
            }
            let peers: Vec<Var> = anchors
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != pos_in_batch)
                .map(|(_, v)| *v)
                .collect();
            match build_group(
                &mut tape,
                anchors[pos_in_batch],
                &positives,
                &constructed,
                &mined,
                &peers,
                &mut arng,
            ) {
                Ok(g) => groups.push(g),
                Err(SolarError::Degenerate(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if groups.is_empty() {
            return Err(SolarError::Degenerate(format!(
                "stage 2 step {step}: every anchor was skipped"
            )));
        }
        let loss = stage2_loss(&mut tape, &groups, scoring.eta)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            save_checkpoint(&model, step, 2, &ckpt_dir)?;
            return Err(SolarError::NonFinite(format!(
                "stage 2 loss became non-finite at step {step}"
            )));
        }
        writeln!(
            log,
            "{}",
            serde_json::to_string(&Stage2LogLine {
                step,
                stage: 2,
                loss: loss_val,
                groups: groups.len(),
                skipped_anchors: skipped,
            })?
        )?;

        let grads = tape.backward(loss);
        let gradients = bound.gradients(&tape, &grads);
        drop(bound);
        if gradients.iter().any(|g| !g.is_finite()) {
            save_checkpoint(&model, step, 2, &ckpt_dir)?;
            return Err(SolarError::NonFinite(format!(
                "stage 2 gradients became non-finite at step {step}"
            )));
        }
        sgd_step(&mut model, &gradients, s2.lr, &frozen_names);
    }
    save_checkpoint(&model, s2.steps, 2, &ckpt_dir)?;
    Ok(Stage2Outcome { model, checkpoint_dir: ckpt_dir, log_path })
}

fn all_segments(seg: &Segmentation) -> Vec<usize> {
    (0..seg.segments.len()).collect()
}

// ------------------------------------------------------------ artifacts

/// Joint-embed the whole corpus (no masks); rows follow dataset order.
pub fn embed_corpus(model: &Model, ds: &Dataset) -> Result<(Vec<String>, Tensor)> {
    let mut ids = Vec::with_capacity(ds.len());
    let mut rows = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let emb = joint_embed_sample(&mut tape, &bound, s, None)?;
        rows.push(tape.value(emb).data().to_vec());
        ids.push(s.id.clone());
    }
    Ok((ids, Tensor::from_rows(&rows)))
}

pub fn save_embeddings(ids: &[String], table: &Tensor, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ids.json"), serde_json::to_string(ids)?)?;
    table.save(&dir.join("embeddings.solt"))
}

pub fn load_embeddings(dir: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = std::fs::read_to_string(dir.join("ids.json"))
        .map_err(|e| SolarError::Load(format!("{}: {}", dir.join("ids.json").display(), e)))?;
    let ids: Vec<String> = serde_json::from_str(&text)?;
    let table = Tensor::load(&dir.join("embeddings.solt"))?;
    if table.rows() != ids.len() {
        return Err(SolarError::Load(format!(
            "embedding table has {} rows for {} ids",
            table.rows(),
            ids.len()
        )));
    }
    Ok((ids, table))
}

/// The seven desk-scale retrieval views for hard-negative mining.
pub fn mining_spaces(model: &Model, ds: &Dataset) -> Result<Vec<FeatureSpace>> {
    let teacher_text = teacher_globals(&ds.samples.iter().collect::<Vec<_>>(), false);
    let teacher_image = teacher_globals(&ds.samples.iter().collect::<Vec<_>>(), true);
    let (_, joint) = embed_corpus(model, ds)?;

    // masked alignment embeddings with all-ones masks (no masking at mine time)
    let mut f_v_rows = Vec::with_capacity(ds.len());
    let mut f_l_rows = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = bound.adapt(&mut tape, s)?;
        let mv = MaskVector::ones(s.image.n());
        let ml = MaskVector::ones(s.text.n());
        let (fv, fl) = bound.alignment_embeds(&mut tape, &a, &mv, &ml)?;
        f_v_rows.push(tape.value(fv).data().to_vec());
        f_l_rows.push(tape.value(fl).data().to_vec());
    }
    let f_v = Tensor::from_rows(&f_v_rows);
    let f_l = Tensor::from_rows(&f_l_rows);

    Ok(vec![
        FeatureSpace::symmetric("teacher-text", teacher_text),
        FeatureSpace::symmetric("teacher-image", teacher_image),
        FeatureSpace::symmetric("stage1-joint", joint),
        FeatureSpace {
            name: "t2i".into(),
            queries: f_l.clone(),
            corpus: f_v.clone(),
        },
        FeatureSpace {
            name: "i2t".into(),
            queries: f_v.clone(),
            corpus: f_l.clone(),
        },
        FeatureSpace::symmetric("t2t", f_l),
        FeatureSpace::symmetric("i2i", f_v),
    ])
}

pub fn mine_index(model: &Model, ds: &Dataset, k: usize) -> Result<HardNegativeIndex> {
    let ids: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();
    let spaces = mining_spaces(model, ds)?;
    build_index(&ids, &spaces, k)
}

// ------------------------------------------------------------ benchmark

pub struct Benchmark {
    pub dataset: Dataset,
    pub triplets: Vec<BenchmarkTriplet>,
}

/// Synthesize an evaluation benchmark: per triplet, a positive keeps one
/// modality verbatim from the anchor while the other modality omits one
/// shared concept (an information gap — the pair still carries the full
/// content), a negative keeps the same verbatim modality but drops all of
/// the other modality's unique concepts (content is lost from the pair),
/// and a variant pairs the anchor's exact image with a text that
/// contradicts the omitted concept. Distractors are fresh random pairs.
pub fn synth_benchmark(
    synth: &SynthConfig,
    n_triplets: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<Benchmark> {
    let gen = SynthGenerator::new(synth.clone())?;
    let mut samples = Vec::new();
    let mut triplets = Vec::with_capacity(n_triplets);
    for t in 0..n_triplets {
        let mut rng = stream(seed, mix(0xbe9c_0000, t as u64));
        let recipe = gen.draw_recipe(&mut rng);
        let anchor = gen.render(&format!("bench{t}_a"), &recipe, &mut rng);

        // positive: one modality kept verbatim from the anchor while the other
        // omits one shared concept — the same scene with an information gap in
        // a single modality, so the full content survives across the pair
        let del_at = rng.gen_range(0..recipe.shared.len());
        let mut pos_recipe = recipe.clone();
        pos_recipe.shared.remove(del_at);
        let image_side = rng.gen_bool(0.5);
        let mut positive = gen.render(&format!("bench{t}_p"), &pos_recipe, &mut rng);
        if image_side {
            positive.text = anchor.text.clone();
            positive.teacher_text = anchor.teacher_text.clone();
        } else {
            positive.image = anchor.image.clone();
            positive.teacher_image = anchor.teacher_image.clone();
        }

        // negative: the mirror image of the positive — the gapped modality
        // drops all of its unique concepts instead, so that content is lost
        // from the pair entirely rather than surviving in the other modality
        let mut neg_recipe = recipe.clone();
        if image_side {
            neg_recipe.image_unique.clear();
        } else {
            neg_recipe.text_unique.clear();
        }
        let mut negative = gen.render(&format!("bench{t}_n"), &neg_recipe, &mut rng);
        if image_side {
            negative.text = anchor.text.clone();
            negative.teacher_text = anchor.teacher_text.clone();
        } else {
            negative.image = anchor.image.clone();
            negative.teacher_image = anchor.teacher_image.clone();
        }

        // variant: anchor's image verbatim with a subtly wrong text (the
        // omitted shared concept contradicted by an unseen one), forming an
        // inconsistent hard pair
        let used: Vec<usize> = recipe
            .shared
            .iter()
            .chain(&recipe.image_unique)
            .chain(&recipe.text_unique)
            .copied()
            .collect();
        let unused: Vec<usize> =
            (0..synth.dictionary_size).filter(|c| !used.contains(c)).collect();
        if unused.is_empty() {
            return Err(SolarError::Config(
                "benchmark needs a spare dictionary concept per triplet".into(),
            ));
        }
        let spare_c = unused[rng.gen_range(0..unused.len())];
        let mut var_recipe = recipe.clone();
        var_recipe.shared[del_at] = spare_c;
        let mut variant = gen.render(&format!("bench{t}_v"), &var_recipe, &mut rng);
        variant.image = anchor.image.clone();
        variant.teacher_image = anchor.teacher_image.clone();

        let triplet = BenchmarkTriplet {
            anchor: anchor.id.clone(),
            positive: positive.id.clone(),
            negative: negative.id.clone(),
            variant: Some(variant.id.clone()),
        };
        triplet.validate()?;
        triplets.push(triplet);
        samples.extend([anchor, positive, negative, variant]);
    }
    for i in 0..n_distractors {
        let mut rng = stream(seed, mix(0xd157_0000, i as u64));
        let recipe = gen.draw_recipe(&mut rng);
        samples.push(gen.render(&format!("dist{i}"), &recipe, &mut rng));
    }
    let dataset = Dataset { samples };
    dataset.validate()?;
    Ok(Benchmark { dataset, triplets })
}

/// Embed the benchmark corpus and compute the full metrics report. The
/// recall pool is every non-anchor sample; each anchor's target is its
/// positive.
pub fn evaluate(
    model: &Model,
    bench: &Benchmark,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let (ids, table) = embed_corpus(model, &bench.dataset)?;
    let embeds: BTreeMap<String, Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), table.row(i).to_vec()))
        .collect();

    let anchor_ids: std::collections::HashSet<&str> =
        bench.triplets.iter().map(|t| t.anchor.as_str()).collect();
    let mut pool_rows = Vec::new();
    let mut pool_pos: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if !anchor_ids.contains(id.as_str()) {
            pool_pos.insert(id.as_str(), pool_rows.len());
            pool_rows.push(table.row(i).to_vec());
        }
    }
    let pool = Tensor::from_rows(&pool_rows);

    let mut query_rows = Vec::with_capacity(bench.triplets.len());
    let mut targets = Vec::with_capacity(bench.triplets.len());
    for t in &bench.triplets {
        query_rows.push(
            embeds
                .get(&t.anchor)
                .ok_or_else(|| SolarError::Config(format!("missing anchor {}", t.anchor)))?
                .clone(),
        );
        targets.push(*pool_pos.get(t.positive.as_str()).ok_or_else(|| {
            SolarError::Config(format!("positive {} not in pool", t.positive))
        })?);
    }
    let queries = Tensor::from_rows(&query_rows);
    let recalls = recall_at_k(&queries, &targets, &pool, &[1, 5, 10])?;

    let (p, indicators) = precision(&bench.triplets, &embeds)?;
    let ci = bootstrap_ci(&indicators, eval_cfg.bootstrap_iters, eval_cfg.bootstrap_level, seed)?;
    Ok(aggregate(&[recalls[0], recalls[1], recalls[2]], p, bench.triplets.len(), ci))
}

// -------------------------------------------------------------- reports

/// Minimal hand-rolled SVG line plot of one numeric field over steps from a
/// JSONL training log.
pub fn render_loss_svg(log_path: &Path, field: &str, out_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(log_path)
        .map_err(|e| SolarError::Load(format!("{}: {}", log_path.display(), e)))?;
    let mut points = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(y) = v.get(field).and_then(|x| x.as_f64()) {
            points.push(y);
        }
    }
    if points.is_empty() {
        return Err(SolarError::Config(format!("no '{field}' values in {}", log_path.display())));
    }
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let ymin = points.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let yspan = if (ymax - ymin).abs() < 1e-12 { 1.0 } else { ymax - ymin };
    let n = points.len();
    let coords: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let px = pad + (w - 2.0 * pad) * i as f64 / (n.max(2) - 1) as f64;
            let py = h - pad - (h - 2.0 * pad) * (y - ymin) / yspan;
            format!("{px:.1},{py:.1}")
        })
        .collect();
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{yaxis}\" x2=\"{xend}\" y2=\"{yaxis}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yaxis}\" stroke=\"black\"/>\n",
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
            "<text x=\"{pad}\" y=\"{toplbl}\" font-size=\"12\">{field}: {ymin:.4} .. {ymax:.4}</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        yaxis = h - pad,
        xend = w - pad,
        pts = coords.join(" "),
        toplbl = pad - 10.0,
        field = field,
        ymin = ymin,
        ymax = ymax,
    );
    std::fs::write(out_path, svg)?;
    Ok(())
}

// ------------------------------------------------------------ gradcheck

/// Finite-difference verification of every training objective, including a
/// full stage-1 composite through a small model. Returns the worst relative
/// error observed.
pub fn gradcheck_suite(per_loss: usize, seed: u64) -> Result<f64> {
    use crate::numerics::grad_check;
    use crate::rng::normal;

    let mut worst: f64 = 0.0;
    let h = 1e-5;
    let randn = |rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(rng)).collect())
    };

    for case in 0..per_loss {
        let mut rng = stream(seed, mix(0x96ad, case as u64));
        let d = 3 + (case % 3);

        // gla over a 2-pair batch
        let inputs: Vec<Tensor> = (0..2)
            .flat_map(|_| {
                vec![
                    randn(&mut rng, vec![3, d]),
                    randn(&mut rng, vec![1, d]),
                    randn(&mut rng, vec![4, d]),
                    randn(&mut rng, vec![1, d]),
                ]
            })
            .collect();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let batch = vec![
                Adapted { v_prime: vars[0], v_cls: vars[1], l_prime: vars[2], l_cls: vars[3] },
                Adapted { v_prime: vars[4], v_cls: vars[5], l_prime: vars[6], l_cls: vars[7] },
            ];
            gla_loss(tape, &batch, 0.5).unwrap().0
        };
        worst = worst.max(grad_check(&f, &inputs, h)?);

        // ld and gd against a fixed teacher
        let teacher = randn(&mut rng, vec![5, d]);
        let student = randn(&mut rng, vec![5, d]);
        let f = |tape: &mut Tape, vars: &[Var]| ld_loss(tape, vars[0], &teacher).unwrap();
        worst = worst.max(grad_check(&f, &[student], h)?);
        let tg = randn(&mut rng, vec![4, d]);
        let sg = randn(&mut rng, vec![4, d]);
        let f = |tape: &mut Tape, vars: &[Var]| gd_loss(tape, vars[0], &tg).unwrap();
        worst = worst.max(grad_check(&f, &[sg], h)?);

        // itc including the temperature leaf
        let fv = randn(&mut rng, vec![3, d]);
        let fl = randn(&mut rng, vec![3, d]);
        let log_eta = Tensor::scalar(0.07f64.ln());
        let f = |tape: &mut Tape, vars: &[Var]| {
            let nv = tape.row_normalize(vars[0]);
            let nl = tape.row_normalize(vars[1]);
            let eta = tape.exp(vars[2]);
            itc_loss(tape, nv, nl, eta).unwrap()
        };
        worst = worst.max(grad_check(&f, &[fv, fl, log_eta], h)?);

        // stage-2 group loss
        let anchor = randn(&mut rng, vec![1, d]);
        let pos = randn(&mut rng, vec![2, d]);
        let neg = randn(&mut rng, vec![3, d]);
        let f = |tape: &mut Tape, vars: &[Var]| {
            let g = crate::losses::ContrastiveGroup {
                anchor: tape.row_normalize(vars[0]),
                positives: tape.row_normalize(vars[1]),
                negatives: tape.row_normalize(vars[2]),
            };
            stage2_loss(tape, &[g], 0.3).unwrap()
        };
        worst = worst.max(grad_check(&f, &[anchor, pos, neg], h)?);

        // full stage-1 composite through a small model, gradients w.r.t.
        // every parameter
        let synth = SynthConfig {
            dictionary_size: 4,
            shared_concepts_per_pair: 1,
            unique_concepts_per_modality: 1,
            concept_dim: 4,
            patch_grid: (2, 2),
            text_length: 3,
            noise_sigma: 0.1,
            seed: mix(seed, case as u64),
            teacher_dim: None,
        };
        let ds = synth_generate(&synth, 3)?;
        let model = Model::new(
            ModelConfig {
                input_dim: 4,
                d: 4,
                heads: 2,
                adapter_hidden: 4,
                ff_hidden: 4,
                layers: 1,
                init_eta: 0.07,
            },
            mix(seed, 1000 + case as u64),
        )?;
        let inputs: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let bound = model.bind_vars(vars.to_vec());
            let adapted: Vec<Adapted> =
                ds.samples.iter().map(|s| bound.adapt(tape, s).unwrap()).collect();
            let (gla, _, _, _) = gla_loss(tape, &adapted, 0.2).unwrap();
            let mut fvs = Vec::new();
            let mut fls = Vec::new();
            for (a, s) in adapted.iter().zip(&ds.samples) {
                let mv = MaskVector::soft(vec![0.7; s.image.n()]);
                let ml = MaskVector::soft(vec![0.6; s.text.n()]);
                let (fv, fl) = bound.alignment_embeds(tape, a, &mv, &ml).unwrap();
                fvs.push(fv);
                fls.push(fl);
            }
            let f_v = tape.concat_rows(&fvs);
            let f_l = tape.concat_rows(&fls);
            let eta = bound.eta(tape);
            let itc = itc_loss(tape, f_v, f_l, eta).unwrap();
            let v_cls: Vec<Var> = adapted.iter().map(|a| a.v_cls).collect();
            let l_cls: Vec<Var> = adapted.iter().map(|a| a.l_cls).collect();
            let vb = tape.concat_rows(&v_cls);
            let lb = tape.concat_rows(&l_cls);
            let samples: Vec<&PairedSample> = ds.samples.iter().collect();
            let gd_v = gd_loss(tape, vb, &teacher_globals(&samples, true)).unwrap();
            let gd_l = gd_loss(tape, lb, &teacher_globals(&samples, false)).unwrap();
            let gd = tape.add(gd_v, gd_l);
            let mut lds = Vec::new();
            for (a, s) in adapted.iter().zip(&ds.samples) {
                lds.push(ld_loss(tape, a.v_prime, &s.teacher_image.locals).unwrap());
                lds.push(ld_loss(tape, a.l_prime, &s.teacher_text.locals).unwrap());
            }
            let cat = tape.concat_rows(&lds);
            let ld = tape.mean_all(cat);
            stage1_total(tape, itc, gla, gd, ld, 1.0, 1.0, 1.0)
        };
        worst = worst.max(grad_check(&f, &inputs, h)?);
    }
    Ok(worst)
}
