//! Frozen per-sample token features: synthesized with planted
//! intersection/difference structure, or loaded from fixture directories.
//!
//! Synthetic pairs stand in for pretrained backbones. Each pair shares a set
//! of dictionary concepts between modalities (the intersection) and fills the
//! rest with modality-unique concepts, so ground-truth masks are known.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::maskgen::MaskVector;
use crate::rng::{mix, normal, stream};
use crate::tensor::{dot, matmul, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Language,
}

/// Token/patch-level feature matrix for one modality of one sample.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// the modality CLS feature
    pub global: Tensor,
    /// n×d local features
    pub locals: Tensor,
    pub modality: Modality,
    /// (rows, cols) with rows·cols = n, vision only, row-major patch order
    pub grid: Option<(usize, usize)>,
}

impl FeatureSequence {
    pub fn n(&self) -> usize {
        self.locals.rows()
    }

    pub fn dim(&self) -> usize {
        self.locals.cols()
    }

    pub fn validate(&self, id: &str) -> Result<()> {
        if self.locals.rows() < 1 {
            return Err(SolarError::Load(format!("sample {}: empty locals", id)));
        }
        if self.global.len() != self.locals.cols() {
            return Err(SolarError::Load(format!(
                "sample {}: global dim {} != local dim {}",
                id,
                self.global.len(),
                self.locals.cols()
            )));
        }
        if let Some((r, c)) = self.grid {
            if r * c != self.locals.rows() {
                return Err(SolarError::Load(format!(
                    "sample {}: grid {}x{} != {} locals",
                    id,
                    r,
                    c,
                    self.locals.rows()
                )));
            }
        }
        if !self.locals.is_finite() || !self.global.is_finite() {
            return Err(SolarError::Load(format!("sample {}: non-finite feature", id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub image: FeatureSequence,
    pub text: FeatureSequence,
    pub teacher_image: FeatureSequence,
    pub teacher_text: FeatureSequence,
    /// present iff the sample is synthetic
    pub ground_truth: Option<(MaskVector, MaskVector)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dictionary_size: usize,
    pub shared_concepts_per_pair: usize,
    pub unique_concepts_per_modality: usize,
    pub concept_dim: usize,
    pub patch_grid: (usize, usize),
    pub text_length: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// teacher feature dimensionality; defaults to concept_dim
    #[serde(default)]
    pub teacher_dim: Option<usize>,
}

impl SynthConfig {
    pub fn validate(&self, allow_zero_shared: bool) -> Result<()> {
        let min_shared = if allow_zero_shared { 0 } else { 1 };
        if self.dictionary_size < 1
            || self.shared_concepts_per_pair < min_shared
            || self.unique_concepts_per_modality < 1
            || self.concept_dim < 1
            || self.patch_grid.0 < 1
            || self.patch_grid.1 < 1
            || self.text_length < 1
        {
            return Err(SolarError::Config("all synth counts must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SolarError::Config("noise_sigma must be >= 0".into()));
        }
        if self.dictionary_size > self.concept_dim {
            return Err(SolarError::Config(format!(
                "dictionary_size {} exceeds concept_dim {}; concepts must be orthogonalizable",
                self.dictionary_size, self.concept_dim
            )));
        }
        let per_pair = self.shared_concepts_per_pair + 2 * self.unique_concepts_per_modality;
        if per_pair > self.dictionary_size {
            return Err(SolarError::Config(format!(
                "pair needs {} distinct concepts but dictionary has {}",
                per_pair, self.dictionary_size
            )));
        }
        let img_concepts = self.shared_concepts_per_pair + self.unique_concepts_per_modality;
        if img_concepts > self.patch_grid.0 * self.patch_grid.1 {
            return Err(SolarError::Config(format!(
                "grid {}x{} too small to place {} concepts",
                self.patch_grid.0, self.patch_grid.1, img_concepts
            )));
        }
        if img_concepts > self.text_length {
            return Err(SolarError::Config(format!(
                "text_length {} too small to place {} concepts",
                self.text_length, img_concepts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PairedSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn student_dim(&self) -> usize {
        self.samples[0].image.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(SolarError::Load("empty dataset".into()));
        }
        let d = self.samples[0].image.dim();
        let td = self.samples[0].teacher_image.dim();
        for s in &self.samples {
            s.image.validate(&s.id)?;
            s.text.validate(&s.id)?;
            s.teacher_image.validate(&s.id)?;
            s.teacher_text.validate(&s.id)?;
            if s.image.dim() != d || s.text.dim() != d {
                return Err(SolarError::Load(format!(
                    "sample {}: student dim {} != dataset dim {}",
                    s.id,
                    s.image.dim(),
                    d
                )));
            }
            if s.teacher_image.dim() != td || s.teacher_text.dim() != td {
                return Err(SolarError::Load(format!(
                    "sample {}: teacher dim mismatch",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Orthonormal concept dictionary: rows of a random Gaussian matrix passed
/// through Gram-Schmidt. Orthogonality makes the zero-noise separation
/// between intersection and difference positions exact.
fn concept_dictionary(size: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 0xd1c7);
    let mut dict: Vec<Vec<f64>> = Vec::with_capacity(size);
    while dict.len() < size {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        for u in &dict {
            let proj = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let nv = norm(&v);
        if nv < 1e-6 {
            continue;
        }
        for vi in &mut v {
            *vi /= nv;
        }
        dict.push(v);
    }
    dict
}

fn teacher_map(cfg: &SynthConfig) -> Option<Tensor> {
    let td = cfg.teacher_dim?;
    if td == cfg.concept_dim {
        return None;
    }
    let mut rng = stream(cfg.seed, 0x7eac);
    let data: Vec<f64> = (0..cfg.concept_dim * td).map(|_| normal(&mut rng)).collect();
    Some(Tensor::new(vec![cfg.concept_dim, td], data))
}

/// Split `total` positions into `parts` contiguous runs (sizes as even as
/// possible) and return the run for each part.
fn contiguous_spans(total: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = total / parts;
    let extra = total % parts;
    let mut spans = Vec::with_capacity(parts);
    let mut pos = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        spans.push(pos..pos + len);
        pos += len;
    }
    spans
}

struct RenderedModality {
    locals: Tensor,
    global: Tensor,
    teacher_locals: Tensor,
    teacher_global: Tensor,
    gt: Vec<f64>,
}

/// Lay out `concepts` (flagged shared/unique) as contiguous spans over
/// `length` positions, emit noisy student and teacher views.
fn render_modality<R: Rng>(
    dict: &[Vec<f64>],
    concepts: &[(usize, bool)],
    length: usize,
    sigma: f64,
    tmap: Option<&Tensor>,
    rng: &mut R,
) -> RenderedModality {
    let d = dict[0].len();
    let spans = contiguous_spans(length, concepts.len());
    let mut locals = vec![0.0; length * d];
    let mut gt = vec![0.0; length];
    let mut clean = vec![0.0; length * d];
    for ((ci, shared), span) in concepts.iter().zip(&spans) {
        for p in span.clone() {
            clean[p * d..(p + 1) * d].copy_from_slice(&dict[*ci]);
            if *shared {
                gt[p] = 1.0;
            }
        }
    }
    for (i, c) in clean.iter().enumerate() {
        locals[i] = c + sigma * normal(rng);
    }
    let td = tmap.map(|m| m.cols()).unwrap_or(d);
    let clean_t = Tensor::new(vec![length, d], clean);
    let teacher_clean = match tmap {
        Some(m) => matmul(&clean_t, m),
        None => clean_t.clone(),
    };
    let mut teacher = vec![0.0; length * td];
    for (i, c) in teacher_clean.data().iter().enumerate() {
        teacher[i] = c + sigma * normal(rng);
    }
    let locals = Tensor::new(vec![length, d], locals);
    let teacher = Tensor::new(vec![length, td], teacher);
    RenderedModality {
        global: mean_normalized(&locals),
        teacher_global: mean_normalized(&teacher),
        locals,
        teacher_locals: teacher,
        gt,
    }
}

/// Normalized mean of rows; the deterministic global-summary used in place
/// of a pretrained encoder's CLS feature.
fn mean_normalized(locals: &Tensor) -> Tensor {
    let (n, d) = (locals.rows(), locals.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            m[j] += locals.get(i, j);
        }
    }
    for v in &mut m {
        *v /= n as f64;
    }
    let nv = norm(&m);
    assert!(nv > 0.0, "degenerate all-zero mean feature");
    for v in &mut m {
        *v /= nv;
    }
    Tensor::new(vec![d], m)
}

/// The concept recipe of one pair; exposed so benchmark construction can
/// re-render semantically equivalent or conflicting pairs.
#[derive(Debug, Clone)]
pub struct PairRecipe {
    pub shared: Vec<usize>,
    pub image_unique: Vec<usize>,
    pub text_unique: Vec<usize>,
}

pub struct SynthGenerator {
    cfg: SynthConfig,
    dict: Vec<Vec<f64>>,
    tmap: Option<Tensor>,
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate(true)?;
        let dict = concept_dictionary(cfg.dictionary_size, cfg.concept_dim, cfg.seed);
        let tmap = teacher_map(&cfg);
        Ok(SynthGenerator { cfg, dict, tmap })
    }

    pub fn cfg(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Draw a fresh recipe: disjoint shared / image-unique / text-unique
    /// concept sets, in shuffled placement order.
    pub fn draw_recipe<R: Rng>(&self, rng: &mut R) -> PairRecipe {
        let mut ids: Vec<usize> = (0..self.cfg.dictionary_size).collect();
        ids.shuffle(rng);
        let s = self.cfg.shared_concepts_per_pair;
        let u = self.cfg.unique_concepts_per_modality;
        PairRecipe {
            shared: ids[..s].to_vec(),
            image_unique: ids[s..s + u].to_vec(),
            text_unique: ids[s + u..s + 2 * u].to_vec(),
        }
    }

    /// Render a pair from a recipe with the given noise stream.
    pub fn render<R: Rng>(&self, id: &str, recipe: &PairRecipe, rng: &mut R) -> PairedSample {
        let cfg = &self.cfg;
        let mut img_concepts: Vec<(usize, bool)> = recipe
            .shared
            .iter()
            .map(|c| (*c, true))
            .chain(recipe.image_unique.iter().map(|c| (*c, false)))
            .collect();
        img_concepts.shuffle(rng);
        let mut txt_concepts: Vec<(usize, bool)> = recipe
            .shared
            .iter()
            .map(|c| (*c, true))
            .chain(recipe.text_unique.iter().map(|c| (*c, false)))
            .collect();
        txt_concepts.shuffle(rng);

        let n_patches = cfg.patch_grid.0 * cfg.patch_grid.1;
        let img = render_modality(
            &self.dict,
            &img_concepts,
            n_patches,
            cfg.noise_sigma,
            self.tmap.as_ref(),
            rng,
        );
        let txt = render_modality(
            &self.dict,
            &txt_concepts,
            cfg.text_length,
            cfg.noise_sigma,
            self.tmap.as_ref(),
            rng,
        );

        PairedSample {
            id: id.to_string(),
            image: FeatureSequence {
                global: img.global,
                locals: img.locals,
                modality: Modality::Vision,
                grid: Some(cfg.patch_grid),
            },
            teacher_image: FeatureSequence {
                global: img.teacher_global,
                locals: img.teacher_locals,
                modality: Modality::Vision,
                grid: Some(cfg.patch_grid),
            },
            text: FeatureSequence {
                global: txt.global,
                locals: txt.locals,
                modality: Modality::Language,
                grid: None,
            },
            teacher_text: FeatureSequence {
                global: txt.teacher_global,
                locals: txt.teacher_locals,
                modality: Modality::Language,
                grid: None,
            },
            ground_truth: Some((MaskVector::hard(img.gt), MaskVector::hard(txt.gt))),
        }
    }
}

/// Generate `count` paired samples with planted intersection structure.
pub fn synth_generate(cfg: &SynthConfig, count: usize) -> Result<Dataset> {
    let gen = SynthGenerator::new(cfg.clone())?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(cfg.seed, mix(0x5a3e, i as u64));
        let recipe = gen.draw_recipe(&mut rng);
        samples.push(gen.render(&format!("synth-{:06}", i), &recipe, &mut rng));
    }
    let ds = Dataset { samples };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// fixture directory format: manifest.json + SOLT tensors
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    /// (n+1)×d tensors, row 0 is the global feature
    image: String,
    text: String,
    teacher_image: String,
    teacher_text: String,
    grid: (usize, usize),
    #[serde(skip_serializing_if = "Option::is_none")]
    gt_image_mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt_text_mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    samples: Vec<ManifestEntry>,
}

fn pack(seq: &FeatureSequence) -> Tensor {
    let (n, d) = (seq.locals.rows(), seq.locals.cols());
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend_from_slice(seq.global.data());
    data.extend_from_slice(seq.locals.data());
    Tensor::new(vec![n + 1, d], data)
}

fn unpack(t: Tensor, modality: Modality, grid: Option<(usize, usize)>) -> FeatureSequence {
    let (n1, d) = (t.rows(), t.cols());
    let global = Tensor::new(vec![d], t.data()[..d].to_vec());
    let locals = Tensor::new(vec![n1 - 1, d], t.data()[d..].to_vec());
    FeatureSequence { global, locals, modality, grid }
}

pub fn save_fixture(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for s in &dataset.samples {
        let files: BTreeMap<&str, &FeatureSequence> = [
            ("image", &s.image),
            ("text", &s.text),
            ("teacher_image", &s.teacher_image),
            ("teacher_text", &s.teacher_text),
        ]
        .into_iter()
        .collect();
        let mut names = BTreeMap::new();
        for (kind, seq) in files {
            let name = format!("{}.{}.solt", s.id, kind);
            pack(seq).save(&dir.join(&name))?;
            names.insert(kind, name);
        }
        let (gt_image_mask, gt_text_mask) = match &s.ground_truth {
            Some((im, tm)) => {
                let iname = format!("{}.gt_image.solt", s.id);
                let tname = format!("{}.gt_text.solt", s.id);
                Tensor::new(vec![im.len()], im.weights().to_vec()).save(&dir.join(&iname))?;
                Tensor::new(vec![tm.len()], tm.weights().to_vec()).save(&dir.join(&tname))?;
                (Some(iname), Some(tname))
            }
            None => (None, None),
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image: names["image"].clone(),
            text: names["text"].clone(),
            teacher_image: names["teacher_image"].clone(),
            teacher_text: names["teacher_text"].clone(),
            grid: s.image.grid.expect("vision sequence carries a grid"),
            gt_image_mask,
            gt_text_mask,
        });
    }
    let manifest = Manifest { samples: entries };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_fixture(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| SolarError::Load(format!("{}: {}", manifest_path.display(), e)))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let load_tensor = |name: &str, id: &str| -> Result<Tensor> {
        Tensor::load(&dir.join(name))
            .map_err(|e| SolarError::Load(format!("sample {}: tensor file {}: {}", id, name, e)))
    };
    let mut samples = Vec::new();
    for e in manifest.samples {
        let image = unpack(load_tensor(&e.image, &e.id)?, Modality::Vision, Some(e.grid));
        let text = unpack(load_tensor(&e.text, &e.id)?, Modality::Language, None);
        let teacher_image =
            unpack(load_tensor(&e.teacher_image, &e.id)?, Modality::Vision, Some(e.grid));
        let teacher_text = unpack(load_tensor(&e.teacher_text, &e.id)?, Modality::Language, None);
        let ground_truth = match (&e.gt_image_mask, &e.gt_text_mask) {
            (Some(im), Some(tm)) => {
                let imt = load_tensor(im, &e.id)?;
                let tmt = load_tensor(tm, &e.id)?;
                Some((
                    MaskVector::hard(imt.data().to_vec()),
                    MaskVector::hard(tmt.data().to_vec()),
                ))
            }
            (None, None) => None,
            _ => {
                return Err(SolarError::Load(format!(
                    "sample {}: ground-truth masks must come in pairs",
                    e.id
                )))
            }
        };
        samples.push(PairedSample {
            id: e.id,
            image,
            text,
            teacher_image,
            teacher_text,
            ground_truth,
        });
    }
    let ds = Dataset { samples };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    fn test_cfg(noise: f64) -> SynthConfig {
        SynthConfig {
            dictionary_size: 8,
            shared_concepts_per_pair: 2,
            unique_concepts_per_modality: 2,
            concept_dim: 8,
            patch_grid: (4, 4),
            text_length: 12,
            noise_sigma: noise,
            seed: 7,
            teacher_dim: None,
        }
    }

    #[test]
    fn zero_noise_separation_is_strict() {
        let ds = synth_generate(&test_cfg(0.0), 8).unwrap();
        for s in &ds.samples {
            let (im_gt, tx_gt) = s.ground_truth.as_ref().unwrap();
            let mut min_pos = f64::INFINITY;
            let mut max_neg = f64::NEG_INFINITY;
            for p in 0..s.image.n() {
                let c = cosine(s.image.locals.row(p), s.text.global.data()).unwrap();
                if im_gt.weights()[p] > 0.5 {
                    min_pos = min_pos.min(c);
                } else {
                    max_neg = max_neg.max(c);
                }
            }
            assert!(min_pos > max_neg, "image separation violated: {} <= {}", min_pos, max_neg);
            let mut min_pos = f64::INFINITY;
            let mut max_neg = f64::NEG_INFINITY;
            for t in 0..s.text.n() {
                let c = cosine(s.text.locals.row(t), s.image.global.data()).unwrap();
                if tx_gt.weights()[t] > 0.5 {
                    min_pos = min_pos.min(c);
                } else {
                    max_neg = max_neg.max(c);
                }
            }
            assert!(min_pos > max_neg, "text separation violated");
        }
    }

    #[test]
    fn zero_noise_tokens_equal_dictionary_vectors() {
        let cfg = test_cfg(0.0);
        let ds = synth_generate(&cfg, 2).unwrap();
        let s = &ds.samples[0];
        // every shared-concept token must have unit norm (a dictionary vector)
        let (im_gt, _) = s.ground_truth.as_ref().unwrap();
        for p in 0..s.image.n() {
            if im_gt.weights()[p] > 0.5 {
                assert!((norm(s.image.locals.row(p)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_shared_concepts_gives_all_zero_masks() {
        let mut cfg = test_cfg(0.1);
        cfg.shared_concepts_per_pair = 0;
        let ds = synth_generate(&cfg, 3).unwrap();
        for s in &ds.samples {
            let (im, tm) = s.ground_truth.as_ref().unwrap();
            assert!(im.weights().iter().all(|w| *w == 0.0));
            assert!(tm.weights().iter().all(|w| *w == 0.0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(&test_cfg(0.3), 5).unwrap();
        let b = synth_generate(&test_cfg(0.3), 5).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.locals, y.image.locals);
            assert_eq!(x.text.locals, y.text.locals);
            assert_eq!(x.teacher_image.locals, y.teacher_image.locals);
        }
    }

    #[test]
    fn grid_too_small_is_config_error() {
        let mut cfg = test_cfg(0.1);
        cfg.patch_grid = (1, 2);
        cfg.shared_concepts_per_pair = 2;
        cfg.unique_concepts_per_modality = 2;
        assert!(matches!(synth_generate(&cfg, 1), Err(SolarError::Config(_))));
    }

    #[test]
    fn fixture_round_trip_is_bit_exact() {
        let ds = synth_generate(&test_cfg(0.2), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_fixture(&ds, dir.path()).unwrap();
        let back = load_fixture(dir.path()).unwrap();
        assert_eq!(ds.len(), back.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image.locals, b.image.locals);
            assert_eq!(a.image.global, b.image.global);
            assert_eq!(a.teacher_text.locals, b.teacher_text.locals);
            let (ga, gta) = a.ground_truth.as_ref().unwrap();
            let (gb, gtb) = b.ground_truth.as_ref().unwrap();
            assert_eq!(ga.weights(), gb.weights());
            assert_eq!(gta.weights(), gtb.weights());
        }
    }

    #[test]
    fn missing_tensor_file_names_the_file() {
        let ds = synth_generate(&test_cfg(0.2), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_fixture(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("synth-000001.text.solt")).unwrap();
        let err = load_fixture(dir.path()).unwrap_err();
        assert!(err.to_string().contains("synth-000001.text.solt"), "{}", err);
    }

    #[test]
    fn teacher_dim_can_differ() {
        let mut cfg = test_cfg(0.1);
        cfg.teacher_dim = Some(12);
        let ds = synth_generate(&cfg, 2).unwrap();
        assert_eq!(ds.samples[0].teacher_image.dim(), 12);
        assert_eq!(ds.samples[0].image.dim(), 8);
    }
}
