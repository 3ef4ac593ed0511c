//! Stage-2 masked variant construction: positives mask the shared
//! (intersection) content in one modality, negatives mask unique
//! (difference) content or the intersection in both modalities at once.

use rand::Rng;

use crate::error::{Result, SolarError};
use crate::losses::ContrastiveGroup;
use crate::maskgen::MaskVector;
use crate::segmentation::Segmentation;
use crate::tape::{Tape, Var};

const RESAMPLE_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    MaskIntersectionImage,
    MaskIntersectionText,
    MaskDifferenceImage,
    MaskDifferenceText,
    MaskIntersectionBoth,
}

impl Recipe {
    pub fn polarity(self) -> Polarity {
        match self {
            Recipe::MaskIntersectionImage | Recipe::MaskIntersectionText => Polarity::Positive,
            _ => Polarity::Negative,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstructedVariant {
    pub base_id: String,
    pub image_mask: MaskVector,
    pub text_mask: MaskVector,
    pub recipe: Recipe,
}

impl ConstructedVariant {
    pub fn polarity(&self) -> Polarity {
        self.recipe.polarity()
    }
}

/// Bernoulli-mask the given token subset with a single shared rate u drawn
/// per call; `need_masked` demands ≥1 masked token, and at least one token
/// overall must always survive.
fn bernoulli_mask<R: Rng>(
    n: usize,
    side: &[usize],
    need_masked: bool,
    rng: &mut R,
) -> Option<MaskVector> {
    if side.is_empty() {
        return None;
    }
    for _ in 0..RESAMPLE_CAP {
        let u = 1.0 - rng.gen::<f64>(); // (0, 1]
        let mut w = vec![1.0; n];
        let mut masked = 0;
        for &i in side {
            if rng.gen::<f64>() < u {
                w[i] = 0.0;
                masked += 1;
            }
        }
        if masked == n {
            continue; // nothing left to attend to
        }
        if need_masked && masked == 0 {
            continue;
        }
        return Some(MaskVector::hard(w));
    }
    None
}

/// Positive/negative text masks from per-token relevance scores. Returns
/// `None` for a side whose token set is empty (variant unavailable).
pub fn text_masks<R: Rng>(
    s_v2l: &[f64],
    tau_l: f64,
    rng: &mut R,
) -> (Option<MaskVector>, Option<MaskVector>) {
    let n = s_v2l.len();
    let above: Vec<usize> = (0..n).filter(|&i| s_v2l[i] > tau_l).collect();
    let below: Vec<usize> = (0..n).filter(|&i| s_v2l[i] <= tau_l).collect();
    let pos = bernoulli_mask(n, &above, false, rng);
    let neg = bernoulli_mask(n, &below, true, rng);
    (pos, neg)
}

/// Mask a uniformly random nonempty subset of the listed segments; the
/// subset never crosses to the other side, and at least one patch survives.
fn segment_mask<R: Rng>(seg: &Segmentation, side: &[usize], rng: &mut R) -> Option<MaskVector> {
    if side.is_empty() {
        return None;
    }
    let n = seg.labels.len();
    for _ in 0..RESAMPLE_CAP {
        let chosen: Vec<usize> = side.iter().copied().filter(|_| rng.gen::<bool>()).collect();
        if chosen.is_empty() {
            continue;
        }
        let mut w = vec![1.0; n];
        let mut masked = 0;
        for &k in &chosen {
            for &p in &seg.segments[k] {
                w[p] = 0.0;
                masked += 1;
            }
        }
        if masked == n {
            continue;
        }
        return Some(MaskVector::hard(w));
    }
    None
}

/// Positive/negative image masks over the intersection/difference segment
/// split.
pub fn image_masks<R: Rng>(
    seg: &Segmentation,
    intersection: &[usize],
    difference: &[usize],
    rng: &mut R,
) -> (Option<MaskVector>, Option<MaskVector>) {
    let pos = segment_mask(seg, intersection, rng);
    let neg = segment_mask(seg, difference, rng);
    (pos, neg)
}

/// All available variant recipes for one anchor. The both-modalities recipe
/// draws fresh masks so its randomness is independent of the single-modality
/// positives.
pub fn plan_variants<R: Rng>(
    base_id: &str,
    seg: &Segmentation,
    intersection: &[usize],
    difference: &[usize],
    s_v2l: &[f64],
    tau_l: f64,
    rng: &mut R,
) -> Vec<ConstructedVariant> {
    let n_text = s_v2l.len();
    let n_img = seg.labels.len();
    let (img_pos, img_neg) = image_masks(seg, intersection, difference, rng);
    let (txt_pos, txt_neg) = text_masks(s_v2l, tau_l, rng);
    let mut out = Vec::new();
    let push = |recipe: Recipe, img: Option<MaskVector>, txt: Option<MaskVector>, out: &mut Vec<ConstructedVariant>| {
        if let (Some(image_mask), Some(text_mask)) = (img, txt) {
            out.push(ConstructedVariant {
                base_id: base_id.to_string(),
                image_mask,
                text_mask,
                recipe,
            });
        }
    };
    push(Recipe::MaskIntersectionImage, img_pos, Some(MaskVector::ones(n_text)), &mut out);
    push(Recipe::MaskIntersectionText, Some(MaskVector::ones(n_img)), txt_pos, &mut out);
    push(Recipe::MaskDifferenceImage, img_neg, Some(MaskVector::ones(n_text)), &mut out);
    push(Recipe::MaskDifferenceText, Some(MaskVector::ones(n_img)), txt_neg, &mut out);
    let (img_pos2, _) = image_masks(seg, intersection, difference, rng);
    let (txt_pos2, _) = text_masks(s_v2l, tau_l, rng);
    push(Recipe::MaskIntersectionBoth, img_pos2, txt_pos2, &mut out);
    out
}

/// Assemble one anchor's contrastive group: one constructed positive chosen
/// uniformly among the available positive recipes, negatives pooled from
/// constructed + mined + in-batch embeddings.
pub fn build_group<R: Rng>(
    tape: &mut Tape,
    anchor: Var,
    positives: &[Var],
    constructed_negatives: &[Var],
    mined: &[Var],
    batch_peers: &[Var],
    rng: &mut R,
) -> Result<ContrastiveGroup> {
    if positives.is_empty() {
        return Err(SolarError::Degenerate("no positive recipe available for anchor".into()));
    }
    let chosen = positives[rng.gen_range(0..positives.len())];
    let mut negs: Vec<Var> = Vec::new();
    negs.extend_from_slice(constructed_negatives);
    negs.extend_from_slice(mined);
    negs.extend_from_slice(batch_peers);
    if negs.is_empty() {
        return Err(SolarError::Degenerate("no negatives available for anchor".into()));
    }
    let negatives = tape.concat_rows(&negs);
    Ok(ContrastiveGroup { anchor, positives: chosen, negatives })
}
