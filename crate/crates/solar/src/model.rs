//! The trainable student: per-modality MLP adapters, a 3-layer self-attention
//! encoder with a learnable CLS token and soft attention masking, and two
//! projection heads.
//!
//! Soft masks enter every attention layer as an additive log(m_j) bias on the
//! logits of key j, so m_j = 1 is a no-op and m_j = 0 excludes the key
//! exactly. There are no positional encodings; the encoder is set-like.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::maskgen::MaskVector;
use crate::numerics::Parameter;
use crate::rng::{normal, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// student input feature dimension (both modalities)
    pub input_dim: usize,
    /// shared latent dimension d
    pub d: usize,
    pub heads: usize,
    pub adapter_hidden: usize,
    pub ff_hidden: usize,
    pub layers: usize,
    pub init_eta: f64,
}

impl ModelConfig {
    pub fn desk_default(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            d: 32,
            heads: 4,
            adapter_hidden: 64,
            ff_hidden: 64,
            layers: 3,
            init_eta: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(SolarError::Config(format!(
                "d {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.init_eta <= 0.0 {
            return Err(SolarError::Config("init_eta must be positive".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model { cfg: self.cfg.clone(), params: self.params.clone(), index: self.index.clone() }
    }
}

fn affine_init(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| s * normal(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, 0x0de1);
        let mut params = Vec::new();
        let push = |name: String, t: Tensor, params: &mut Vec<Parameter>| {
            params.push(Parameter::new(name, t));
        };
        for m in ["adapter_v", "adapter_l"] {
            push(format!("{m}.w1"), affine_init(&mut rng, cfg.input_dim, cfg.adapter_hidden), &mut params);
            push(format!("{m}.b1"), Tensor::zeros(vec![cfg.adapter_hidden]), &mut params);
            push(format!("{m}.w2"), affine_init(&mut rng, cfg.adapter_hidden, cfg.d), &mut params);
            push(format!("{m}.b2"), Tensor::zeros(vec![cfg.d]), &mut params);
        }
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            push(format!("{p}.ln1.g"), Tensor::new(vec![cfg.d], vec![1.0; cfg.d]), &mut params);
            push(format!("{p}.ln1.b"), Tensor::zeros(vec![cfg.d]), &mut params);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{w}"), affine_init(&mut rng, cfg.d, cfg.d), &mut params);
            }
            push(format!("{p}.bo"), Tensor::zeros(vec![cfg.d]), &mut params);
            push(format!("{p}.ln2.g"), Tensor::new(vec![cfg.d], vec![1.0; cfg.d]), &mut params);
            push(format!("{p}.ln2.b"), Tensor::zeros(vec![cfg.d]), &mut params);
            push(format!("{p}.ff.w1"), affine_init(&mut rng, cfg.d, cfg.ff_hidden), &mut params);
            push(format!("{p}.ff.b1"), Tensor::zeros(vec![cfg.ff_hidden]), &mut params);
            push(format!("{p}.ff.w2"), affine_init(&mut rng, cfg.ff_hidden, cfg.d), &mut params);
            push(format!("{p}.ff.b2"), Tensor::zeros(vec![cfg.d]), &mut params);
        }
        let cls = {
            let s = (1.0 / cfg.d as f64).sqrt();
            let data = (0..cfg.d).map(|_| s * normal(&mut rng)).collect();
            Tensor::new(vec![1, cfg.d], data)
        };
        push("cls".into(), cls, &mut params);
        push("proj_v".into(), affine_init(&mut rng, cfg.d, cfg.d), &mut params);
        push("proj_l".into(), affine_init(&mut rng, cfg.d, cfg.d), &mut params);
        push("log_eta".into(), Tensor::scalar(cfg.init_eta.ln()), &mut params);

        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model { cfg, params, index })
    }

    pub fn param(&self, name: &str) -> &Parameter {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Parameter {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// Bind every parameter as a tape leaf for one forward/backward pass.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Bound<'m> {
        let vars = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        Bound { model: self, vars }
    }

    /// Bind against externally supplied leaves (finite-difference checks).
    /// `vars` must follow `params` order.
    pub fn bind_vars<'m>(&'m self, vars: Vec<Var>) -> Bound<'m> {
        assert_eq!(vars.len(), self.params.len());
        Bound { model: self, vars }
    }

    pub fn save_params(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for p in &self.params {
            p.tensor.save(&dir.join(format!("{}.solt", p.name)))?;
        }
        Ok(())
    }

    pub fn load_params(cfg: ModelConfig, dir: &Path) -> Result<Self> {
        let mut model = Model::new(cfg, 0)?;
        for p in &mut model.params {
            let path = dir.join(format!("{}.solt", p.name));
            let t = Tensor::load(&path)
                .map_err(|e| SolarError::Load(format!("{}: {}", path.display(), e)))?;
            if t.shape() != p.tensor.shape() {
                return Err(SolarError::Load(format!(
                    "parameter {}: shape {:?} != expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(model)
    }
}

/// One forward pass worth of parameter vars on a tape.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

/// Adapter outputs for one sample.
pub struct Adapted {
    pub v_prime: Var,
    pub v_cls: Var,
    pub l_prime: Var,
    pub l_cls: Var,
}

impl<'m> Bound<'m> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.model.index[name]]
    }

    /// Per-parameter gradients in `Model::params` order.
    pub fn gradients(&self, tape: &Tape, grads: &crate::tape::Grads) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get(tape, *v)).collect()
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    /// η = exp(log η), always positive.
    pub fn eta(&self, tape: &mut Tape) -> Var {
        let v = self.var("log_eta");
        tape.exp(v)
    }

    fn mlp(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = tape.matmul(x, self.var(&format!("{prefix}.w1")));
        let h = tape.add_row_broadcast(h, self.var(&format!("{prefix}.b1")));
        let h = tape.gelu(h);
        let y = tape.matmul(h, self.var(&format!("{prefix}.w2")));
        tape.add_row_broadcast(y, self.var(&format!("{prefix}.b2")))
    }

    /// Map a sample's raw features through both modality adapters. Local rows
    /// and the global row pass through the same map independently.
    pub fn adapt(&self, tape: &mut Tape, sample: &crate::providers::PairedSample) -> Result<Adapted> {
        let din = self.model.cfg.input_dim;
        if sample.image.dim() != din || sample.text.dim() != din {
            return Err(SolarError::Shape(format!(
                "sample {} feature dim {} != adapter input dim {}",
                sample.id,
                sample.image.dim(),
                din
            )));
        }
        let pack = |seq: &crate::providers::FeatureSequence, tape: &mut Tape| {
            let n = seq.n();
            let d = seq.dim();
            let mut data = seq.locals.data().to_vec();
            data.extend_from_slice(seq.global.data());
            tape.constant(Tensor::new(vec![n + 1, d], data))
        };
        let v_in = pack(&sample.image, tape);
        let l_in = pack(&sample.text, tape);
        let v_out = self.mlp(tape, v_in, "adapter_v");
        let l_out = self.mlp(tape, l_in, "adapter_l");
        let nv = sample.image.n();
        let nl = sample.text.n();
        Ok(Adapted {
            v_prime: tape.slice_rows(v_out, 0, nv),
            v_cls: tape.slice_rows(v_out, nv, 1),
            l_prime: tape.slice_rows(l_out, 0, nl),
            l_cls: tape.slice_rows(l_out, nl, 1),
        })
    }

    /// Encode `tokens` (k×d) plus the learnable CLS token; return the
    /// CLS-position output row (1×d, unnormalized). The mask covers the k
    /// input tokens; CLS is never masked.
    pub fn vl_encode(&self, tape: &mut Tape, tokens: Var, mask: Option<&[f64]>) -> Result<Var> {
        let cfg = &self.model.cfg;
        let k = tape.value(tokens).rows();
        let bias: Option<Vec<f64>> = match mask {
            Some(m) => {
                assert_eq!(m.len(), k, "mask length must match token count");
                if m.iter().all(|w| *w == 0.0) {
                    return Err(SolarError::Degenerate(
                        "all mask entries zero; nothing attendable".into(),
                    ));
                }
                if m.iter().all(|w| *w == 1.0) {
                    None
                } else {
                    let mut b: Vec<f64> = m.iter().map(|w| w.ln()).collect();
                    b.push(0.0); // CLS key
                    Some(b)
                }
            }
            None => None,
        };
        let mut x = tape.concat_rows(&[tokens, self.var("cls")]);
        let dh = cfg.d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            let ln1g = self.var(&format!("{p}.ln1.g"));
            let ln1b = self.var(&format!("{p}.ln1.b"));
            let h = tape.layer_norm_rows(x, ln1g, ln1b, LN_EPS);
            let q = tape.matmul(h, self.var(&format!("{p}.wq")));
            let kk = tape.matmul(h, self.var(&format!("{p}.wk")));
            let v = tape.matmul(h, self.var(&format!("{p}.wv")));
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(kk, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let logits = tape.matmul_nt(qh, kh);
                let logits = tape.scale(logits, scale);
                let logits = match &bias {
                    Some(b) => tape.add_rows_const(logits, b),
                    None => logits,
                };
                let att = tape.softmax_rows(logits);
                heads.push(tape.matmul(att, vh));
            }
            let o = tape.concat_cols(&heads);
            let o = tape.matmul(o, self.var(&format!("{p}.wo")));
            let o = tape.add_row_broadcast(o, self.var(&format!("{p}.bo")));
            x = tape.add(x, o);

            let ln2g = self.var(&format!("{p}.ln2.g"));
            let ln2b = self.var(&format!("{p}.ln2.b"));
            let h2 = tape.layer_norm_rows(x, ln2g, ln2b, LN_EPS);
            let f = self.mlp(tape, h2, &format!("{p}.ff"));
            x = tape.add(x, f);
        }
        Ok(tape.slice_rows(x, k, 1))
    }

    /// f = unit-normalized CLS output over the concatenation [V′; L′],
    /// optionally with a hard mask over the concatenated tokens.
    pub fn joint_embed(
        &self,
        tape: &mut Tape,
        v_prime: Var,
        l_prime: Var,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let tokens = tape.concat_rows(&[v_prime, l_prime]);
        let cls = self.vl_encode(tape, tokens, mask)?;
        Ok(tape.row_normalize(cls))
    }

    /// Masked alignment embeddings (Eq. 2): projected, normalized
    /// single-modality CLS outputs.
    pub fn alignment_embeds(
        &self,
        tape: &mut Tape,
        adapted: &Adapted,
        m_v: &MaskVector,
        m_l: &MaskVector,
    ) -> Result<(Var, Var)> {
        let cv = self.vl_encode(tape, adapted.v_prime, Some(m_v.weights()))?;
        let cl = self.vl_encode(tape, adapted.l_prime, Some(m_l.weights()))?;
        let fv = tape.matmul(cv, self.var("proj_v"));
        let fl = tape.matmul(cl, self.var("proj_l"));
        Ok((tape.row_normalize(fv), tape.row_normalize(fl)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{synth_generate, SynthConfig};

    fn tiny_dataset() -> crate::providers::Dataset {
        let cfg = SynthConfig {
            dictionary_size: 6,
            shared_concepts_per_pair: 2,
            unique_concepts_per_modality: 1,
            concept_dim: 6,
            patch_grid: (2, 3),
            text_length: 5,
            noise_sigma: 0.05,
            seed: 42,
            teacher_dim: None,
        };
        synth_generate(&cfg, 4).unwrap()
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            input_dim: 6,
            d: 8,
            heads: 2,
            adapter_hidden: 10,
            ff_hidden: 12,
            layers: 3,
            init_eta: 0.07,
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn adapt_is_pure_and_shaped() {
        let ds = tiny_dataset();
        let model = tiny_model();
        let mut t1 = Tape::new();
        let b1 = model.bind(&mut t1);
        let a1 = b1.adapt(&mut t1, &ds.samples[0]).unwrap();
        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2);
        let a2 = b2.adapt(&mut t2, &ds.samples[0]).unwrap();
        assert_eq!(t1.value(a1.v_prime).data(), t2.value(a2.v_prime).data());
        assert_eq!(t1.value(a1.v_prime).shape(), &[6, 8]);
        assert_eq!(t1.value(a1.l_cls).shape(), &[1, 8]);
    }

    #[test]
    fn zeroed_second_layer_outputs_bias() {
        let ds = tiny_dataset();
        let mut model = tiny_model();
        let d = model.cfg.d;
        model.param_mut("adapter_v.w2").tensor = Tensor::zeros(vec![10, d]);
        let bias: Vec<f64> = (0..d).map(|i| i as f64 * 0.1).collect();
        model.param_mut("adapter_v.b2").tensor = Tensor::new(vec![d], bias.clone());
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = bound.adapt(&mut tape, &ds.samples[0]).unwrap();
        for i in 0..tape.value(a.v_prime).rows() {
            assert_eq!(tape.value(a.v_prime).row(i), bias.as_slice());
        }
    }

    #[test]
    fn all_ones_mask_is_bit_identical_to_no_mask() {
        let ds = tiny_dataset();
        let model = tiny_model();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = bound.adapt(&mut tape, &ds.samples[0]).unwrap();
        let ones = vec![1.0; 6];
        let with = bound.vl_encode(&mut tape, a.v_prime, Some(&ones)).unwrap();
        let without = bound.vl_encode(&mut tape, a.v_prime, None).unwrap();
        assert_eq!(tape.value(with).data(), tape.value(without).data());
    }

    #[test]
    fn masked_key_invariance() {
        let ds = tiny_dataset();
        let model = tiny_model();
        let mask = [1.0, 0.0, 1.0, 1.0, 1.0, 1.0];

        let encode = |perturb: f64| {
            let mut sample = ds.samples[0].clone();
            // arbitrary change to masked token 1's features
            let d = sample.image.locals.cols();
            for j in 0..d {
                sample.image.locals.data_mut()[d + j] += perturb;
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let a = bound.adapt(&mut tape, &sample).unwrap();
            let out = bound.vl_encode(&mut tape, a.v_prime, Some(&mask)).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = encode(0.0);
        let moved = encode(17.5);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn all_zero_mask_is_error() {
        let ds = tiny_dataset();
        let model = tiny_model();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = bound.adapt(&mut tape, &ds.samples[0]).unwrap();
        let zeros = vec![0.0; 6];
        assert!(bound.vl_encode(&mut tape, a.v_prime, Some(&zeros)).is_err());
    }

    #[test]
    fn joint_embed_unit_norm_and_permutation_invariant() {
        let ds = tiny_dataset();
        let model = tiny_model();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = bound.adapt(&mut tape, &ds.samples[0]).unwrap();
        let f = bound.joint_embed(&mut tape, a.v_prime, a.l_prime, None).unwrap();
        let fv = tape.value(f).data().to_vec();
        let n: f64 = fv.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);

        // permute image patch rows: set attention, no positional encoding
        let mut sample = ds.samples[0].clone();
        let d = sample.image.locals.cols();
        let r0 = sample.image.locals.row(0).to_vec();
        let r1 = sample.image.locals.row(1).to_vec();
        sample.image.locals.data_mut()[..d].copy_from_slice(&r1);
        sample.image.locals.data_mut()[d..2 * d].copy_from_slice(&r0);
        let mut tape2 = Tape::new();
        let bound2 = model.bind(&mut tape2);
        let a2 = bound2.adapt(&mut tape2, &sample).unwrap();
        let f2 = bound2.joint_embed(&mut tape2, a2.v_prime, a2.l_prime, None).unwrap();
        for (x, y) in fv.iter().zip(tape2.value(f2).data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn params_round_trip() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        model.save_params(dir.path()).unwrap();
        let back = Model::load_params(model.cfg.clone(), dir.path()).unwrap();
        for (a, b) in model.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor);
        }
    }
}
