//! Training objectives: stage 1 (masked contrastive + alignment +
//! distillation) and stage 2 (group contrastive ranking).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::model::Adapted;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-step stage-1 component breakdown. `total` is exactly
/// `itc + λ₁·gla + λ₂·gd + λ₃·ld` in that evaluation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1LossReport {
    pub itc: f64,
    pub gla: f64,
    pub gla_l2v: f64,
    pub gla_v2l: f64,
    pub gd: f64,
    pub gd_vision: f64,
    pub gd_language: f64,
    pub ld: f64,
    pub ld_vision: f64,
    pub ld_language: f64,
    pub total: f64,
}

/// Raw similarity pools behind the GLA hinge, fed to the Gaussian fits.
#[derive(Debug, Clone, Default)]
pub struct ScorePools {
    pub pos_l2v: Vec<f64>,
    pub neg_l2v: Vec<f64>,
    pub pos_v2l: Vec<f64>,
    pub neg_v2l: Vec<f64>,
}

/// One stage-2 anchor with its positive and negative candidate embeddings,
/// all rows unit-norm.
pub struct ContrastiveGroup {
    pub anchor: Var,
    pub positives: Var,
    pub negatives: Var,
}

/// Global-local alignment hinge (Eq. 1), both directions, pools shared
/// across the batch. Also returns the similarity pools for threshold
/// fitting.
pub fn gla_loss(tape: &mut Tape, batch: &[Adapted], delta: f64) -> Result<(Var, Var, Var, ScorePools)> {
    let b = batch.len();
    if b < 2 {
        return Err(SolarError::Config(format!(
            "gla_loss needs batch size >= 2, got {b}"
        )));
    }
    let v_locals_n: Vec<Var> = batch.iter().map(|a| tape.row_normalize(a.v_prime)).collect();
    let l_locals_n: Vec<Var> = batch.iter().map(|a| tape.row_normalize(a.l_prime)).collect();
    let v_cls_n: Vec<Var> = batch.iter().map(|a| tape.row_normalize(a.v_cls)).collect();
    let l_cls_n: Vec<Var> = batch.iter().map(|a| tape.row_normalize(a.l_cls)).collect();

    let direction = |tape: &mut Tape, locals: &[Var], globals: &[Var]| -> (Var, Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, loc) in locals.iter().enumerate() {
            for (j, glob) in globals.iter().enumerate() {
                let sims = tape.matmul_nt(*loc, *glob); // n_i × 1
                if i == j {
                    pos.push(sims);
                } else {
                    neg.push(sims);
                }
            }
        }
        let pos_cat = tape.concat_rows(&pos);
        let neg_cat = tape.concat_rows(&neg);
        let pos_vals = tape.value(pos_cat).data().to_vec();
        let neg_vals = tape.value(neg_cat).data().to_vec();
        let mean_pos = tape.mean_all(pos_cat);
        let mean_neg = tape.mean_all(neg_cat);
        let gap = tape.sub(mean_neg, mean_pos);
        let shifted = tape.add_scalar(gap, delta);
        (tape.relu(shifted), pos_vals, neg_vals)
    };

    let (l2v, pos_l2v, neg_l2v) = direction(tape, &v_locals_n, &l_cls_n);
    let (v2l, pos_v2l, neg_v2l) = direction(tape, &l_locals_n, &v_cls_n);
    let total = tape.add(l2v, v2l);
    Ok((total, l2v, v2l, ScorePools { pos_l2v, neg_l2v, pos_v2l, neg_v2l }))
}

/// Pearson correlation of a tape vector against a constant vector.
/// Errors if either side has (numerically) zero variance at the current
/// point.
fn pearson_vs_const(tape: &mut Tape, x: Var, t: &[f64]) -> Result<Var> {
    let xv = tape.value(x).data().to_vec();
    if sample_var(&xv) == 0.0 || sample_var(t) == 0.0 {
        return Err(SolarError::Degenerate("zero variance in correlation input".into()));
    }
    let mt = t.iter().sum::<f64>() / t.len() as f64;
    let tc: Vec<f64> = t.iter().map(|v| v - mt).collect();
    let st = (tc.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
    let tcn = tape.constant(Tensor::new(vec![t.len()], tc));

    let mx = tape.mean_all(x);
    let neg_mx = tape.scale(mx, -1.0);
    let xc = tape.add_b(x, neg_mx);
    let xc2 = tape.mul(xc, xc);
    let var_x = tape.mean_all(xc2);
    let sd_x = tape.sqrt(var_x);
    let prod = tape.mul(xc, tcn);
    let cov = tape.mean_all(prod);
    let denom = tape.scale(sd_x, st);
    Ok(tape.div(cov, denom))
}

fn sample_var(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
}

fn strict_upper_indices(n: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            idx.push(i * n + j);
        }
    }
    idx
}

/// Local ranking distillation for one modality (§4.1.1): per-token
/// similarity-profile correlation against the frozen teacher.
pub fn ld_loss(tape: &mut Tape, student_locals: Var, teacher_locals: &Tensor) -> Result<Var> {
    let n = tape.value(student_locals).rows();
    if teacher_locals.rows() != n {
        return Err(SolarError::Shape(format!(
            "ld_loss token counts differ: student {n}, teacher {}",
            teacher_locals.rows()
        )));
    }
    if n < 3 {
        return Err(SolarError::Config(format!("ld_loss needs >= 3 tokens, got {n}")));
    }
    let sn = tape.row_normalize(student_locals);
    let sim = tape.matmul_nt(sn, sn); // n×n student cosine matrix

    let tnorm = {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let r = teacher_locals.row(i);
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Err(SolarError::Degenerate(format!("teacher token {i} is zero")));
            }
            rows.push(r.iter().map(|v| v / nrm).collect::<Vec<f64>>());
        }
        rows
    };

    let mut corrs = Vec::new();
    for k in 0..n {
        let idxs: Vec<usize> = (0..n).filter(|j| *j != k).map(|j| k * n + j).collect();
        let s_k = tape.select_elems(sim, &idxs);
        let t_k: Vec<f64> = (0..n)
            .filter(|j| *j != k)
            .map(|j| tnorm[k].iter().zip(&tnorm[j]).map(|(a, b)| a * b).sum())
            .collect();
        match pearson_vs_const(tape, s_k, &t_k) {
            Ok(c) => corrs.push(c),
            Err(SolarError::Degenerate(_)) => continue, // zero-variance token: skip
            Err(e) => return Err(e),
        }
    }
    if corrs.is_empty() {
        return Err(SolarError::Degenerate("all token similarity profiles degenerate".into()));
    }
    let cat = tape.concat_rows(&corrs);
    let mean = tape.mean_all(cat);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Global batch-ranking distillation for one modality (§4.1.3): Pearson
/// over the strict upper triangle of the batch cosine matrices.
pub fn gd_loss(tape: &mut Tape, student_globals: Var, teacher_globals: &Tensor) -> Result<Var> {
    let b = tape.value(student_globals).rows();
    if teacher_globals.rows() != b {
        return Err(SolarError::Shape(format!(
            "gd_loss batch sizes differ: student {b}, teacher {}",
            teacher_globals.rows()
        )));
    }
    if b < 3 {
        return Err(SolarError::Config(format!("gd_loss needs batch >= 3, got {b}")));
    }
    let sn = tape.row_normalize(student_globals);
    let sim = tape.matmul_nt(sn, sn);
    let idxs = strict_upper_indices(b);
    let s = tape.select_elems(sim, &idxs);

    let tcos = crate::numerics::pairwise_cosine(teacher_globals, teacher_globals)?;
    let t: Vec<f64> = idxs.iter().map(|&i| tcos.data()[i]).collect();
    let corr = pearson_vs_const(tape, s, &t)?;
    let neg = tape.scale(corr, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Symmetric InfoNCE over the in-batch similarity matrix (Eq. 3) with
/// learned temperature η.
pub fn itc_loss(tape: &mut Tape, f_v: Var, f_l: Var, eta: Var) -> Result<Var> {
    if tape.value(eta).item() <= 0.0 {
        return Err(SolarError::Config("itc temperature must be positive".into()));
    }
    let b = tape.value(f_v).rows();
    if tape.value(f_l).rows() != b {
        return Err(SolarError::Shape("itc batch sizes differ".into()));
    }
    let inv = tape.recip(eta);
    let sims_vl = tape.matmul_nt(f_v, f_l);
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();

    let ce = |tape: &mut Tape, sims: Var| {
        let logits = tape.mul_b(sims, inv);
        let lse = tape.logsumexp_rows(logits);
        let diag = tape.select_elems(logits, &diag_idx);
        let gap = tape.sub(lse, diag);
        tape.mean_all(gap)
    };
    let loss_v2l = ce(tape, sims_vl);
    let sims_lv = tape.matmul_nt(f_l, f_v);
    let loss_l2v = ce(tape, sims_lv);
    let sum = tape.add(loss_v2l, loss_l2v);
    Ok(tape.scale(sum, 0.5))
}

/// Weighted stage-1 objective (Eq. 4); returns the tape scalar and a value
/// report whose `total` matches the tape exactly.
#[allow(clippy::too_many_arguments)]
pub fn stage1_total(
    tape: &mut Tape,
    itc: Var,
    gla: Var,
    gd: Var,
    ld: Var,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> Var {
    let g = tape.scale(gla, lambda1);
    let t = tape.add(itc, g);
    let d = tape.scale(gd, lambda2);
    let t = tape.add(t, d);
    let l = tape.scale(ld, lambda3);
    tape.add(t, l)
}

/// Stage-2 group contrastive loss: mean over anchors of
/// LSE(D⁺∪D⁻) − LSE(D⁺), the negative-log form of Eq. 5.
pub fn stage2_loss(tape: &mut Tape, groups: &[ContrastiveGroup], eta: f64) -> Result<Var> {
    if eta <= 0.0 {
        return Err(SolarError::Config("stage2 temperature must be positive".into()));
    }
    if groups.is_empty() {
        return Err(SolarError::Config("stage2_loss got no groups".into()));
    }
    let inv = 1.0 / eta;
    let mut terms = Vec::with_capacity(groups.len());
    for g in groups {
        if tape.value(g.positives).rows() == 0 {
            return Err(SolarError::Config("contrastive group has no positives".into()));
        }
        if tape.value(g.negatives).rows() == 0 {
            return Err(SolarError::Config("contrastive group has no negatives".into()));
        }
        let sp = tape.matmul_nt(g.anchor, g.positives); // 1×P
        let sn = tape.matmul_nt(g.anchor, g.negatives); // 1×N
        let sp = tape.scale(sp, inv);
        let sn = tape.scale(sn, inv);
        let all = tape.concat_cols(&[sp, sn]);
        let lse_all = tape.logsumexp_rows(all);
        let lse_pos = tape.logsumexp_rows(sp);
        terms.push(tape.sub(lse_all, lse_pos));
    }
    let cat = tape.concat_rows(&terms);
    Ok(tape.mean_all(cat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::{normal, stream};

    fn randn(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(rng)).collect())
    }

    fn unit_rows(rng: &mut rand_chacha::ChaCha8Rng, m: usize, d: usize) -> Tensor {
        let mut t = randn(rng, vec![m, d]);
        for i in 0..m {
            let nrm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let d0 = t.cols();
            for j in 0..d0 {
                t.data_mut()[i * d0 + j] /= nrm;
            }
        }
        t
    }

    fn adapted_from(tape: &mut Tape, vp: Tensor, vc: Tensor, lp: Tensor, lc: Tensor) -> Adapted {
        Adapted {
            v_prime: tape.leaf(vp),
            v_cls: tape.leaf(vc),
            l_prime: tape.leaf(lp),
            l_cls: tape.leaf(lc),
        }
    }

    #[test]
    fn gla_hinge_satisfied_is_zero_and_violated_is_delta() {
        // all positives 0.9, negatives 0.1 is awkward to construct exactly;
        // test the hinge arithmetic on the pooled means directly instead.
        // positives mean == negatives mean -> per-direction loss = delta.
        let mut tape = Tape::new();
        let e = Tensor::from_rows(&[vec![1.0, 0.0]]);
        // one token equal to the global in every slot: all similarities 1
        let batch = vec![
            adapted_from(&mut tape, e.clone(), e.clone(), e.clone(), e.clone()),
            adapted_from(&mut tape, e.clone(), e.clone(), e.clone(), e.clone()),
        ];
        let (total, l2v, v2l, pools) = gla_loss(&mut tape, &batch, 0.1).unwrap();
        // identical features: mean pos = mean neg = 1 -> hinge = delta each way
        assert!((tape.value(l2v).item() - 0.1).abs() < 1e-12);
        assert!((tape.value(v2l).item() - 0.1).abs() < 1e-12);
        assert!((tape.value(total).item() - 0.2).abs() < 1e-12);
        assert_eq!(pools.pos_l2v.len(), 2);
        assert_eq!(pools.neg_l2v.len(), 2);
    }

    #[test]
    fn gla_matches_brute_force_pools() {
        let mut rng = stream(7, 1);
        let d = 5;
        let mut tape = Tape::new();
        let raw: Vec<(Tensor, Tensor, Tensor, Tensor)> = (0..3)
            .map(|_| {
                (
                    randn(&mut rng, vec![4, d]),
                    randn(&mut rng, vec![1, d]),
                    randn(&mut rng, vec![6, d]),
                    randn(&mut rng, vec![1, d]),
                )
            })
            .collect();
        let batch: Vec<Adapted> = raw
            .iter()
            .map(|(vp, vc, lp, lc)| {
                adapted_from(&mut tape, vp.clone(), vc.clone(), lp.clone(), lc.clone())
            })
            .collect();
        let delta = 0.1;
        let (_, l2v, _, _) = gla_loss(&mut tape, &batch, delta).unwrap();

        // brute force: every local image patch vs every global text feature
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, (vp, _, _, _)) in raw.iter().enumerate() {
            for (j, (_, _, _, lc)) in raw.iter().enumerate() {
                for p in 0..vp.rows() {
                    let c = crate::numerics::cosine(vp.row(p), lc.row(0)).unwrap();
                    if i == j {
                        pos.push(c);
                    } else {
                        neg.push(c);
                    }
                }
            }
        }
        let mp = pos.iter().sum::<f64>() / pos.len() as f64;
        let mn = neg.iter().sum::<f64>() / neg.len() as f64;
        let expect = (mn + delta - mp).max(0.0);
        assert!((tape.value(l2v).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn gla_grad_check() {
        let mut rng = stream(8, 2);
        let d = 4;
        let inputs = vec![
            randn(&mut rng, vec![3, d]),
            randn(&mut rng, vec![1, d]),
            randn(&mut rng, vec![3, d]),
            randn(&mut rng, vec![1, d]),
            randn(&mut rng, vec![3, d]),
            randn(&mut rng, vec![1, d]),
            randn(&mut rng, vec![3, d]),
            randn(&mut rng, vec![1, d]),
        ];
        let f = |tape: &mut Tape, vars: &[Var]| {
            let batch = vec![
                Adapted { v_prime: vars[0], v_cls: vars[1], l_prime: vars[2], l_cls: vars[3] },
                Adapted { v_prime: vars[4], v_cls: vars[5], l_prime: vars[6], l_cls: vars[7] },
            ];
            gla_loss(tape, &batch, 0.5).unwrap().0
        };
        let err = grad_check(&f, &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "gla rel err {err}");
    }

    #[test]
    fn ld_zero_for_teacher_and_rotation() {
        let mut rng = stream(9, 3);
        let t = randn(&mut rng, vec![5, 4]);
        let mut tape = Tape::new();
        let s = tape.leaf(t.clone());
        let loss = ld_loss(&mut tape, s, &t).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        // rotate student features: cosine structure unchanged
        let rot = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let rotated = crate::tensor::matmul(&t, &rot);
        let mut tape2 = Tape::new();
        let s2 = tape2.leaf(rotated);
        let loss2 = ld_loss(&mut tape2, s2, &t).unwrap();
        assert!(tape2.value(loss2).item().abs() < 1e-10);
    }

    #[test]
    fn ld_matches_hand_computation() {
        // 4 tokens in 2-d: compute expected value through numerics helpers
        let teacher = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.8, 0.6],
            vec![0.0, 1.0],
            vec![-0.6, 0.8],
        ]);
        let student = Tensor::from_rows(&[
            vec![0.9, 0.1],
            vec![0.5, 0.5],
            vec![0.1, 0.9],
            vec![-0.5, 0.9],
        ]);
        let n = 4;
        let mut acc = 0.0;
        for k in 0..n {
            let mut sk = Vec::new();
            let mut tk = Vec::new();
            for j in 0..n {
                if j == k {
                    continue;
                }
                sk.push(crate::numerics::cosine(student.row(k), student.row(j)).unwrap());
                tk.push(crate::numerics::cosine(teacher.row(k), teacher.row(j)).unwrap());
            }
            acc += crate::numerics::pearson_corr(&tk, &sk).unwrap();
        }
        let expect = 1.0 - acc / n as f64;

        let mut tape = Tape::new();
        let s = tape.leaf(student);
        let loss = ld_loss(&mut tape, s, &teacher).unwrap();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ld_grad_check() {
        let mut rng = stream(10, 4);
        let teacher = randn(&mut rng, vec![5, 3]);
        let student = randn(&mut rng, vec![5, 3]);
        let f = |tape: &mut Tape, vars: &[Var]| ld_loss(tape, vars[0], &teacher).unwrap();
        let err = grad_check(&f, &[student], 1e-5).unwrap();
        assert!(err < 1e-4, "ld rel err {err}");
    }

    #[test]
    fn gd_zero_for_teacher_and_affine_similarities() {
        let mut rng = stream(11, 5);
        let t = randn(&mut rng, vec![4, 6]);
        let mut tape = Tape::new();
        let s = tape.leaf(t.clone());
        let loss = gd_loss(&mut tape, s, &t).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn gd_matches_hand_computation() {
        let teacher = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]]);
        let student = Tensor::from_rows(&[vec![0.9, 0.2], vec![0.4, 0.9], vec![-0.1, 1.0]]);
        let su = |t: &Tensor| -> Vec<f64> {
            let mut v = Vec::new();
            for i in 0..3 {
                for j in i + 1..3 {
                    v.push(crate::numerics::cosine(t.row(i), t.row(j)).unwrap());
                }
            }
            v
        };
        let expect = 1.0 - crate::numerics::pearson_corr(&su(&teacher), &su(&student)).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(student);
        let loss = gd_loss(&mut tape, s, &teacher).unwrap();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn gd_grad_check() {
        let mut rng = stream(12, 6);
        let teacher = randn(&mut rng, vec![4, 5]);
        let student = randn(&mut rng, vec![4, 5]);
        let f = |tape: &mut Tape, vars: &[Var]| gd_loss(tape, vars[0], &teacher).unwrap();
        let err = grad_check(&f, &[student], 1e-5).unwrap();
        assert!(err < 1e-4, "gd rel err {err}");
    }

    #[test]
    fn itc_single_pair_is_zero() {
        let mut rng = stream(13, 7);
        let f_v = unit_rows(&mut rng, 1, 4);
        let f_l = unit_rows(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let v = tape.leaf(f_v);
        let l = tape.leaf(f_l);
        let e = tape.leaf(Tensor::scalar(0.07));
        let loss = itc_loss(&mut tape, v, l, e).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn itc_orthogonal_pairs_closed_form() {
        // B=2, f_V = f_L per pair, the two pairs orthogonal, eta = 1:
        // each row CE = log(e / (e + 1)) -> loss = log(1 + e^{-1})
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut tape = Tape::new();
        let v = tape.leaf(f.clone());
        let l = tape.leaf(f);
        let e = tape.leaf(Tensor::scalar(1.0));
        let loss = itc_loss(&mut tape, v, l, e).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn itc_nonnegative_and_permutation_invariant() {
        let mut rng = stream(14, 8);
        let f_v = unit_rows(&mut rng, 4, 6);
        let f_l = unit_rows(&mut rng, 4, 6);
        let eval = |v: &Tensor, l: &Tensor| {
            let mut tape = Tape::new();
            let vv = tape.leaf(v.clone());
            let ll = tape.leaf(l.clone());
            let e = tape.leaf(Tensor::scalar(0.2));
            let loss = itc_loss(&mut tape, vv, ll, e).unwrap();
            tape.value(loss).item()
        };
        let base = eval(&f_v, &f_l);
        assert!(base >= 0.0);
        // swap pairs 0 and 2 in both modalities
        let perm = |t: &Tensor| {
            let mut rows: Vec<Vec<f64>> = (0..4).map(|i| t.row(i).to_vec()).collect();
            rows.swap(0, 2);
            Tensor::from_rows(&rows)
        };
        let permuted = eval(&perm(&f_v), &perm(&f_l));
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn itc_grad_check_including_temperature() {
        let mut rng = stream(15, 9);
        let f_v = unit_rows(&mut rng, 3, 4);
        let f_l = unit_rows(&mut rng, 3, 4);
        let log_eta = Tensor::scalar(0.07f64.ln());
        let f = |tape: &mut Tape, vars: &[Var]| {
            let nv = tape.row_normalize(vars[0]);
            let nl = tape.row_normalize(vars[1]);
            let eta = tape.exp(vars[2]);
            itc_loss(tape, nv, nl, eta).unwrap()
        };
        let err = grad_check(&f, &[f_v, f_l, log_eta], 1e-5).unwrap();
        assert!(err < 1e-4, "itc rel err {err}");
    }

    #[test]
    fn stage1_total_decomposition_exact() {
        let mut tape = Tape::new();
        let itc = tape.leaf(Tensor::scalar(0.1));
        let gla = tape.leaf(Tensor::scalar(0.2));
        let gd = tape.leaf(Tensor::scalar(0.3));
        let ld = tape.leaf(Tensor::scalar(0.4));
        let t = stage1_total(&mut tape, itc, gla, gd, ld, 1.0, 1.0, 1.0);
        assert_eq!(tape.value(t).item(), ((0.1 + 0.2) + 0.3) + 0.4);
        let t0 = stage1_total(&mut tape, itc, gla, gd, ld, 0.0, 0.0, 0.0);
        assert_eq!(tape.value(t0).item(), 0.1);
        let t2 = stage1_total(&mut tape, itc, gla, gd, ld, 2.0, 1.0, 1.0);
        assert_eq!(tape.value(t2).item(), ((0.1 + 2.0 * 0.2) + 0.3) + 0.4);
    }

    #[test]
    fn stage2_closed_form_single_pos_neg() {
        let mut tape = Tape::new();
        let anchor = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let pos = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let neg = tape.leaf(Tensor::from_rows(&[vec![-1.0, 0.0]]));
        let g = ContrastiveGroup { anchor, positives: pos, negatives: neg };
        let loss = stage2_loss(&mut tape, &[g], 1.0).unwrap();
        let expect = -(1.0f64.exp() / (1.0f64.exp() + (-1.0f64).exp())).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn stage2_monotone_in_similarities() {
        let base = |p: f64, n: f64| {
            let mut tape = Tape::new();
            let anchor = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]));
            let pos = tape.leaf(Tensor::from_rows(&[vec![p, (1.0 - p * p).sqrt()]]));
            let neg = tape.leaf(Tensor::from_rows(&[vec![n, (1.0 - n * n).sqrt()]]));
            let g = ContrastiveGroup { anchor, positives: pos, negatives: neg };
            let loss = stage2_loss(&mut tape, &[g], 0.5).unwrap();
            tape.value(loss).item()
        };
        assert!(base(0.9, 0.1) < base(0.7, 0.1)); // higher positive sim -> lower loss
        assert!(base(0.7, 0.5) > base(0.7, 0.1)); // higher negative sim -> higher loss
        // duplicated group: identical loss
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape| ContrastiveGroup {
            anchor: tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]])),
            positives: tape.leaf(Tensor::from_rows(&[vec![0.7, 0.3]])),
            negatives: tape.leaf(Tensor::from_rows(&[vec![0.1, 0.9]])),
        };
        let g1 = mk(&mut tape);
        let one = stage2_loss(&mut tape, &[g1], 1.0).unwrap();
        let g2 = mk(&mut tape);
        let g3 = mk(&mut tape);
        let two = stage2_loss(&mut tape, &[g2, g3], 1.0).unwrap();
        assert!((tape.value(one).item() - tape.value(two).item()).abs() < 1e-12);
    }

    #[test]
    fn stage2_far_negatives_vanish() {
        // push negatives to -inf similarity numerically via tiny temperature
        let mut tape = Tape::new();
        let anchor = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let pos = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let neg = tape.leaf(Tensor::from_rows(&[vec![-1.0, 0.0]]));
        let g = ContrastiveGroup { anchor, positives: pos, negatives: neg };
        let loss = stage2_loss(&mut tape, &[g], 0.01).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn stage2_grad_check() {
        let mut rng = stream(16, 10);
        let anchor = unit_rows(&mut rng, 1, 3);
        let pos = unit_rows(&mut rng, 2, 3);
        let neg = unit_rows(&mut rng, 3, 3);
        let f = |tape: &mut Tape, vars: &[Var]| {
            let g = ContrastiveGroup {
                anchor: tape.row_normalize(vars[0]),
                positives: tape.row_normalize(vars[1]),
                negatives: tape.row_normalize(vars[2]),
            };
            stage2_loss(tape, &[g], 0.3).unwrap()
        };
        let err = grad_check(&f, &[anchor, pos, neg], 1e-5).unwrap();
        assert!(err < 1e-4, "stage2 rel err {err}");
    }
}
