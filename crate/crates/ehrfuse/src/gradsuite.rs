//! The user-facing gradient verification suite: every primitive plus the
//! full model forward through the combined objective, all checked against
//! central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Pooling};
use crate::data::DEMO_ATTRS;
use crate::model::{forward_patient, Model, PatientInputs};
use crate::nn::Fwd;
use crate::objectives::{contrastive_total, hierarchical_loss, multilabel_ce, total_loss};
use crate::params::ParamSet;
use crate::tensor::{grad_check_many, GradCheckReport, Tensor, TensorResult};

pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Finite-difference checks for every tape primitive on random inputs in
/// `[-1, 1]`, at `h = 1e-5` and relative tolerance `1e-4`.
pub fn primitive_suite() -> TensorResult<Vec<SuiteEntry>> {
    let h = 1e-5;
    let tol = 1e-4;
    let mut entries = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        entries.push(SuiteEntry { name, report });
    };

    push(
        "matmul",
        grad_check_many(&[rand_t(vec![3, 4], 1), rand_t(vec![4, 2], 2)], h, tol, |tape, ids| {
            let p = tape.matmul(ids[0], ids[1])?;
            let sq = tape.mul(p, p)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "softmax",
        grad_check_many(&[rand_t(vec![3, 5], 3)], h, tol, |tape, ids| {
            let s = tape.softmax(ids[0], 1, None)?;
            let sq = tape.mul(s, s)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "layer_norm",
        grad_check_many(
            &[rand_t(vec![3, 6], 4), rand_t(vec![6], 5), rand_t(vec![6], 6)],
            h,
            tol,
            |tape, ids| {
                let out = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
        )?,
    );
    push(
        "conv1d",
        grad_check_many(&[rand_t(vec![7, 3], 7), rand_t(vec![3, 3, 4], 8)], h, tol, |tape, ids| {
            let out = tape.conv1d(ids[0], ids[1])?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "relu",
        grad_check_many(&[rand_t(vec![12], 9)], h, tol, |tape, ids| {
            let r = tape.relu(ids[0]);
            let sq = tape.mul(r, r)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "sigmoid",
        grad_check_many(&[rand_t(vec![12], 10)], h, tol, |tape, ids| {
            let s = tape.sigmoid(ids[0]);
            Ok(tape.sum_all(s))
        })?,
    );
    push(
        "add_mul",
        grad_check_many(&[rand_t(vec![3, 3], 11), rand_t(vec![3, 3], 12)], h, tol, |tape, ids| {
            let a = tape.add(ids[0], ids[1])?;
            let m = tape.mul(a, ids[0])?;
            Ok(tape.sum_all(m))
        })?,
    );
    push(
        "concat",
        grad_check_many(&[rand_t(vec![2, 3], 13), rand_t(vec![2, 2], 14)], h, tol, |tape, ids| {
            let c = tape.concat(&[ids[0], ids[1]], 1)?;
            let sq = tape.mul(c, c)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "max_over_time",
        grad_check_many(&[rand_t(vec![6, 4], 15)], h, tol, |tape, ids| {
            let m = tape.max_over_time(ids[0])?;
            let sq = tape.mul(m, m)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "embed_rows",
        grad_check_many(&[rand_t(vec![5, 3], 16)], h, tol, |tape, ids| {
            let e = tape.embed_rows(ids[0], &[0, 4, 2, 2])?;
            let sq = tape.mul(e, e)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "embed_sum_rows",
        grad_check_many(&[rand_t(vec![5, 3], 17)], h, tol, |tape, ids| {
            let e = tape.embed_sum_rows(ids[0], &[vec![0, 1], vec![2, 3, 4]])?;
            let sq = tape.mul(e, e)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "l2_norm",
        grad_check_many(&[rand_t(vec![9], 18)], h, tol, |tape, ids| Ok(tape.l2_norm(ids[0])))?,
    );
    push(
        "dropout_fixed_mask",
        grad_check_many(&[rand_t(vec![10], 19)], h, tol, |tape, ids| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let d = tape.dropout(ids[0], 0.3, true, &mut rng)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum_all(sq))
        })?,
    );
    push(
        "min_const",
        grad_check_many(&[rand_t(vec![8], 20)], h, tol, |tape, ids| {
            let m = tape.min_const(ids[0], 0.4);
            let sq = tape.mul(m, m)?;
            Ok(tape.sum_all(sq))
        })?,
    );

    Ok(entries)
}

/// Toy model for the end-to-end check: two visits, hidden width 8, six leaf
/// codes over two parents, vocabulary of ten words.
pub fn toy_model() -> Model {
    let cfg = ModelConfig {
        hidden: 8,
        note_hidden: 8,
        word_dim: 6,
        note_filters: vec![2, 3, 4],
        heads: 4,
        layers: 3,
        dropout: 0.1,
        projector_width: 1,
        causal: true,
        freeze_word_embeddings: false,
        pool: Pooling::Mean,
    };
    Model::new(cfg, 6, 2, 10)
}

struct ToyPatient {
    codes: Vec<Vec<usize>>,
    demo: Vec<[usize; DEMO_ATTRS]>,
    notes: Vec<Vec<usize>>,
    target_leaf: Vec<f64>,
    target_parent: Vec<f64>,
}

fn toy_batch() -> Vec<ToyPatient> {
    vec![
        ToyPatient {
            codes: vec![vec![0, 2], vec![1, 4]],
            demo: vec![[3, 1, 2, 0, 5, 1], [4, 1, 2, 0, 5, 1]],
            notes: vec![vec![2, 5, 7, 9], vec![1, 3, 4, 8, 6]],
            // leaf space |C| = 6, two visits of targets
            target_leaf: vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            // parent space |A| = 2
            target_parent: vec![1.0, 1.0, 1.0, 0.0],
        },
        ToyPatient {
            codes: vec![vec![3, 5], vec![0, 1, 2]],
            demo: vec![[9, 0, 1, 4, 2, 3], [9, 0, 1, 4, 2, 3]],
            notes: vec![vec![0, 1, 2, 3, 4], vec![9, 8, 7, 6]],
            target_leaf: vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            target_parent: vec![1.0, 0.0, 1.0, 1.0],
        },
    ]
}

/// Finite-difference check of the full forward pass through the combined
/// objective (cross-entropy + both contrastive pairs + hierarchy heads) with
/// respect to every parameter. Kink-adjacent coordinates, where the central
/// difference itself is invalid, are detected and excluded by the checker.
pub fn model_suite() -> TensorResult<SuiteEntry> {
    let model = toy_model();
    let set = model.init_params(137);
    let patients = toy_batch();
    let ablation = crate::config::AblationSwitches::default();

    let names: Vec<String> = model.expected_layout().into_iter().map(|(n, _)| n).collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| set.get(n).unwrap().clone()).collect();
    let report = grad_check_many(&tensors, 1e-5, 1e-4, |tape, ids| {
        let mut rebuilt = ParamSet::new();
        for (name, id) in names.iter().zip(ids) {
            rebuilt.insert(name, tape.to_tensor(*id)).unwrap();
        }
        let bound = crate::model::Bound { set: &rebuilt, ids: ids.to_vec() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let mut ce_terms = Vec::new();
        let mut hr_terms = Vec::new();
        let mut pooled: [Vec<crate::tensor::TensorId>; 3] = Default::default();
        for p in &patients {
            let inputs = PatientInputs { codes: &p.codes, demo: &p.demo, notes: p.notes.clone() };
            let mut fwd = Fwd { tape, train: false, dropout_rate: 0.0, rng: &mut rng };
            let out = forward_patient(&mut fwd, &model, &bound, &inputs, &ablation)?;
            let mask = vec![true; p.codes.len()];
            ce_terms.push(multilabel_ce(tape, out.probs, &p.target_leaf, &mask)?);
            hr_terms.push(hierarchical_loss(tape, &out.parent_probs, &p.target_parent, &mask)?);
            for (m, id) in out.pooled.into_iter().enumerate() {
                pooled[m].push(id);
            }
        }
        let ce_sum = tape.add(ce_terms[0], ce_terms[1])?;
        let ce = tape.scale(ce_sum, 0.5);
        let hr_sum = tape.add(hr_terms[0], hr_terms[1])?;
        let hr = tape.scale(hr_sum, 0.5);
        let code = tape.concat(&pooled[0], 0)?;
        let demo = tape.concat(&pooled[1], 0)?;
        let note = tape.concat(&pooled[2], 0)?;
        let con = contrastive_total(tape, code, demo, note, 0.1, 0.25)?;
        total_loss(tape, &[(ce, 1.0), (con, 1.0), (hr, 0.1)])
    })?;
    Ok(SuiteEntry { name: "full_model_total_loss", report })
}

/// Primitive checks plus the full-model check.
pub fn full_suite() -> TensorResult<Vec<SuiteEntry>> {
    let mut entries = primitive_suite()?;
    entries.push(model_suite()?);
    Ok(entries)
}
