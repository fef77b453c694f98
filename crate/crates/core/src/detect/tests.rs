use super::*;
use crate::graphdata::{synthesize, RatingGraph, SyntheticSpec};
use crate::numkernel::{finite_difference_gradient, relative_error};
use crate::recmodel::{GraphIndex, RecConfig};
use proptest::prelude::*;

fn cfg() -> DefenseConfig {
    DefenseConfig::default()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn defaults_validate() {
    assert!(cfg().validate().is_ok());
    let mut c = cfg();
    c.c1_init = 0.9;
    assert!(c.validate().is_err());
    let mut c = cfg();
    c.temperature = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn refined_embedding_appends_error_summary() {
    assert_eq!(refined_embedding(&[0.5, -1.0], &[1.0, 3.0]), vec![0.5, -1.0, 2.0, 3.0]);
    assert_eq!(refined_embedding(&[0.5], &[0.0, 0.0]), vec![0.5, 0.0, 0.0]);
    assert_eq!(refined_embedding(&[0.5, 1.0, 2.0], &[]).len(), 5);
}

fn head_with_logits(l0: f64, l1: f64, t: f64) -> DetectorParams {
    // identity-like first layer feeding fixed biases
    let mut p = DetectorParams::init(1, 1, t, 0);
    p.w1 = Tensor::zeros(&[1, 1]);
    p.w2 = Tensor::zeros(&[1, 2]);
    p.b2 = Tensor::vector(vec![l0, l1]);
    p
}

#[test]
fn temperature_scaled_posteriors() {
    let x = Tensor::matrix(1, 1, vec![0.3]).unwrap();
    for t in [0.5, 1.0, 2.0, 7.0] {
        let q = detect_forward(&x, &head_with_logits(0.0, 0.0, t)).unwrap();
        assert_eq!(q.0, vec![[0.5, 0.5]]);
    }
    let e2 = 2f64.exp();
    let q1 = detect_forward(&x, &head_with_logits(2.0, 0.0, 1.0)).unwrap();
    assert!(close(q1.0[0][FAKE], e2 / (e2 + 1.0), 1e-12));
    assert!(close(q1.0[0][FAKE], 0.881, 5e-4));
    let q2 = detect_forward(&x, &head_with_logits(2.0, 0.0, 2.0)).unwrap();
    assert!(close(q2.0[0][FAKE], 0.731, 5e-4));
    assert!(q2.validate().is_ok());
}

#[test]
fn cross_entropy_values() {
    let labels = [Label::Fake, Label::Normal];
    let onehot = PosteriorTable(vec![[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(supervised_ce_loss(&onehot, &labels).unwrap(), 0.0);
    let flat = PosteriorTable(vec![[0.5, 0.5]; 2]);
    assert!(close(supervised_ce_loss(&flat, &labels).unwrap(), 2f64.ln(), 1e-15));
    let mixed = PosteriorTable(vec![[0.9, 0.1], [0.2, 0.8]]);
    let v = supervised_ce_loss(&mixed, &labels).unwrap();
    assert!(close(v, -(0.9f64.ln() + 0.8f64.ln()) / 2.0, 1e-15));
    assert!(close(v, 0.1643, 5e-5));
    assert!(supervised_ce_loss(&flat, &[Label::Unlabeled, Label::Fake]).is_err());
}

#[test]
fn priors_from_labels() {
    let p = init_priors(&[Label::Fake, Label::Normal], 0.01, 0.2).unwrap();
    assert_eq!(p.0, vec![[0.99, 0.01], [0.2, 0.8]]);
    assert!(p.validate().is_ok());
    assert!(init_priors(&[Label::Fake], 0.0, 0.0).is_err());
}

#[test]
fn ip_loss_hand_values() {
    let uniform = PriorTable(vec![[0.5, 0.5]]);
    let q = PosteriorTable(vec![[0.5, 0.5]]);
    assert!(close(ip_loss(&q, &uniform).unwrap(), 0.0, 1e-15));
    let q = PosteriorTable(vec![[1.0, 0.0], [0.0, 1.0]]);
    let p = PriorTable(vec![[0.5, 0.5]; 2]);
    assert!(close(ip_loss(&q, &p).unwrap(), 2.0 * 2f64.ln(), 1e-12));
    let bad = PriorTable(vec![[0.0, 1.0], [0.5, 0.5]]);
    assert!(ip_loss(&q, &bad).is_err());
}

#[test]
fn ip_loss_tape_matches_plain() {
    let q = PosteriorTable(vec![[0.3, 0.7], [0.9, 0.1], [0.05, 0.95], [0.5, 0.5]]);
    let p = PriorTable(vec![[0.2, 0.8], [0.99, 0.01], [0.3, 0.7], [0.6, 0.4]]);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_rows(&q.0.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
    let l = ip_loss_on_tape(&mut tape, v, &[0, 1, 2, 3], &p).unwrap();
    assert!(close(tape.value(l).item(), ip_loss(&q, &p).unwrap(), 1e-12));
}

fn ip_of_head(z: &Tensor, params: &DetectorParams, prior: &PriorTable) -> f64 {
    ip_loss(&detect_forward(z, params).unwrap(), prior).unwrap()
}

#[test]
fn ip_loss_gradient_matches_finite_differences() {
    let z = Tensor::from_rows(&[
        vec![0.2, -0.4, 1.0],
        vec![1.5, 0.3, -0.2],
        vec![-0.7, 0.9, 0.4],
        vec![0.1, 0.1, 2.0],
        vec![-1.2, -0.5, 0.3],
    ])
    .unwrap();
    let prior = init_priors(
        &[Label::Fake, Label::Normal, Label::Normal, Label::Fake, Label::Normal],
        0.01,
        0.2,
    )
    .unwrap();
    let params = DetectorParams::init(3, 4, 2.0, 17);
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let zv = tape.constant(z.clone());
    let logits = logits_on_tape(&mut tape, zv, &vars).unwrap();
    let probs = tape.softmax(logits, 2.0).unwrap();
    let loss = ip_loss_on_tape(&mut tape, probs, &[0, 1, 2, 3, 4], &prior).unwrap();
    let g = tape.backward(loss).unwrap();
    for k in 0..4 {
        let fd = finite_difference_gradient::<_, ()>(
            |x| {
                let mut p = params.clone();
                *p.tensors_mut()[k] = x.clone();
                Ok(ip_of_head(&z, &p, &prior))
            },
            params.tensors()[k].1,
            1e-6,
        )
        .unwrap();
        let err = relative_error(g.get(vars.all()[k]).unwrap(), &fd, 1e-6);
        assert!(err < 1e-4, "{}: {err}", params.tensors()[k].0);
    }
}

#[test]
fn adjust_labels_hand_values() {
    let c = cfg();
    let p = PriorTable(vec![[0.2, 0.8]; 3]);
    let q = PosteriorTable(vec![[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]]);
    let next = adjust_labels(&p, &q, &c, 0.4, 0.85).unwrap();
    assert_eq!(next.0[0][FAKE], 0.95 * 0.2 + 0.05 * 0.9);
    assert!(close(next.0[0][FAKE], 0.235, 1e-15));
    assert_eq!(next.0[1][FAKE], 0.95 * 0.2 - 0.05 * 0.9);
    assert!(close(next.0[1][FAKE], 0.145, 1e-15));
    assert_eq!(next.0[2], [0.2, 0.8]);
    assert!(adjust_labels(&p, &q, &c, 0.5, 0.4).is_err());
}

#[test]
fn adjust_labels_clamps_negative_updates() {
    let c = cfg();
    let p = PriorTable(vec![[0.02, 0.98]]);
    let q = PosteriorTable(vec![[0.1, 0.9]]);
    let next = adjust_labels(&p, &q, &c, 0.4, 0.85).unwrap();
    assert_eq!(next.0[0], [c.p_min, 1.0 - c.p_min]);
}

proptest! {
    #[test]
    fn adjust_labels_invariants(pf in 0.001f64..0.999, qf in 0.0f64..=1.0) {
        let c = cfg();
        let p = PriorTable(vec![[pf, 1.0 - pf]]);
        let q = PosteriorTable(vec![[qf, 1.0 - qf]]);
        let next = adjust_labels(&p, &q, &c, c.c1_init, c.c2_init).unwrap();
        let nf = next.0[0][FAKE];
        prop_assert!(nf > 0.0 && nf < 1.0);
        prop_assert!((next.0[0][0] + next.0[0][1] - 1.0).abs() < 1e-12);
        if (c.c1_init..=c.c2_init).contains(&qf) {
            prop_assert_eq!(nf, pf);
        }
        let raw_up = (1.0 - c.alpha) * pf + c.alpha * qf;
        let raw_down = (1.0 - c.alpha) * pf - c.alpha * (1.0 - qf);
        if qf > c.c2_init && pf < qf {
            prop_assert!(nf > pf || raw_up >= 1.0 - c.p_min);
        }
        if qf < c.c1_init {
            prop_assert!(nf < pf || raw_down <= c.p_min);
        }
    }

    #[test]
    fn ip_loss_is_permutation_invariant(rows in proptest::collection::vec((0.0f64..=1.0, 0.01f64..0.99), 1..12), rot in 0usize..12) {
        let q: Vec<[f64; 2]> = rows.iter().map(|&(a, _)| [a, 1.0 - a]).collect();
        let p: Vec<[f64; 2]> = rows.iter().map(|&(_, b)| [b, 1.0 - b]).collect();
        let base = ip_loss(&PosteriorTable(q.clone()), &PriorTable(p.clone())).unwrap();
        let k = rot % q.len();
        let (mut q2, mut p2) = (q, p);
        q2.rotate_left(k);
        p2.rotate_left(k);
        let moved = ip_loss(&PosteriorTable(q2), &PriorTable(p2)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn auc_matches_all_pairs(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..100)) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| f64::from(s) / 5.0).collect();
        let fake: Vec<bool> = data.iter().map(|&(_, f)| f).collect();
        let got = auc(&scores, &fake);
        match brute_auc(&scores, &fake) {
            Some(want) => prop_assert_eq!(got.unwrap(), want),
            None => prop_assert!(got.is_err()),
        }
    }
}

fn brute_auc(scores: &[f64], fake: &[bool]) -> Option<f64> {
    let (mut won, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if fake[i] && !fake[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    won += 1.0;
                } else if scores[i] == scores[j] {
                    won += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| won / pairs)
}

#[test]
fn decay_schedule() {
    let c = cfg();
    assert_eq!(decay_interval(0.4, 0.85, &c), (0.375, 0.875));
    let (mut c1, mut c2) = (0.4, 0.85);
    let mut c1_hit = None;
    let mut c2_hit = None;
    for step in 1..=20 {
        (c1, c2) = decay_interval(c1, c2, &c);
        if c1 == 0.2 && c1_hit.is_none() {
            c1_hit = Some(step);
        }
        if c2 == 1.0 && c2_hit.is_none() {
            c2_hit = Some(step);
        }
    }
    assert_eq!((c1_hit, c2_hit), (Some(8), Some(6)));
    assert_eq!(decay_interval(0.2, 1.0, &c), (0.2, 1.0));
}

#[test]
fn auc_hand_values() {
    assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap(), 0.75);
    assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.3, 0.2], &[true, true]), Err(DetectError::Validation(_))));
}

#[test]
fn trajectory_csv_format() {
    let rows = vec![TrajectoryRow {
        epoch: 3,
        user_id: "u1".into(),
        user_type: "IV".into(),
        q_fake: 0.25,
    }];
    let mut buf = Vec::new();
    write_trajectory(&rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "epoch,user_id,user_type,q_fake\n3,u1,IV,0.250000\n");
}

fn small_graph() -> RatingGraph {
    synthesize(&SyntheticSpec::new(12, 6, 3, 3.0, 5)).unwrap()
}

fn context(g: &RatingGraph, mode: DetectorMode) -> TrainingContext {
    let users: Vec<usize> = (0..g.n_users()).collect();
    let labels: Vec<Label> = users.iter().map(|&u| g.label(u)).collect();
    TrainingContext {
        mode,
        prior: init_priors(&labels, 0.01, 0.2).unwrap(),
        users,
        labels,
        lambda: 0.7,
    }
}

fn small_model(g: &RatingGraph, t: f64) -> JointModel {
    let rc = RecConfig {
        dim: 3,
        hidden: 4,
        ..RecConfig::default()
    };
    JointModel::init(g.n_items(), crate::graphdata::N_USER_FEATURES, g.levels(), &rc, 4, t, 2)
}

#[test]
fn joint_gradients_match_finite_differences() {
    let g = small_graph();
    let idx = GraphIndex::new(&g);
    for (mode, t) in [(DetectorMode::GraphRfi, 1.0), (DetectorMode::Pdr, 2.0)] {
        let ctx = context(&g, mode);
        let model = small_model(&g, t);
        let (_, grads) = joint_gradients(&model, &idx, &ctx).unwrap();
        let n_rec = model.rec.tensors().len();
        for (k, grad) in grads.iter().enumerate() {
            let base = if k < n_rec {
                model.rec.tensors()[k].1.clone()
            } else {
                model.det.tensors()[k - n_rec].1.clone()
            };
            let fd = finite_difference_gradient::<_, ()>(
                |x| {
                    let mut m = model.clone();
                    if k < n_rec {
                        *m.rec.tensors_mut()[k] = x.clone();
                    } else {
                        *m.det.tensors_mut()[k - n_rec] = x.clone();
                    }
                    Ok(joint_loss_value(&m, &idx, &ctx).unwrap())
                },
                &base,
                1e-6,
            )
            .unwrap();
            let err = relative_error(grad, &fd, 1e-6);
            assert!(err < 1e-4, "{mode:?} tensor {k}: {err}");
        }
    }
}

#[test]
fn adversarial_step_without_noise_is_plain_step() {
    let g = small_graph();
    let idx = GraphIndex::new(&g);
    let ctx = context(&g, DetectorMode::GraphRfi);
    let mut a = small_model(&g, 1.0);
    let mut b = a.clone();
    joint_train_step(&mut a, &idx, &ctx, 0.05).unwrap();
    adversarial_training_step(&mut b, &idx, &ctx, 0.05, 0.0).unwrap();
    assert_eq!(a, b);
    let mut c = small_model(&g, 1.0);
    let mut d = c.clone();
    adversarial_training_step(&mut c, &idx, &ctx, 0.05, 0.1).unwrap();
    adversarial_training_step(&mut d, &idx, &ctx, 0.05, 0.1).unwrap();
    assert_eq!(c, d);
}

#[test]
fn ascent_perturbation_raises_convex_loss() {
    // f(x) = ½ xᵀAx with A positive definite
    let a = [[3.0, 0.5], [0.5, 1.0]];
    let f = |x: &[f64]| {
        0.5 * (0..2).map(|i| (0..2).map(|j| x[i] * a[i][j] * x[j]).sum::<f64>()).sum::<f64>()
    };
    for x in [[1.0, -2.0], [0.3, 0.1], [-4.0, 2.5]] {
        let g = Tensor::vector(vec![a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]);
        let d = adversarial_perturbation(&[g], 0.01);
        let moved = [x[0] + d[0].data()[0], x[1] + d[0].data()[1]];
        assert!(f(&moved) >= f(&x));
        assert!((d[0].norm() - 0.01).abs() < 1e-12);
    }
    assert_eq!(adversarial_perturbation(&[Tensor::zeros(&[3])], 1.0)[0], Tensor::zeros(&[3]));
}

#[test]
fn posterior_rows_are_distributions() {
    let g = small_graph();
    let q = posterior(&small_model(&g, 2.0), &GraphIndex::new(&g)).unwrap();
    assert_eq!(q.0.len(), g.n_users());
    assert!(q.validate().is_ok());
}
