//! Central finite-difference checks of every loss on random small instances.

use oe_tune::autodiff::{finite_difference_check, Tape, Tensor, Var};
use oe_tune::losses::{
    classification_loss, kd_loss, oe_uniform_loss, oscl_loss, total_loss, LossTerms, LossWeights, ScReduction,
};
use oe_tune::model::{ModelDims, ModelParams, ParamVars};
use proptest::collection::vec;
use proptest::prelude::*;

const TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(100)
}

/// `b × k` logits with labels.
fn labelled(max_b: usize, max_k: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1..=max_b, 2..=max_k).prop_flat_map(|(b, k)| {
        (Just(b), Just(k), vec(-4.0..4.0f64, b * k), vec(0..k, b))
    })
}

/// Raw rows that become unit embeddings after normalisation. Rows are kept
/// away from the origin so the normalisation is well conditioned.
fn raw_rows(rows: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0..1.0f64, rows * n).prop_map(move |mut v| {
        for r in v.chunks_exact_mut(n) {
            r[0] += 1.5f64.copysign(r[0]);
        }
        v
    })
}

fn unit<'t>(v: &Var<'t>) -> Var<'t> {
    v.l2_normalize_rows().unwrap()
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn classification_gradient((b, k, z, y) in labelled(5, 5)) {
        let z = Tensor::matrix(b, k, z).unwrap();
        let err = finite_difference_check(|_, p| classification_loss(p[0], &y), &[z], EPS).unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn oe_gradient((b, k, z, _) in labelled(5, 5)) {
        let z = Tensor::matrix(b, k, z).unwrap();
        let err = finite_difference_check(|_, p| Ok(oe_uniform_loss(Some(p[0]))?.unwrap()), &[z], EPS).unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn oe_objective_gradient(
        (b, k, z, y) in labelled(4, 4),
        zo in vec(-4.0..4.0f64, 12),
        lambda in 0.0..6.0f64,
    ) {
        let z = Tensor::matrix(b, k, z).unwrap();
        let rows = zo.len() / k;
        let zo = Tensor::matrix(rows, k, zo[..rows * k].to_vec()).unwrap();
        let err = finite_difference_check(
            |_, p| {
                let reg = oe_uniform_loss(Some(p[1]))?.unwrap();
                classification_loss(p[0], &y)?.add(&reg.scale(lambda))
            },
            &[z, zo],
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn kd_gradient(
        (b, k, s, _) in labelled(4, 5),
        teacher in vec(-4.0..4.0f64, 20),
        t_kd in 0.5..6.0f64,
    ) {
        let s = Tensor::matrix(b, k, s).unwrap();
        let teacher = teacher[..b * k].to_vec();
        let err = finite_difference_check(
            |tape, p| kd_loss(p[0], tape.constant(vec![b, k], teacher.clone())?, t_kd),
            &[s],
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn oscl_gradient(
        (bi, bo, n, xi, xo, labels) in (1usize..6, 0usize..4, 2usize..5).prop_flat_map(|(bi, bo, n)| {
            (Just(bi), Just(bo), Just(n), raw_rows(bi, n), raw_rows(bo, n), vec(0usize..3, bi))
        }),
        tau in 0.1..1.0f64,
        mean in any::<bool>(),
    ) {
        let reduction = if mean { ScReduction::Mean } else { ScReduction::Sum };
        let mut params = vec![Tensor::matrix(bi, n, xi).unwrap()];
        if bo > 0 {
            params.push(Tensor::matrix(bo, n, xo).unwrap());
        }
        let err = finite_difference_check(
            |_, p| {
                let out = p.get(1).map(unit);
                oscl_loss(unit(&p[0]), &labels, out, tau, reduction)
            },
            &params,
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn oscl_gradient_random_embeddings(
        xi in raw_rows(5, 3),
        xo in raw_rows(3, 3),
        labels in vec(0usize..2, 5),
        tau in 0.1..0.5f64,
    ) {
        let params = [Tensor::matrix(5, 3, xi).unwrap(), Tensor::matrix(3, 3, xo).unwrap()];
        let err = finite_difference_check(
            |_, p| oscl_loss(unit(&p[0]), &labels, Some(unit(&p[1])), tau, ScReduction::Sum),
            &params,
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn combined_objective_gradient(
        (b, k, z, y) in labelled(4, 4),
        zo in vec(-3.0..3.0f64, 8),
        zt in vec(-3.0..3.0f64, 16),
        xe in raw_rows(4, 3),
        xo in raw_rows(2, 3),
        l_reg in 0.0..6.0f64,
        l_kd in 0.0..2.0f64,
        l_sc in 0.0..2.0f64,
    ) {
        let w = LossWeights { lambda_reg: l_reg, lambda_kd: l_kd, lambda_sc: l_sc, ..LossWeights::default() };
        let rows_out = zo.len() / k;
        let params = [
            Tensor::matrix(b, k, z).unwrap(),
            Tensor::matrix(rows_out, k, zo[..rows_out * k].to_vec()).unwrap(),
            Tensor::matrix(b, 3, xe[..b * 3].to_vec()).unwrap(),
            Tensor::matrix(2, 3, xo).unwrap(),
        ];
        let teacher = zt[..b * k].to_vec();
        let err = finite_difference_check(
            |tape, p| {
                let t = tape.constant(vec![b, k], teacher.clone())?;
                let terms = LossTerms {
                    classification: classification_loss(p[0], &y)?,
                    reg: oe_uniform_loss(Some(p[1]))?,
                    kd: Some(kd_loss(p[0], t, w.t_kd)?),
                    sc: Some(oscl_loss(unit(&p[2]), &y, Some(unit(&p[3])), w.tau_sc, ScReduction::Mean)?),
                };
                Ok(total_loss(&terms, &w)?.0)
            },
            &params,
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn combined_objective_through_model(seed in any::<u64>(), b in 2usize..5, x in vec(-2.0..2.0f64, 16)) {
        let dims = ModelDims { input: 2, feature: 4, embed: 3, classes: 3 };
        let mut model = ModelParams::init(dims, &[5], seed).unwrap();
        // a nonzero projector bias keeps every projection off the origin
        model.projector_mut().bias.data_mut().copy_from_slice(&[0.6, -0.4, 0.5]);
        let teacher = ModelParams::init(dims, &[5], seed ^ 1).unwrap();
        let xin = x[..2 * b].to_vec();
        let xout = x[8..12].to_vec();
        let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let t_logits = teacher.logits(&xin, b).unwrap();
        let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        let w = LossWeights::default();
        let err = finite_difference_check(
            |tape, p| {
                let vars = ParamVars { vars: p.to_vec() };
                let xi = tape.constant(vec![b, 2], xin.clone())?;
                let xo = tape.constant(vec![2, 2], xout.clone())?;
                let fi = model.forward_tape(&vars, xi, true)?;
                let fo = model.forward_tape(&vars, xo, true)?;
                let t = tape.constant(vec![b, 3], t_logits.clone())?;
                let terms = LossTerms {
                    classification: classification_loss(fi.logits, &labels)?,
                    reg: oe_uniform_loss(Some(fo.logits))?,
                    kd: Some(kd_loss(fi.logits, t, w.t_kd)?),
                    sc: Some(oscl_loss(fi.embedding.unwrap(), &labels, fo.embedding, w.tau_sc, ScReduction::Sum)?),
                };
                Ok(total_loss(&terms, &w)?.0)
            },
            &params,
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn primitive_gradients(x in vec(-2.0..2.0f64, 6), y in vec(-2.0..2.0f64, 6), t in 0.5..3.0f64) {
        let params = [Tensor::matrix(2, 3, x).unwrap(), Tensor::matrix(2, 3, y).unwrap()];
        let err = finite_difference_check(
            |tape, q| {
                let m = q[0].matmul_t(&q[1])?.log_softmax_rows(t)?.sum();
                let s = q[0].softmax_rows(t)?.mul(&q[1])?.sum();
                let e = q[1].scale(0.3).exp().sum();
                let r = q[0].concat_rows(&q[1])?.max_rows().sum_rows().sum();
                let ones = tape.constant(vec![2, 3], vec![1.0; 6])?;
                let l = q[0].mul(&q[0])?.add(&ones)?.log()?.mean();
                let h = q[0].sub(&q[1])?.relu().sum();
                m.add(&s)?.add(&e)?.add(&r)?.add(&l)?.add(&h)
            },
            &params,
            EPS,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let tape = Tape::new();
    let s = tape.leaf(&Tensor::matrix(2, 3, vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap().with_grad());
    let t = tape.leaf(&Tensor::matrix(2, 3, vec![2.0, -1.0, 0.5, 0.0, 0.7, -0.4]).unwrap().with_grad());
    let loss = kd_loss(s, t, 4.0).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(s).unwrap().iter().any(|v| *v != 0.0));
    assert!(g.get(t).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
}
