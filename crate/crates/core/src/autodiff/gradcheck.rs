use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest relative disagreement between the tape gradient and a central
/// difference, `|analytic − numeric| / max(1, |numeric|)`, over every element
/// of every tensor in `params`.
///
/// `loss_fn` receives the tape and one leaf per parameter, in order, and must
/// return a rank-0 loss.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params
            .iter()
            .map(|p| tape.leaf(&p.clone().with_grad()))
            .collect();
        let loss = loss_fn(&tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves
            .iter()
            .zip(params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p)).collect();
        Ok(loss_fn(&tape, &leaves)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for t in 0..params.len() {
        for i in 0..params[t].numel() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[t][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let w = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
        let c = [3.0, -2.0, 0.25];
        for eps in [1e-7, 1e-5, 1e-3] {
            let err = finite_difference_check(
                |tape, p| {
                    let cv = tape.constant(vec![3], c.to_vec())?;
                    Ok(p[0].mul(&cv)?.sum())
                },
                std::slice::from_ref(&w),
                eps,
            )
            .unwrap();
            assert!(err <= 1e-6, "eps={eps}: {err}");
        }
    }

    #[test]
    fn quadratic_loss_is_exact_up_to_roundoff() {
        let w = Tensor::matrix(2, 2, vec![0.5, -1.5, 2.0, 0.1]).unwrap();
        let err = finite_difference_check(
            |_, p| Ok(p[0].mul(&p[0])?.sum().scale(0.5)),
            std::slice::from_ref(&w),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }
}
