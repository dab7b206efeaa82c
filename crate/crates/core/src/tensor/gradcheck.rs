use rayon::prelude::*;

use super::{Gradients, Graph, ParamId, Tensor, TensorError, Var};

/// A scalar function of a parameter list that can also report its analytic
/// gradient. Parameter `i` of the slice has id `i`.
pub trait Differentiable: Sync {
    type Error: From<TensorError> + Send;

    fn value(&self, params: &[Tensor]) -> Result<f64, Self::Error>;

    fn gradient(&self, params: &[Tensor]) -> Result<Gradients, Self::Error>;
}

/// Adapts a graph-building closure into a [`Differentiable`].
pub struct GraphLoss<F>(pub F);

impl<F> Differentiable for GraphLoss<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + Sync,
{
    type Error = TensorError;

    fn value(&self, params: &[Tensor]) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let loss = (self.0)(&mut g, &vars)?;
        Ok(g.value(loss).item())
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Gradients, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(i, p.clone()))
            .collect();
        let loss = (self.0)(&mut g, &vars)?;
        g.backward(loss)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over parameters of `|analytic - numeric| / (|numeric| + 1e-12)`,
    /// norms taken over each parameter tensor.
    pub max_relative_error: f64,
    pub worst_param: ParamId,
    pub per_param: Vec<(ParamId, f64)>,
    /// Largest elementwise absolute discrepancy, for diagnostics.
    pub max_abs_error: f64,
    pub passed: bool,
}

const REL_EPS: f64 = 1e-12;

/// Compares analytic gradients to central finite differences with step `step`.
pub fn grad_check<D: Differentiable>(
    loss_fn: &D,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, D::Error> {
    let analytic = loss_fn.gradient(params)?;
    for (id, g) in analytic.iter() {
        if !g.all_finite() {
            return Err(TensorError::NonFinite { param: *id }.into());
        }
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();

    let numeric_flat: Vec<f64> = coords
        .par_iter()
        .map_init(
            || params.to_vec(),
            |local, &(p, i)| -> Result<f64, D::Error> {
                let orig = local[p].data()[i];
                local[p].data_mut()[i] = orig + step;
                let plus = loss_fn.value(local);
                local[p].data_mut()[i] = orig - step;
                let minus = loss_fn.value(local);
                local[p].data_mut()[i] = orig;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(TensorError::NonFinite { param: p }.into());
                }
                Ok((plus - minus) / (2.0 * step))
            },
        )
        .collect::<Result<_, _>>()?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_abs_error: f64 = 0.0;
    let mut offset = 0;
    for (p, t) in params.iter().enumerate() {
        let numeric = &numeric_flat[offset..offset + t.numel()];
        offset += t.numel();
        let zeros;
        let a = match analytic.get(p) {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0; t.numel()];
                &zeros
            }
        };
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        for (x, y) in a.iter().zip(numeric) {
            diff_sq += (x - y) * (x - y);
            num_sq += y * y;
            max_abs_error = max_abs_error.max((x - y).abs());
        }
        per_param.push((p, diff_sq.sqrt() / (num_sq.sqrt() + REL_EPS)));
    }
    let (worst_param, max_relative_error) = per_param
        .iter()
        .copied()
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(GradCheckReport {
        max_relative_error,
        worst_param,
        per_param,
        max_abs_error,
        passed: max_relative_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_loss() {
        let f = GraphLoss(|g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        let r = grad_check(&f, &[w], 1e-5, 1e-8).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn zero_gradient_loss() {
        let f = GraphLoss(|g: &mut Graph, v: &[Var]| {
            let s = g.sub(v[0], v[0])?;
            Ok(g.sum(s))
        });
        let r = grad_check(&f, &[Tensor::full(2, 2, 0.3)], 1e-5, 1e-8).unwrap();
        assert!(r.max_relative_error < 1e-8);
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn non_finite_is_reported_with_param() {
        let f = GraphLoss(|g: &mut Graph, v: &[Var]| {
            let l = g.log_softmax_rows(v[1])?;
            let s = g.sum(l);
            let t = g.sum(v[0]);
            g.add(s, t)
        });
        let params = [Tensor::row(vec![1.0]), Tensor::row(vec![f64::NAN, 0.0])];
        let err = grad_check(&f, &params, 1e-5, 1e-8).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { param: 1 }));
    }

    /// Three-layer MLP with every differentiable op in the core set.
    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            random(&mut rng, 4, 5), // x
            random(&mut rng, 5, 6), // w1
            random(&mut rng, 1, 6), // b1
            random(&mut rng, 6, 6), // w2
            random(&mut rng, 1, 6), // ln gain
            random(&mut rng, 1, 6), // ln bias
            random(&mut rng, 6, 3), // w3
        ];
        let f = GraphLoss(|g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h);
            let h = g.matmul(h, v[3])?;
            let h = g.layer_norm(h, v[4], v[5])?;
            let o = g.matmul(h, v[6])?;
            let p = g.softmax_rows(o)?;
            let lp = g.log_softmax_rows(o)?;
            let picked = g.pick(lp, &[(0, 1), (2, 0), (3, 2)])?;
            let a = g.sum(picked);
            let pp = g.mul(p, p)?;
            let b = g.sum(pp);
            let b = g.scale(b, 0.7);
            g.add(a, b)
        });
        let r = grad_check(&f, &params, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![random(&mut rng, 5, 4), random(&mut rng, 3, 4), random(&mut rng, 2, 4)];
        let f = GraphLoss(|g: &mut Graph, v: &[Var]| {
            let rows = g.gather_rows(v[0], &[4, 1, 1])?;
            let stacked = g.concat_rows(&[rows, v[1], v[2]])?;
            let left = g.slice_cols(stacked, 0, 2)?;
            let right = g.slice_cols(stacked, 2, 2)?;
            let scores = g.matmul_nt(left, right)?;
            let att = g.causal_softmax(scores)?;
            let mixed = g.matmul(att, right)?;
            let both = g.concat_cols(&[mixed, left])?;
            let sel = g.select_rows(both, &[7, 0, 3])?;
            let sq = g.mul(sel, sel)?;
            Ok(g.sum(sq))
        });
        let r = grad_check(&f, &params, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
