use super::{Tape, Tensor, Var};
use crate::error::{LaknError, Result};

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h e_i) − f(x − h e_i)) / 2h`, coordinate by
/// coordinate, and returns the largest relative error. The denominator of
/// each relative error is `max(|analytic|, |numeric|, 1e-12)`.
///
/// `f` records the function on the given tape, starting from the leaf
/// holding `x`, and returns the scalar output.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(LaknError::Contract(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = match tape.grad(leaf) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.leaf(p.clone(), false);
        let o = f(&mut t, l)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let w = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let err = finite_diff_check(
            |t, x| {
                let w = t.leaf(w.clone(), false);
                let p = t.mul(x, w)?;
                t.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn quadratic_function_truncation_error() {
        // central differences are exact for quadratics up to rounding
        let x = Tensor::vector(vec![0.4, -0.2, 0.9, 1.3]);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[8, 8], &mut rng);
        let b = random(&[8, 8], &mut rng);
        let w = random(&[8, 8], &mut rng);
        let f_a = |t: &mut Tape<'_>, x: Var| {
            let bb = t.leaf(b.clone(), false);
            let ww = t.leaf(w.clone(), false);
            let c = t.matmul(x, bb)?;
            let p = t.mul(c, ww)?;
            t.sum(p)
        };
        assert!(finite_diff_check(f_a, &a, 1e-5).unwrap() <= 1e-6);
        let f_b = |t: &mut Tape<'_>, x: Var| {
            let aa = t.leaf(a.clone(), false);
            let ww = t.leaf(w.clone(), false);
            let c = t.matmul(aa, x)?;
            let p = t.mul(c, ww)?;
            t.sum(p)
        };
        assert!(finite_diff_check(f_b, &b, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 6], &mut rng);
        let w = random(&[4, 6], &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let g = t.gelu(x)?;
                let ww = t.leaf(w.clone(), false);
                let p = t.mul(g, ww)?;
                t.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
