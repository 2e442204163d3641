use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar program against central differences.
///
/// `program` receives a fresh tape and the leaf holding `point` and must
/// return a scalar. The result is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn grad_check<F>(program: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = program(&mut tape, x)?;
    let analytic = tape.backward(out)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let out = program(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::contract("grad_check program must be scalar-valued"));
        }
        Ok(v.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
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
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_program() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let err = grad_check(
            |t, x| {
                let s = t.scale(x, 2.5);
                let a = t.pick(s, 0)?;
                let b = t.pick(s, 2)?;
                t.sum(&[a, b])
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_program() {
        let p = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let c = Tensor::vector(vec![1.0, 1.0, -1.0]);
        let err = grad_check(
            |t, x| {
                let c = t.constant(c.clone());
                t.sq_distance(x, c)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn relu_sum_gradient() {
        let p = Tensor::vector(vec![-1.0, 3.0]);
        let mut t = Tape::new();
        let x = t.leaf(p.clone());
        let r = t.relu(x);
        let a = t.pick(r, 0).unwrap();
        let b = t.pick(r, 1).unwrap();
        let y = t.sum(&[a, b]).unwrap();
        assert_eq!(t.backward(y).unwrap().wrt(x).data(), &[0.0, 1.0]);
        let err = grad_check(
            |t, x| {
                let r = t.relu(x);
                let a = t.pick(r, 0)?;
                let b = t.pick(r, 1)?;
                t.sum(&[a, b])
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
    }

    // Each primitive on random small inputs.
    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = random(&[2, 6, 6], &mut rng);
        let kernels = random(&[3, 2, 3, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        let mask: Vec<f64> = (0..64).map(|i| if i % 3 == 0 { 1.0 } else { 0.2 }).collect();

        // conv input, kernels and bias in turn
        for which in 0..3 {
            let point = [&image, &kernels, &bias][which].clone();
            let err = grad_check(
                |t, x| {
                    let mut args = [t.constant(image.clone()), t.constant(kernels.clone()), t.constant(bias.clone())];
                    args[which] = x;
                    let y = t.conv2d(args[0], args[1], args[2], 1, 1)?;
                    let y = t.relu(y);
                    let y = t.avg_pool(y, 2)?;
                    let y = t.global_avg_pool(y)?;
                    let w = t.constant(Tensor::new(&[2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap());
                    let b = t.constant(Tensor::vector(vec![0.05, -0.05]));
                    let z = t.dense(y, w, b)?;
                    t.cross_entropy(z, 1)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "conv operand {which}: {err}");
        }

        let weights = [0.7, -0.3, 1.1];
        let err = grad_check(
            |t, x| {
                let k = t.constant(kernels.clone());
                let b = t.constant(bias.clone());
                let a = t.conv2d(x, k, b, 1, 1)?;
                let a = t.relu(a);
                let m = t.channel_weighted_sum(a, &weights)?;
                let m = t.relu(m);
                let m = t.upsample_bilinear(m, 8, 8)?;
                let m = t.normalize_by_max(m);
                t.dice_loss(m, &mask)
            },
            &image,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "cam chain: {err}");

        let v = random(&[4], &mut rng);
        let err = grad_check(
            |t, x| {
                let p = t.softmax(x)?;
                let c = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
                let q = t.mul(p, c)?;
                let s = t.scale(q, -3.0);
                let a = t.pick(s, 1)?;
                let b = t.pick(s, 3)?;
                let half = t.slice(x, 1, &[2])?;
                let mh = t.mean(&[half, half])?;
                let z = t.constant(Tensor::vector(vec![0.0, 0.5]));
                let d = t.sq_distance(mh, z)?;
                let st = t.stack(&[a, b, d])?;
                let ce = t.cross_entropy(st, 2)?;
                let e = t.add(ce, d)?;
                Ok(e)
            },
            &v,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "vector chain: {err}");
    }
}
