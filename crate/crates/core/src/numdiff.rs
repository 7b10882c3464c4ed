//! Central finite differences.

/// Step for coordinate `x`: `cbrt(eps) * max(1, |x|)`, rounded down to a power of two so
/// that `x + h` and `x - h` are exact for all but boundary-straddling `x`.
pub fn step(x: f64) -> f64 {
    let h = f64::EPSILON.cbrt() * x.abs().max(1.0);
    2f64.powi(h.log2().floor() as i32)
}

/// Central-difference gradient of `f` at `x`.
pub fn gradient<F>(f: F, x: &[f64]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step(x[i]);
            let xp = x[i] + h;
            let xm = x[i] - h;
            work[i] = xp;
            let fp = f(&work);
            work[i] = xm;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (xp - xm)
        })
        .collect()
}

/// Central-difference Jacobian of an analytic gradient, symmetrized.
pub fn hessian_from_gradient<G>(grad: G, x: &[f64]) -> Vec<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let d = x.len();
    let mut h = vec![vec![0.0; d]; d];
    let mut work = x.to_vec();
    for j in 0..d {
        let step_j = step(x[j]);
        let xp = x[j] + step_j;
        let xm = x[j] - step_j;
        work[j] = xp;
        let gp = grad(&work);
        work[j] = xm;
        let gm = grad(&work);
        work[j] = x[j];
        for i in 0..d {
            h[i][j] = (gp[i] - gm[i]) / (xp - xm);
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    h
}

/// Central-difference Hessian from function values only.
pub fn hessian<F>(f: F, x: &[f64]) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let d = x.len();
    let mut h = vec![vec![0.0; d]; d];
    let mut work = x.to_vec();
    // second differences want a larger step: eps^(1/4)
    let st: Vec<f64> = x
        .iter()
        .map(|&v| {
            let raw = f64::EPSILON.powf(0.25) * v.abs().max(1.0);
            2f64.powi(raw.log2().floor() as i32)
        })
        .collect();
    let f0 = f(x);
    for i in 0..d {
        work[i] = x[i] + st[i];
        let fp = f(&work);
        work[i] = x[i] - st[i];
        let fm = f(&work);
        work[i] = x[i];
        h[i][i] = (fp - 2.0 * f0 + fm) / (st[i] * st[i]);
        for j in (i + 1)..d {
            let mut eval = |si: f64, sj: f64| {
                work[i] = x[i] + si * st[i];
                work[j] = x[j] + sj * st[j];
                let v = f(&work);
                work[i] = x[i];
                work[j] = x[j];
                v
            };
            let fpp = eval(1.0, 1.0);
            let fpm = eval(1.0, -1.0);
            let fmp = eval(-1.0, 1.0);
            let fmm = eval(-1.0, -1.0);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * st[i] * st[j]);
            h[i][j] = v;
            h[j][i] = v;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_power_of_two() {
        for &x in &[0.0, 0.5, 2.11, -7.0, 1e6] {
            let h = step(x);
            assert_eq!(h, 2f64.powi(h.log2() as i32));
            assert!(h <= f64::EPSILON.cbrt() * x.abs().max(1.0));
            assert!(2.0 * h > f64::EPSILON.cbrt() * x.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_of_smooth_function() {
        let f = |x: &[f64]| x[0].sin() * x[1].exp() + x[0] * x[0];
        let x = [0.7, -0.3];
        let g = gradient(f, &x);
        let exact = [0.7f64.cos() * (-0.3f64).exp() + 1.4, 0.7f64.sin() * (-0.3f64).exp()];
        for i in 0..2 {
            assert!((g[i] - exact[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn hessians_agree_on_quadratic_plus_cubic() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1].powi(3);
        let g = |x: &[f64]| vec![6.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + 3.0 * x[1] * x[1]];
        let x = [0.4, 1.5];
        let h1 = hessian(f, &x);
        let h2 = hessian_from_gradient(g, &x);
        let exact = [[6.0, -2.0], [-2.0, 9.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h1[i][j] - exact[i][j]).abs() < 1e-5);
                assert!((h2[i][j] - exact[i][j]).abs() < 1e-8);
            }
        }
    }
}
