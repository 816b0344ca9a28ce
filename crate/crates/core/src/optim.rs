//! Derivative-free local search used by the simulation-error estimator.

/// Result of a [`nelder_mead`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub restarts: usize,
}

/// Nelder–Mead simplex search with standard coefficients (reflection 1,
/// expansion 2, contraction 1/2, shrink 1/2), restarted around the best point
/// when the simplex collapses. Never returns a point worse than `x0`.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    budget: usize,
) -> SimplexResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() { f64::INFINITY } else { v }
    };

    if budget == 0 || n == 0 {
        return SimplexResult {
            x: x0.to_vec(),
            value: if budget == 0 { f64::NAN } else { eval(x0, &mut evals) },
            evaluations: evals,
            restarts: 0,
        };
    }

    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut evals);
    let mut restarts = 0;
    let mut scale = 0.05;

    'outer: while evals < budget {
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![(best_x.clone(), best_f)];
        for i in 0..n {
            if evals >= budget {
                break 'outer;
            }
            let mut x = best_x.clone();
            x[i] += if x[i] != 0.0 { scale * x[i] } else { scale * 0.005 };
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }

        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            if simplex[0].1 < best_f {
                best_f = simplex[0].1;
                best_x = simplex[0].0.clone();
            }
            let spread = simplex[n].1 - simplex[0].1;
            let width = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0_f64, f64::max);
            let size = simplex[0].0.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
            if evals >= budget {
                break 'outer;
            }
            if (spread <= 1e-15 * (1.0 + best_f.abs()) && spread.is_finite()) || width <= 1e-13 * size {
                restarts += 1;
                scale *= 0.5;
                if scale < 1e-9 {
                    break 'outer;
                }
                continue 'outer;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64, worst: &[f64]| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(worst)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };
            let worst = simplex[n].0.clone();
            let xr = along(-1.0, &worst);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(-2.0, &worst);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let xc = along(-0.5, &worst);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = along(0.5, &worst);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        if evals >= budget {
                            break;
                        }
                        let xs: Vec<f64> = x0.iter().zip(&item.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
                        let fs = eval(&xs, &mut evals);
                        *item = (xs, fs);
                    }
                }
            }
        }
    }

    SimplexResult {
        x: best_x,
        value: best_f,
        evaluations: evals,
        restarts,
    }
}
