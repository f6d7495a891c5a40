//! Derivative-free simplex minimization for the hyperparameter updates.

use crate::priors::Domain;

/// Default evaluation budget of one inner optimization.
pub const INNER_MAX_EVALS: usize = 200;

/// Result of a minimization; `x` is the best point seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder–Mead with standard coefficients (reflection 1, expansion 2,
/// contraction 1/2, shrink 1/2). Non-finite objective values count as `+∞`.
/// Returns the best point evaluated; on ties the first one found wins.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> Minimum {
    let n = x0.len();
    let mut evals = 0usize;
    let mut best_x = x0.to_vec();
    let mut best_f = f64::INFINITY;
    let mut eval = |x: &[f64], evals: &mut usize, best_x: &mut Vec<f64>, best_f: &mut f64| {
        *evals += 1;
        let v = f(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < *best_f || *evals == 1 {
            *best_f = v;
            *best_x = x.to_vec();
        }
        v
    };
    let f0 = eval(x0, &mut evals, &mut best_x, &mut best_f);
    if n == 0 || max_evals <= 1 {
        return Minimum {
            x: best_x,
            f: best_f,
            evals,
            converged: n == 0,
        };
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        if evals >= max_evals {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = eval(&x, &mut evals, &mut best_x, &mut best_f);
        simplex.push((x, fx));
    }
    if simplex.len() < n + 1 {
        return Minimum {
            x: best_x,
            f: best_f,
            evals,
            converged: false,
        };
    }
    let mut converged = false;
    while evals < max_evals {
        // stable sort keeps earlier vertices first among equals
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let flo = simplex[0].1;
        let fhi = simplex[n].1;
        let spread = simplex
            .iter()
            .skip(1)
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (fhi - flo).abs() <= ftol * (flo.abs() + ftol) && spread <= 1e-8 {
            converged = true;
            break;
        }
        if flo.is_finite() && (fhi - flo).abs() <= 1e-14 * (flo.abs() + 1e-300) && spread <= 1e-6 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, h)| c + t * (c - h))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals, &mut best_x, &mut best_f);
        if fr < simplex[0].1 {
            if evals >= max_evals {
                simplex[n] = (xr, fr);
                break;
            }
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals, &mut best_x, &mut best_f);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        if evals >= max_evals {
            break;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals, &mut best_x, &mut best_f);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals, &mut best_x, &mut best_f);
            (xc, fc)
        };
        if fc < fr.min(simplex[n].1) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let x_best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            if evals >= max_evals {
                break;
            }
            let xs: Vec<f64> = x_best
                .iter()
                .zip(&v.0)
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            let fs = eval(&xs, &mut evals, &mut best_x, &mut best_f);
            *v = (xs, fs);
        }
    }
    Minimum {
        x: best_x,
        f: best_f,
        evals,
        converged,
    }
}

/// Minimizes `objective` over the entries of `start` marked free, in the
/// unconstrained coordinates of `domains`. Fixed entries keep their values.
pub fn inner_optimize<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    start: &[f64],
    domains: &[Domain],
    free: &[bool],
    max_evals: usize,
) -> Minimum {
    let idx: Vec<usize> = (0..start.len()).filter(|&i| free[i]).collect();
    let z0: Vec<f64> = idx.iter().map(|&i| domains[i].to_free(start[i])).collect();
    let expand = |z: &[f64]| -> Vec<f64> {
        let mut x = start.to_vec();
        for (k, &i) in idx.iter().enumerate() {
            x[i] = domains[i].from_free(z[k]);
        }
        x
    };
    if z0.iter().any(|z| !z.is_finite()) {
        let f = objective(start);
        return Minimum {
            x: start.to_vec(),
            f,
            evals: 1,
            converged: false,
        };
    }
    let m = nelder_mead(|z| objective(&expand(z)), &z0, 0.5, max_evals, 1e-10);
    Minimum {
        x: expand(&m.x),
        f: m.f,
        evals: m.evals,
        converged: m.converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let m = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2),
            &[0.0, 0.0],
            0.5,
            2000,
            1e-14,
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] + 2.0).abs() < 1e-5);
    }

    #[test]
    fn respects_budget_and_never_worsens_the_start() {
        let mut count = 0;
        let m = nelder_mead(
            |x| {
                count += 1;
                (x[0] - 3.0).powi(2)
            },
            &[0.0],
            0.5,
            7,
            1e-12,
        );
        assert!(m.evals <= 7);
        assert_eq!(count, m.evals);
        assert!(m.f <= 9.0);
    }

    #[test]
    fn nan_is_treated_as_infinite() {
        let m = nelder_mead(
            |x| if x[0] > 0.2 { f64::NAN } else { (x[0] + 1.0).powi(2) },
            &[0.0],
            0.5,
            200,
            1e-12,
        );
        assert!((m.x[0] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn ties_keep_first_point() {
        let m = nelder_mead(|_| 1.0, &[0.3, 0.4], 0.5, 50, 1e-12);
        assert_eq!(m.x, vec![0.3, 0.4]);
    }

    #[test]
    fn pinned_entries_stay_fixed() {
        let m = inner_optimize(
            |x| (x[0] - 2.0).powi(2) + (x[1] - 0.3).powi(2),
            &[1.0, 0.6],
            &[Domain::Positive, Domain::UnitInterval],
            &[true, false],
            200,
        );
        assert_eq!(m.x[1], 0.6);
        assert!((m.x[0] - 2.0).abs() < 1e-4);
    }
}
