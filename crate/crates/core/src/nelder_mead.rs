//! Derivative-free Nelder-Mead simplex minimizer.
//!
//! The quantization costs minimized here are piecewise constant (they go
//! through floor and round), so no gradient information is available.

/// Simplex coefficients and stopping rule.
#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Stop once the mean simplex cost changes by at most this much between iterations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
}

struct Vertex {
    x: Vec<f64>,
    f: f64,
}

impl NelderMead {
    /// Minimize `cost` starting from `simplex` (n + 1 points in n dimensions).
    ///
    /// Non-finite costs act as a barrier. The returned cost never exceeds the
    /// best cost among the starting vertices.
    pub fn minimize<F>(&self, simplex: Vec<Vec<f64>>, mut cost: F) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        assert!(simplex.len() >= 2, "simplex needs at least two vertices");
        let dim = simplex[0].len();
        assert!(simplex.iter().all(|v| v.len() == dim));
        assert_eq!(simplex.len(), dim + 1, "simplex must have n + 1 vertices");

        let mut eval = |x: &[f64]| {
            let f = cost(x);
            if f.is_nan() {
                f64::INFINITY
            } else {
                f
            }
        };
        let mut verts: Vec<Vertex> = simplex
            .into_iter()
            .map(|x| {
                let f = eval(&x);
                Vertex { x, f }
            })
            .collect();

        let mut phi_old = f64::INFINITY;
        let mut iterations = 0;
        while iterations < self.max_iter {
            iterations += 1;
            verts.sort_by(|a, b| a.f.total_cmp(&b.f));
            let n = verts.len() - 1;
            let centroid: Vec<f64> = (0..dim)
                .map(|d| verts[..n].iter().map(|v| v.x[d]).sum::<f64>() / n as f64)
                .collect();
            let along = |from: &[f64], to: &[f64], t: f64| -> Vec<f64> {
                from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect()
            };

            let best = verts[0].f;
            let second_worst = verts[n - 1].f;
            let worst = verts[n].f;
            let xr = along(&centroid, &verts[n].x, -self.reflection);
            let fr = eval(&xr);

            let mut replacement = None;
            if fr < best {
                let xe = along(&centroid, &xr, self.expansion);
                let fe = eval(&xe);
                replacement = Some(if fe < fr {
                    Vertex { x: xe, f: fe }
                } else {
                    Vertex { x: xr, f: fr }
                });
            } else if fr < second_worst {
                replacement = Some(Vertex { x: xr, f: fr });
            } else if fr < worst {
                let xc = along(&centroid, &xr, self.contraction);
                let fc = eval(&xc);
                if fc <= fr {
                    replacement = Some(Vertex { x: xc, f: fc });
                }
            } else {
                let xc = along(&centroid, &verts[n].x, self.contraction);
                let fc = eval(&xc);
                if fc < worst {
                    replacement = Some(Vertex { x: xc, f: fc });
                }
            }

            match replacement {
                Some(v) => verts[n] = v,
                None => {
                    let xb = verts[0].x.clone();
                    for v in verts.iter_mut().skip(1) {
                        v.x = along(&xb, &v.x, self.shrink);
                        v.f = eval(&v.x);
                    }
                }
            }

            let phi = verts.iter().map(|v| v.f).sum::<f64>() / verts.len() as f64;
            if (phi - phi_old).abs() <= self.tol {
                break;
            }
            phi_old = phi;
        }

        let best = verts
            .into_iter()
            .min_by(|a, b| a.f.total_cmp(&b.f))
            .expect("non-empty simplex");
        Minimum {
            point: best.x,
            cost: best.f,
            iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum_in_one_dimension() {
        let nm = NelderMead {
            tol: 1e-14,
            max_iter: 500,
            ..Default::default()
        };
        let m = nm.minimize(vec![vec![0.0], vec![0.1]], |x| (x[0] - 3.0).powi(2));
        assert!((m.point[0] - 3.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn finds_rosenbrock_minimum_in_two_dimensions() {
        let nm = NelderMead {
            tol: 1e-16,
            max_iter: 5000,
            ..Default::default()
        };
        let m = nm.minimize(
            vec![vec![-1.2, 1.0], vec![-1.0, 1.0], vec![-1.2, 1.2]],
            |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
        );
        assert!(m.cost < 1e-8, "{m:?}");
    }

    #[test]
    fn barrier_keeps_search_feasible_and_never_worse_than_start() {
        let nm = NelderMead::default();
        let start = |x: f64| if x <= 1.0 { f64::INFINITY } else { x };
        let m = nm.minimize(vec![vec![2.0], vec![2.1]], |x| start(x[0]));
        assert!(m.point[0] > 1.0);
        assert!(m.cost <= 2.0);
    }

    #[test]
    fn flat_cost_stops_early() {
        let nm = NelderMead::default();
        let m = nm.minimize(vec![vec![1.0], vec![1.05]], |_| 0.25);
        assert_eq!(m.cost, 0.25);
        assert!(m.iterations <= 2, "{m:?}");
    }
}
