//! Forward solvers: elliptic problems on Dirichlet grids and explicit
//! reaction–diffusion stepping on periodic grids.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{apply_plane, flux_plane, flux_plane_diagonal, Boundary, Field, GridSpec, Stencil};
use crate::residuals::PdeSystem;

/// Relative residual every elliptic solve must reach.
pub const ELLIPTIC_TOLERANCE: f64 = 1e-10;

/// Largest system handed to the dense direct solver.
const DIRECT_MAX_CELLS: usize = 4096;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradient for an SPD operator.
fn pcg(apply: impl Fn(&[f64], &mut [f64]), diag: &[f64], rhs: &[f64], cap: usize) -> Result<Vec<f64>> {
    let n = rhs.len();
    let rhs_norm = norm(rhs);
    let mut x = vec![0.0; n];
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let target = 1e-12 * rhs_norm;
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    while norm(&r) > target && iterations < cap {
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..n {
            z[k] = r[k] / diag[k];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
        iterations += 1;
    }
    // judge on the true residual, not the recurrence
    apply(&x, &mut ap);
    let residual = norm(&ap.iter().zip(rhs).map(|(a, b)| a - b).collect::<Vec<_>>()) / rhs_norm;
    if !(residual <= ELLIPTIC_TOLERANCE) {
        return Err(Error::NotConverged { iterations, residual });
    }
    Ok(x)
}

/// Smallest `|λ + k²|` over the Dirichlet Laplacian spectrum, relative to its
/// largest magnitude.
fn helmholtz_gap(spec: &GridSpec, k2: f64) -> f64 {
    let h2 = spec.spacing * spec.spacing;
    let s = |p: usize, n: usize| {
        let t = (p as f64 * std::f64::consts::PI / (2.0 * (n as f64 + 1.0))).sin();
        t * t
    };
    let mut gap = f64::INFINITY;
    for p in 1..=spec.height {
        for q in 1..=spec.width {
            let lambda = -4.0 / h2 * (s(p, spec.height) + s(q, spec.width));
            gap = gap.min((lambda + k2).abs());
        }
    }
    gap / (8.0 / h2 + k2.abs())
}

/// Solves for `u` given the coefficient (Darcy permeability, or the
/// Poisson/Helmholtz forcing) on a Dirichlet grid.
pub fn solve_elliptic(system: &PdeSystem, a: &Field) -> Result<Field> {
    let spec = a.spec().with_channels(1);
    if a.spec().channels != 1 {
        return Err(Error::Shape("coefficient must be a single channel".into()));
    }
    if spec.boundary != Boundary::DirichletZero {
        return Err(Error::Boundary("elliptic solves need dirichlet_zero".into()));
    }
    let n = spec.cells();
    let cap = 10 * n;
    let coef = a.values();
    let u = match *system {
        PdeSystem::Poisson => {
            // −∇²u = −a
            let rhs: Vec<f64> = coef.iter().map(|v| -v).collect();
            let diag = vec![4.0 / (spec.spacing * spec.spacing); n];
            pcg(
                |x, out| {
                    apply_plane(Stencil::Laplacian, &spec, x, out);
                    out.iter_mut().for_each(|v| *v = -*v);
                },
                &diag,
                &rhs,
                cap,
            )?
        }
        PdeSystem::Darcy { source } => {
            if let Some(pos) = coef.iter().position(|&v| !(v > 0.0)) {
                return Err(Error::NonPositiveCoefficient(format!("permeability {} at cell {pos}", coef[pos])));
            }
            let mut diag = vec![0.0; n];
            flux_plane_diagonal(&spec, coef, &mut diag);
            pcg(
                |x, out| {
                    flux_plane(&spec, coef, x, out);
                    out.iter_mut().for_each(|v| *v = -*v);
                },
                &diag,
                &vec![source; n],
                cap,
            )?
        }
        PdeSystem::Helmholtz { k_wave } => solve_helmholtz(&spec, k_wave * k_wave, coef)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{} is not an elliptic system",
                system.kind().name()
            )))
        }
    };
    Field::new(spec, u)
}

fn solve_helmholtz(spec: &GridSpec, k2: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    if helmholtz_gap(spec, k2) < 1e-10 {
        return Err(Error::Singular(format!("k² = {k2} hits a Dirichlet Laplacian eigenvalue")));
    }
    let n = spec.cells();
    if n > DIRECT_MAX_CELLS {
        return Err(Error::InvalidArgument(format!("direct Helmholtz solve limited to {DIRECT_MAX_CELLS} cells")));
    }
    let mut matrix = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        apply_plane(Stencil::Laplacian, spec, &e, &mut col);
        e[j] = 0.0;
        col[j] += k2;
        for (i, &v) in col.iter().enumerate() {
            if v != 0.0 {
                matrix[(i, j)] = v;
            }
        }
    }
    let b = DVector::from_column_slice(rhs);
    let u = matrix
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("Helmholtz matrix is singular".into()))?;
    let rhs_norm = b.norm();
    if rhs_norm > 0.0 {
        let residual = (&matrix * &u - &b).norm() / rhs_norm;
        if !(residual <= ELLIPTIC_TOLERANCE) {
            return Err(Error::Singular(format!("direct solve residual {residual:e}")));
        }
    }
    Ok(u.as_slice().to_vec())
}

/// Largest stable explicit time step `h²/(4·max D)`.
pub fn max_stable_dt(spacing: f64, max_diffusivity: f64) -> f64 {
    if max_diffusivity <= 0.0 {
        f64::INFINITY
    } else {
        spacing * spacing / (4.0 * max_diffusivity)
    }
}

/// Explicit-Euler integration of a reaction–diffusion system.
///
/// `species` holds one channel per species and `diffusivity` the matching
/// per-pixel coefficients. Returns `records` evenly spaced snapshots of the
/// species channels, the first being the initial state and the last the state
/// after `steps` steps. `records` must divide `steps` into whole intervals.
pub fn simulate_rd(
    system: &PdeSystem,
    species: &Field,
    diffusivity: &Field,
    dt: f64,
    steps: usize,
    records: usize,
) -> Result<Vec<Field>> {
    system.validate()?;
    let spec = *species.spec();
    let count = match system {
        PdeSystem::GrayScott2 { .. } => 2,
        PdeSystem::Competitive3 { .. } => 3,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{} is not a reaction-diffusion system",
                system.kind().name()
            )))
        }
    };
    if spec.channels != count || diffusivity.spec() != &spec {
        return Err(Error::Shape(format!("expected {count} species and matching diffusivities")));
    }
    system.check_boundary(spec.boundary)?;
    if records < 2 || steps == 0 || !steps.is_multiple_of(records - 1) {
        return Err(Error::InvalidArgument(format!(
            "{records} records cannot evenly sample {steps} steps"
        )));
    }
    if let Some(&d) = diffusivity.values().iter().find(|&&d| d < 0.0) {
        return Err(Error::NonPositiveCoefficient(format!("diffusivity {d}")));
    }
    let dmax = diffusivity.values().iter().fold(0.0f64, |m, &d| m.max(d));
    let limit = max_stable_dt(spec.spacing, dmax);
    if !(dt > 0.0 && dt <= limit) {
        return Err(Error::Unstable(format!("dt = {dt} exceeds h²/(4·max D) = {limit}")));
    }

    let n = spec.cells();
    let plane = spec.with_channels(1);
    let every = steps / (records - 1);
    let mut state = species.values().to_vec();
    let mut rate = vec![0.0; state.len()];
    let mut flux = vec![0.0; n];
    let mut out = vec![species.clone()];
    for step in 1..=steps {
        for s in 0..count {
            let x = &state[s * n..(s + 1) * n];
            let d = &diffusivity.values()[s * n..(s + 1) * n];
            let r = &mut rate[s * n..(s + 1) * n];
            match system {
                PdeSystem::GrayScott2 { .. } => {
                    apply_plane(Stencil::Laplacian, &plane, x, &mut flux);
                    for k in 0..n {
                        r[k] = d[k] * flux[k];
                    }
                }
                _ => {
                    flux_plane(&plane, d, x, &mut flux);
                    r.copy_from_slice(&flux);
                }
            }
        }
        match *system {
            PdeSystem::GrayScott2 { feed, removal, .. } => {
                let (u, v) = state.split_at(n);
                let (ru, rv) = rate.split_at_mut(n);
                for k in 0..n {
                    let uvv = u[k] * v[k] * v[k];
                    ru[k] += -uvv + feed * (1.0 - u[k]);
                    rv[k] += uvv - (feed + removal) * v[k];
                }
            }
            PdeSystem::Competitive3 { coupling, .. } => {
                for k in 0..n {
                    let x = [state[k], state[n + k], state[2 * n + k]];
                    for s in 0..3 {
                        let crowd: f64 = (0..3).map(|j| coupling[s][j] * x[j]).sum();
                        rate[s * n + k] += x[s] * (1.0 - x[s] - crowd);
                    }
                }
            }
            _ => unreachable!(),
        }
        for (x, r) in state.iter_mut().zip(&rate) {
            *x += dt * r;
        }
        if let Some(pos) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state entry {pos} after step {step}")));
        }
        if step % every == 0 {
            out.push(Field::new(spec, state.clone())?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::laplacian;
    use crate::residuals::{residual, PdeKind, StateLayout};

    fn dirichlet(n: usize, h: f64) -> GridSpec {
        GridSpec::new(n, n, 1, h, Boundary::DirichletZero).unwrap()
    }

    fn smooth(spec: GridSpec) -> Field {
        Field::from_fn(spec, |_, i, j| {
            (0.7 * i as f64).sin() * (0.4 * j as f64 + 0.3).cos() + 0.2 * (0.3 * (i + j) as f64).sin()
        })
        .unwrap()
    }

    fn rel(a: &Field, b: &Field) -> f64 {
        let num: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.values().iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let a = Field::zeros(dirichlet(8, 0.1));
        let u = solve_elliptic(&PdeSystem::Poisson, &a).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_recovers_manufactured_solution() {
        let spec = dirichlet(16, 1.0 / 16.0);
        let truth = smooth(spec);
        let a = laplacian(&truth, 0).unwrap();
        let u = solve_elliptic(&PdeSystem::Poisson, &a).unwrap();
        assert!(rel(&u, &truth) < 1e-8);
    }

    #[test]
    fn helmholtz_recovers_manufactured_solution() {
        let spec = dirichlet(12, 0.1);
        let truth = smooth(spec);
        let k_wave = 7.3;
        let lap = laplacian(&truth, 0).unwrap();
        let a = Field::new(
            spec,
            lap.values().iter().zip(truth.values()).map(|(l, u)| l + k_wave * k_wave * u).collect(),
        )
        .unwrap();
        let u = solve_elliptic(&PdeSystem::Helmholtz { k_wave }, &a).unwrap();
        assert!(rel(&u, &truth) < 1e-8);
    }

    #[test]
    fn helmholtz_at_an_eigenvalue_is_rejected() {
        let spec = dirichlet(5, 1.0);
        let s = |p: f64| (p * std::f64::consts::PI / 12.0).sin().powi(2);
        let k2 = 4.0 * (s(1.0) + s(2.0));
        let a = Field::constant(spec, 1.0);
        let err = solve_elliptic(&PdeSystem::Helmholtz { k_wave: k2.sqrt() }, &a).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn darcy_unit_permeability_matches_poisson() {
        let spec = dirichlet(10, 0.1);
        let ud = solve_elliptic(&PdeSystem::darcy(), &Field::constant(spec, 1.0)).unwrap();
        let up = solve_elliptic(&PdeSystem::Poisson, &Field::constant(spec, -1.0)).unwrap();
        assert!(rel(&ud, &up) < 1e-10);
    }

    #[test]
    fn darcy_solution_has_small_residual_and_rejects_nonpositive() {
        let spec = dirichlet(12, 1.0 / 12.0);
        let a = Field::from_fn(spec, |_, i, j| if (i / 3 + j / 4) % 2 == 0 { 3.0 } else { 12.0 }).unwrap();
        let u = solve_elliptic(&PdeSystem::darcy(), &a).unwrap();
        let x = Field::stack(&[&a, &u]).unwrap();
        let r = residual(&PdeSystem::darcy(), &StateLayout::canonical(PdeKind::Darcy), &x).unwrap();
        let rn = r.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn <= 1e-10 * (spec.cells() as f64).sqrt());
        let bad = Field::constant(spec, 0.0);
        assert!(matches!(solve_elliptic(&PdeSystem::darcy(), &bad), Err(Error::NonPositiveCoefficient(_))));
    }

    fn periodic(n: usize, c: usize, h: f64) -> GridSpec {
        GridSpec::new(n, n, c, h, Boundary::Periodic).unwrap()
    }

    #[test]
    fn gray_scott_fixed_point_is_stationary() {
        let spec = periodic(8, 2, 0.1);
        let init = Field::from_fn(spec, |c, _, _| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let d = Field::constant(spec, 0.01);
        let traj = simulate_rd(&PdeSystem::gray_scott(), &init, &d, 0.1, 20, 11).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.iter().all(|f| f == &init));
    }

    #[test]
    fn inert_system_leaves_state_unchanged() {
        let spec = periodic(6, 2, 0.2);
        let init = Field::from_fn(spec, |c, i, j| if c == 0 { 0.3 + 0.1 * (i * j) as f64 } else { 0.0 }).unwrap();
        let sys = PdeSystem::GrayScott2 { feed: 0.0, removal: 0.0, horizon: 1.0 };
        let traj = simulate_rd(&sys, &init, &Field::zeros(spec), 0.01, 50, 2).unwrap();
        assert_eq!(traj[1], init);
    }

    #[test]
    fn lone_species_follows_logistic_growth() {
        let spec = periodic(8, 3, 0.1);
        let u0 = 0.1;
        let init = Field::from_fn(spec, |c, _, _| if c == 0 { u0 } else { 0.0 }).unwrap();
        let d = Field::constant(spec, 0.01);
        let sys = PdeSystem::competitive([[0.0, 1.5, 0.5], [0.5, 0.0, 1.5], [1.5, 0.5, 0.0]], 1.0).unwrap();
        let t = 2.0;
        let dt = 1e-3;
        let steps = (t / dt) as usize;
        let traj = simulate_rd(&sys, &init, &d, dt, steps, 2).unwrap();
        let mean = traj[1].channel(0).unwrap().iter().sum::<f64>() / spec.cells() as f64;
        let exact = 1.0 / (1.0 + (1.0 / u0 - 1.0) * (-t).exp());
        assert!((mean - exact).abs() < 1e-3, "{mean} vs {exact}");
    }

    #[test]
    fn unstable_step_is_rejected() {
        let spec = periodic(6, 2, 0.1);
        let init = Field::constant(spec, 0.5);
        let d = Field::constant(spec, 1.0);
        let err = simulate_rd(&PdeSystem::gray_scott(), &init, &d, 0.01, 10, 2).unwrap_err();
        assert!(matches!(err, Error::Unstable(_)));
    }
}
