//! Pointwise PDE residuals and exact gradients of their mean square.
//!
//! States are concatenations of coefficient and solution channels; a
//! [`StateLayout`] says which channel plays which role. Time-dependent
//! systems only see their initial and terminal snapshots, so `∂τ` is the
//! forward difference `(x_T − x_0)/T` and diffusion and reaction terms are
//! evaluated at the terminal state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    apply_plane, apply_plane_adjoint, flux_plane, flux_plane_adjoint_coef, flux_plane_adjoint_u, Boundary, Field,
    GridSpec, Stencil,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Darcy,
    Poisson,
    Helmholtz,
    DivergenceFree,
    GrayScott2,
    Competitive3,
}

impl PdeKind {
    pub fn name(self) -> &'static str {
        match self {
            PdeKind::Darcy => "darcy",
            PdeKind::Poisson => "poisson",
            PdeKind::Helmholtz => "helmholtz",
            PdeKind::DivergenceFree => "divergence_free",
            PdeKind::GrayScott2 => "gray_scott_2",
            PdeKind::Competitive3 => "competitive_3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PdeSystem {
    /// `−∇·(a∇u) = s` with constant source `s`.
    Darcy { source: f64 },
    /// `∇²u = a`.
    Poisson,
    /// `∇²u + k²u = a`.
    Helmholtz { k_wave: f64 },
    /// `∇·v = 0` at both stored snapshots.
    DivergenceFree,
    /// Gray–Scott kinetics with feed `F` and removal `r`.
    GrayScott2 { feed: f64, removal: f64, horizon: f64 },
    /// Three competing species with coupling matrix `A` (zero diagonal).
    Competitive3 { coupling: [[f64; 3]; 3], horizon: f64 },
}

impl PdeSystem {
    pub fn darcy() -> Self {
        PdeSystem::Darcy { source: 1.0 }
    }

    pub fn gray_scott() -> Self {
        PdeSystem::GrayScott2 { feed: 0.035, removal: 0.060, horizon: 1.0 }
    }

    pub fn competitive(coupling: [[f64; 3]; 3], horizon: f64) -> Result<Self> {
        let sys = PdeSystem::Competitive3 { coupling, horizon };
        sys.validate()?;
        Ok(sys)
    }

    pub fn kind(&self) -> PdeKind {
        match self {
            PdeSystem::Darcy { .. } => PdeKind::Darcy,
            PdeSystem::Poisson => PdeKind::Poisson,
            PdeSystem::Helmholtz { .. } => PdeKind::Helmholtz,
            PdeSystem::DivergenceFree => PdeKind::DivergenceFree,
            PdeSystem::GrayScott2 { .. } => PdeKind::GrayScott2,
            PdeSystem::Competitive3 { .. } => PdeKind::Competitive3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be finite")))
            }
        };
        match *self {
            PdeSystem::Darcy { source } => finite(source, "darcy source"),
            PdeSystem::Poisson | PdeSystem::DivergenceFree => Ok(()),
            PdeSystem::Helmholtz { k_wave } => finite(k_wave, "wavenumber"),
            PdeSystem::GrayScott2 { feed, removal, horizon } => {
                finite(feed, "feed")?;
                finite(removal, "removal")?;
                positive_horizon(horizon)
            }
            PdeSystem::Competitive3 { coupling, horizon } => {
                for (i, row) in coupling.iter().enumerate() {
                    if row[i] != 0.0 {
                        return Err(Error::InvalidArgument(format!("coupling diagonal a{0}{0} must be zero", i + 1)));
                    }
                    for &v in row {
                        finite(v, "coupling")?;
                    }
                }
                positive_horizon(horizon)
            }
        }
    }

    /// Number of species for reaction–diffusion kinds, velocity components
    /// for the divergence constraint.
    pub fn components(&self) -> usize {
        match self.kind() {
            PdeKind::Darcy | PdeKind::Poisson | PdeKind::Helmholtz => 1,
            PdeKind::DivergenceFree | PdeKind::GrayScott2 => 2,
            PdeKind::Competitive3 => 3,
        }
    }

    /// Residual channels produced by [`residual`].
    pub fn residual_channels(&self) -> usize {
        self.components()
    }

    pub fn check_boundary(&self, boundary: Boundary) -> Result<()> {
        let required = match self.kind() {
            PdeKind::Darcy | PdeKind::Poisson | PdeKind::Helmholtz => Some(Boundary::DirichletZero),
            PdeKind::GrayScott2 | PdeKind::Competitive3 => Some(Boundary::Periodic),
            PdeKind::DivergenceFree => None,
        };
        match required {
            Some(b) if b != boundary => Err(Error::Boundary(format!(
                "{} requires {b:?}, field has {boundary:?}",
                self.kind().name()
            ))),
            _ => Ok(()),
        }
    }
}

fn positive_horizon(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("horizon must be positive, got {t}")))
    }
}

/// What a state channel holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Permeability (Darcy) or forcing (Poisson/Helmholtz).
    Coefficient,
    /// Elliptic solution `u`.
    Solution,
    /// Species (or velocity component) at `τ = 0`.
    Initial(usize),
    /// Per-pixel diffusivity of a species.
    Diffusivity(usize),
    /// Species (or velocity component) at `τ = T`.
    Terminal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// The `a` half of the state.
    Coefficient,
    /// The `u` half of the state.
    Solution,
}

impl Role {
    pub fn group(self) -> Group {
        match self {
            Role::Coefficient | Role::Initial(_) | Role::Diffusivity(_) => Group::Coefficient,
            Role::Solution | Role::Terminal(_) => Group::Solution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    roles: Vec<Role>,
}

impl StateLayout {
    /// Coefficient channels first, then solution channels.
    pub fn canonical(kind: PdeKind) -> Self {
        Self { roles: required_roles(kind) }
    }

    pub fn new(kind: PdeKind, roles: Vec<Role>) -> Result<Self> {
        let layout = Self { roles };
        layout.check(kind)?;
        Ok(layout)
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn channels(&self) -> usize {
        self.roles.len()
    }

    pub fn channel_of(&self, role: Role) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    pub fn group_channels(&self, group: Group) -> Vec<usize> {
        (0..self.roles.len()).filter(|&c| self.roles[c].group() == group).collect()
    }

    pub fn check(&self, kind: PdeKind) -> Result<()> {
        let mut want = required_roles(kind);
        let mut have = self.roles.clone();
        let key = |r: &Role| format!("{r:?}");
        want.sort_by_key(key);
        have.sort_by_key(key);
        if want != have {
            return Err(Error::Layout(format!(
                "{} expects roles {:?}, layout has {:?}",
                kind.name(),
                required_roles(kind),
                self.roles
            )));
        }
        Ok(())
    }

    fn ch(&self, role: Role) -> usize {
        self.channel_of(role).expect("layout checked against kind")
    }
}

fn required_roles(kind: PdeKind) -> Vec<Role> {
    match kind {
        PdeKind::Darcy | PdeKind::Poisson | PdeKind::Helmholtz => vec![Role::Coefficient, Role::Solution],
        PdeKind::DivergenceFree => vec![Role::Initial(0), Role::Initial(1), Role::Terminal(0), Role::Terminal(1)],
        PdeKind::GrayScott2 | PdeKind::Competitive3 => {
            let n = if kind == PdeKind::GrayScott2 { 2 } else { 3 };
            let mut roles: Vec<Role> = (0..n).map(Role::Initial).collect();
            roles.extend((0..n).map(Role::Diffusivity));
            roles.extend((0..n).map(Role::Terminal));
            roles
        }
    }
}

fn check_inputs(system: &PdeSystem, layout: &StateLayout, spec: &GridSpec) -> Result<()> {
    system.validate()?;
    layout.check(system.kind())?;
    if spec.channels != layout.channels() {
        return Err(Error::Layout(format!(
            "state has {} channels, layout names {}",
            spec.channels,
            layout.channels()
        )));
    }
    system.check_boundary(spec.boundary)
}

struct Planes<'a> {
    x: &'a [f64],
    n: usize,
}

impl<'a> Planes<'a> {
    fn get(&self, c: usize) -> &'a [f64] {
        &self.x[c * self.n..(c + 1) * self.n]
    }
}

/// Residual entries for a flat state, `residual_channels · cells` long.
pub fn residual_values(system: &PdeSystem, layout: &StateLayout, spec: &GridSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_inputs(system, layout, spec)?;
    if x.len() != spec.len() {
        return Err(Error::Shape(format!("state length {} != {}", x.len(), spec.len())));
    }
    let n = spec.cells();
    let plane_spec = spec.with_channels(1);
    let p = Planes { x, n };
    let mut out = vec![0.0; n * system.residual_channels()];
    match *system {
        PdeSystem::Darcy { source } => {
            let (a, u) = (p.get(layout.ch(Role::Coefficient)), p.get(layout.ch(Role::Solution)));
            flux_plane(&plane_spec, a, u, &mut out);
            out.iter_mut().for_each(|v| *v = -*v - source);
        }
        PdeSystem::Poisson => helmholtz_residual(&plane_spec, layout, &p, 0.0, &mut out),
        PdeSystem::Helmholtz { k_wave } => helmholtz_residual(&plane_spec, layout, &p, k_wave * k_wave, &mut out),
        PdeSystem::DivergenceFree => {
            let mut tmp = vec![0.0; n];
            for (slot, snap) in [Role::Initial as fn(usize) -> Role, Role::Terminal].into_iter().enumerate() {
                let dst = &mut out[slot * n..(slot + 1) * n];
                apply_plane(Stencil::GradX, &plane_spec, p.get(layout.ch(snap(0))), dst);
                apply_plane(Stencil::GradY, &plane_spec, p.get(layout.ch(snap(1))), &mut tmp);
                dst.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t);
            }
        }
        PdeSystem::GrayScott2 { feed, removal, horizon } => {
            let (u0, v0) = (p.get(layout.ch(Role::Initial(0))), p.get(layout.ch(Role::Initial(1))));
            let (du, dv) = (p.get(layout.ch(Role::Diffusivity(0))), p.get(layout.ch(Role::Diffusivity(1))));
            let (ut, vt) = (p.get(layout.ch(Role::Terminal(0))), p.get(layout.ch(Role::Terminal(1))));
            let mut lu = vec![0.0; n];
            let mut lv = vec![0.0; n];
            apply_plane(Stencil::Laplacian, &plane_spec, ut, &mut lu);
            apply_plane(Stencil::Laplacian, &plane_spec, vt, &mut lv);
            let (fu, fv) = out.split_at_mut(n);
            for k in 0..n {
                let uvv = ut[k] * vt[k] * vt[k];
                fu[k] = (ut[k] - u0[k]) / horizon - du[k] * lu[k] + uvv - feed * (1.0 - ut[k]);
                fv[k] = (vt[k] - v0[k]) / horizon - dv[k] * lv[k] - uvv + (feed + removal) * vt[k];
            }
        }
        PdeSystem::Competitive3 { coupling, horizon } => {
            let init: Vec<&[f64]> = (0..3).map(|s| p.get(layout.ch(Role::Initial(s)))).collect();
            let diff: Vec<&[f64]> = (0..3).map(|s| p.get(layout.ch(Role::Diffusivity(s)))).collect();
            let term: Vec<&[f64]> = (0..3).map(|s| p.get(layout.ch(Role::Terminal(s)))).collect();
            let mut flux = vec![0.0; n];
            for s in 0..3 {
                flux_plane(&plane_spec, diff[s], term[s], &mut flux);
                let dst = &mut out[s * n..(s + 1) * n];
                for k in 0..n {
                    let crowd: f64 = (0..3).map(|j| coupling[s][j] * term[j][k]).sum();
                    let reaction = term[s][k] * (1.0 - term[s][k] - crowd);
                    dst[k] = (term[s][k] - init[s][k]) / horizon - flux[k] - reaction;
                }
            }
        }
    }
    Ok(out)
}

fn helmholtz_residual(plane: &GridSpec, layout: &StateLayout, p: &Planes, k2: f64, out: &mut [f64]) {
    let (a, u) = (p.get(layout.ch(Role::Coefficient)), p.get(layout.ch(Role::Solution)));
    apply_plane(Stencil::Laplacian, plane, u, out);
    for k in 0..out.len() {
        out[k] = out[k] + k2 * u[k] - a[k];
    }
}

/// `J(x)ᵀ g` where `J` is the Jacobian of [`residual_values`] at `x`.
pub fn residual_vjp(
    system: &PdeSystem,
    layout: &StateLayout,
    spec: &GridSpec,
    x: &[f64],
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(system, layout, spec)?;
    let n = spec.cells();
    if x.len() != spec.len() || cotangent.len() != n * system.residual_channels() {
        return Err(Error::Shape("state or cotangent length mismatch".into()));
    }
    let plane_spec = spec.with_channels(1);
    let p = Planes { x, n };
    let g = Planes { x: cotangent, n };
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; n];
    let put = |out: &mut Vec<f64>, c: usize, vals: &[f64]| {
        out[c * n..(c + 1) * n].iter_mut().zip(vals).for_each(|(o, v)| *o += v);
    };
    match *system {
        PdeSystem::Darcy { .. } => {
            let (ca, cu) = (layout.ch(Role::Coefficient), layout.ch(Role::Solution));
            let g0 = g.get(0);
            flux_plane_adjoint_coef(&plane_spec, p.get(cu), g0, &mut tmp);
            tmp.iter_mut().for_each(|v| *v = -*v);
            put(&mut out, ca, &tmp);
            flux_plane_adjoint_u(&plane_spec, p.get(ca), g0, &mut tmp);
            tmp.iter_mut().for_each(|v| *v = -*v);
            put(&mut out, cu, &tmp);
        }
        PdeSystem::Poisson | PdeSystem::Helmholtz { .. } => {
            let k2 = match *system {
                PdeSystem::Helmholtz { k_wave } => k_wave * k_wave,
                _ => 0.0,
            };
            let g0 = g.get(0);
            apply_plane_adjoint(Stencil::Laplacian, &plane_spec, g0, &mut tmp);
            tmp.iter_mut().zip(g0).for_each(|(t, gv)| *t += k2 * gv);
            put(&mut out, layout.ch(Role::Solution), &tmp);
            let neg: Vec<f64> = g0.iter().map(|v| -v).collect();
            put(&mut out, layout.ch(Role::Coefficient), &neg);
        }
        PdeSystem::DivergenceFree => {
            for (slot, snap) in [Role::Initial as fn(usize) -> Role, Role::Terminal].into_iter().enumerate() {
                let gs = g.get(slot);
                apply_plane_adjoint(Stencil::GradX, &plane_spec, gs, &mut tmp);
                put(&mut out, layout.ch(snap(0)), &tmp);
                apply_plane_adjoint(Stencil::GradY, &plane_spec, gs, &mut tmp);
                put(&mut out, layout.ch(snap(1)), &tmp);
            }
        }
        PdeSystem::GrayScott2 { feed, removal, horizon } => {
            let (cu0, cv0) = (layout.ch(Role::Initial(0)), layout.ch(Role::Initial(1)));
            let (cdu, cdv) = (layout.ch(Role::Diffusivity(0)), layout.ch(Role::Diffusivity(1)));
            let (cut, cvt) = (layout.ch(Role::Terminal(0)), layout.ch(Role::Terminal(1)));
            let (du, dv, ut, vt) = (p.get(cdu), p.get(cdv), p.get(cut), p.get(cvt));
            let (gu, gv) = (g.get(0), g.get(1));
            let mut lap = vec![0.0; n];
            let mut buf = vec![0.0; n];

            put(&mut out, cu0, &gu.iter().map(|v| -v / horizon).collect::<Vec<_>>());
            put(&mut out, cv0, &gv.iter().map(|v| -v / horizon).collect::<Vec<_>>());

            apply_plane(Stencil::Laplacian, &plane_spec, ut, &mut lap);
            put(&mut out, cdu, &lap.iter().zip(gu).map(|(l, g)| -l * g).collect::<Vec<_>>());
            apply_plane(Stencil::Laplacian, &plane_spec, vt, &mut lap);
            put(&mut out, cdv, &lap.iter().zip(gv).map(|(l, g)| -l * g).collect::<Vec<_>>());

            // terminal u
            for k in 0..n {
                buf[k] = du[k] * gu[k];
            }
            apply_plane_adjoint(Stencil::Laplacian, &plane_spec, &buf, &mut tmp);
            for k in 0..n {
                let v2 = vt[k] * vt[k];
                tmp[k] = gu[k] / horizon - tmp[k] + (v2 + feed) * gu[k] - v2 * gv[k];
            }
            put(&mut out, cut, &tmp);

            // terminal v
            for k in 0..n {
                buf[k] = dv[k] * gv[k];
            }
            apply_plane_adjoint(Stencil::Laplacian, &plane_spec, &buf, &mut tmp);
            for k in 0..n {
                let two_uv = 2.0 * ut[k] * vt[k];
                tmp[k] = gv[k] / horizon - tmp[k] + two_uv * gu[k] - two_uv * gv[k] + (feed + removal) * gv[k];
            }
            put(&mut out, cvt, &tmp);
        }
        PdeSystem::Competitive3 { coupling, horizon } => {
            let term: Vec<&[f64]> = (0..3).map(|s| p.get(layout.ch(Role::Terminal(s)))).collect();
            for s in 0..3 {
                let gs = g.get(s);
                put(&mut out, layout.ch(Role::Initial(s)), &gs.iter().map(|v| -v / horizon).collect::<Vec<_>>());

                flux_plane_adjoint_coef(&plane_spec, term[s], gs, &mut tmp);
                tmp.iter_mut().for_each(|v| *v = -*v);
                put(&mut out, layout.ch(Role::Diffusivity(s)), &tmp);

                let diff = p.get(layout.ch(Role::Diffusivity(s)));
                flux_plane_adjoint_u(&plane_spec, diff, gs, &mut tmp);
                for k in 0..n {
                    let mut acc = gs[k] / horizon - tmp[k];
                    // −Σ_i g_i ∂R_i/∂x_s
                    for i in 0..3 {
                        let gi = g.get(i)[k];
                        let d_reaction = if i == s {
                            let crowd: f64 = (0..3).map(|j| coupling[s][j] * term[j][k]).sum();
                            1.0 - 2.0 * term[s][k] - crowd
                        } else {
                            -term[i][k] * coupling[i][s]
                        };
                        acc -= gi * d_reaction;
                    }
                    tmp[k] = acc;
                }
                put(&mut out, layout.ch(Role::Terminal(s)), &tmp);
            }
        }
    }
    Ok(out)
}

/// `(1/m)‖f(x)‖²` over all `m` residual entries.
pub fn mean_sq_residual(system: &PdeSystem, layout: &StateLayout, spec: &GridSpec, x: &[f64]) -> Result<f64> {
    let r = residual_values(system, layout, spec, x)?;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// `∇ₓ (1/m)‖f(x)‖²` for a flat state.
pub fn mean_sq_residual_grad(system: &PdeSystem, layout: &StateLayout, spec: &GridSpec, x: &[f64]) -> Result<Vec<f64>> {
    let r = residual_values(system, layout, spec, x)?;
    let scale = 2.0 / r.len() as f64;
    let g: Vec<f64> = r.iter().map(|v| scale * v).collect();
    residual_vjp(system, layout, spec, x, &g)
}

/// Residual field, one channel per equation.
pub fn residual(system: &PdeSystem, layout: &StateLayout, x: &Field) -> Result<Field> {
    let values = residual_values(system, layout, x.spec(), x.values())?;
    Field::new(x.spec().with_channels(system.residual_channels()), values)
}

/// Gradient of the mean-squared residual with respect to the state.
pub fn residual_sq_grad(system: &PdeSystem, layout: &StateLayout, x: &Field) -> Result<Field> {
    Field::new(*x.spec(), mean_sq_residual_grad(system, layout, x.spec(), x.values())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::laplacian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_for(system: &PdeSystem, n: usize) -> GridSpec {
        let b = match system.kind() {
            PdeKind::GrayScott2 | PdeKind::Competitive3 => Boundary::Periodic,
            _ => Boundary::DirichletZero,
        };
        GridSpec::new(n, n, StateLayout::canonical(system.kind()).channels(), 0.5, b).unwrap()
    }

    fn all_systems() -> Vec<PdeSystem> {
        vec![
            PdeSystem::darcy(),
            PdeSystem::Poisson,
            PdeSystem::Helmholtz { k_wave: 1.7 },
            PdeSystem::DivergenceFree,
            PdeSystem::gray_scott(),
            PdeSystem::competitive([[0.0, 1.5, 0.4], [0.6, 0.0, 1.8], [1.3, 0.7, 0.0]], 1.0).unwrap(),
        ]
    }

    fn random_state(spec: &GridSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..spec.len()).map(|_| rng.random_range(0.2..1.2)).collect()
    }

    #[test]
    fn darcy_unit_coefficient_zero_solution() {
        let sys = PdeSystem::darcy();
        let layout = StateLayout::canonical(PdeKind::Darcy);
        let spec = spec_for(&sys, 6);
        let x = Field::from_fn(spec, |c, _, _| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let r = residual(&sys, &layout, &x).unwrap();
        assert!(r.values().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn gray_scott_homogeneous_fixed_point() {
        let sys = PdeSystem::gray_scott();
        let layout = StateLayout::canonical(PdeKind::GrayScott2);
        let spec = spec_for(&sys, 6);
        // u0, v0, Du, Dv, uT, vT
        let vals = [1.0, 0.0, 0.2, 0.1, 1.0, 0.0];
        let x = Field::from_fn(spec, |c, _, _| vals[c]).unwrap();
        let r = residual(&sys, &layout, &x).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_manufactured_solution() {
        let sys = PdeSystem::Poisson;
        let layout = StateLayout::canonical(PdeKind::Poisson);
        let spec = spec_for(&sys, 9);
        let u = Field::from_fn(spec.with_channels(1), |_, i, j| (0.4 * i as f64).sin() * (0.3 * j as f64 + 0.2).cos())
            .unwrap();
        let a = laplacian(&u, 0).unwrap();
        let x = Field::stack(&[&a, &u]).unwrap();
        let r = residual(&sys, &layout, &x).unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-12));
        assert!(residual_sq_grad(&sys, &layout, &x).unwrap().values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn helmholtz_at_zero_wavenumber_is_poisson() {
        let layout = StateLayout::canonical(PdeKind::Poisson);
        let spec = spec_for(&PdeSystem::Poisson, 7);
        let x = Field::new(spec, random_state(&spec, 3)).unwrap();
        let p = residual(&PdeSystem::Poisson, &layout, &x).unwrap();
        let h = residual(&PdeSystem::Helmholtz { k_wave: 0.0 }, &layout, &x).unwrap();
        assert_eq!(p, h);
        let gp = residual_sq_grad(&PdeSystem::Poisson, &layout, &x).unwrap();
        let gh = residual_sq_grad(&PdeSystem::Helmholtz { k_wave: 0.0 }, &layout, &x).unwrap();
        assert_eq!(gp, gh);
    }

    #[test]
    fn gradient_matches_central_differences_for_every_system() {
        for sys in all_systems() {
            let layout = StateLayout::canonical(sys.kind());
            let spec = spec_for(&sys, 8);
            let x = random_state(&spec, 17);
            let grad = mean_sq_residual_grad(&sys, &layout, &spec, &x).unwrap();
            let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let step = 1e-6;
            for k in 0..x.len() {
                let mut xp = x.clone();
                xp[k] += step;
                let mut xm = x.clone();
                xm[k] -= step;
                let fd = (mean_sq_residual(&sys, &layout, &spec, &xp).unwrap()
                    - mean_sq_residual(&sys, &layout, &spec, &xm).unwrap())
                    / (2.0 * step);
                let denom = grad[k].abs().max(1e-3 * gmax);
                assert!(
                    (fd - grad[k]).abs() / denom < 1e-5,
                    "{:?} component {k}: fd {fd} vs analytic {}",
                    sys.kind(),
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn discrete_curl_is_divergence_free() {
        for b in [Boundary::Periodic, Boundary::DirichletZero] {
            let sys = PdeSystem::DivergenceFree;
            let layout = StateLayout::canonical(PdeKind::DivergenceFree);
            let spec = GridSpec::new(8, 8, 4, 0.3, b).unwrap();
            let plane = spec.with_channels(1);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut channels = Vec::new();
            for _ in 0..2 {
                let psi = Field::from_fn(plane, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
                let (dx, dy) = crate::grid::gradient(&psi, 0).unwrap();
                // (∂ⱼψ, −∂ᵢψ)
                channels.push(dy);
                channels.push(Field::new(plane, dx.values().iter().map(|v| -v).collect()).unwrap());
            }
            let x = Field::stack(&[&channels[0], &channels[1], &channels[2], &channels[3]]).unwrap();
            let r = residual(&sys, &layout, &x).unwrap();
            assert!(r.values().iter().all(|v| v.abs() < 1e-12), "{b:?}");
            let g = residual_sq_grad(&sys, &layout, &x).unwrap();
            assert!(g.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn darcy_is_bilinear_and_linear_in_source() {
        let layout = StateLayout::canonical(PdeKind::Darcy);
        let spec = spec_for(&PdeSystem::darcy(), 6);
        let x = random_state(&spec, 9);
        let flux = |x: &[f64]| residual_values(&PdeSystem::Darcy { source: 0.0 }, &layout, &spec, x).unwrap();
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for (a, b) in flux(&x).iter().zip(flux(&doubled)) {
            assert!((4.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        let r1 = residual_values(&PdeSystem::Darcy { source: 1.0 }, &layout, &spec, &x).unwrap();
        let r3 = residual_values(&PdeSystem::Darcy { source: 3.0 }, &layout, &spec, &x).unwrap();
        let r0 = flux(&x);
        for k in 0..r0.len() {
            assert!(((r3[k] - r0[k]) - 3.0 * (r1[k] - r0[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn competitive_residual_is_permutation_symmetric() {
        let a = [[0.0, 1.5, 0.4], [0.6, 0.0, 1.8], [1.3, 0.7, 0.0]];
        let perm = [2usize, 0, 1];
        let mut pa = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                pa[i][j] = a[perm[i]][perm[j]];
            }
        }
        let sys = PdeSystem::competitive(a, 0.7).unwrap();
        let psys = PdeSystem::competitive(pa, 0.7).unwrap();
        let layout = StateLayout::canonical(PdeKind::Competitive3);
        let spec = spec_for(&sys, 6);
        let x = Field::new(spec, random_state(&spec, 12)).unwrap();
        // channel groups of three: initial, diffusivity, terminal
        let mut order = Vec::new();
        for block in 0..3 {
            order.extend(perm.iter().map(|&p| block * 3 + p));
        }
        let px = x.select_channels(&order).unwrap();
        let r = residual(&sys, &layout, &x).unwrap();
        let pr = residual(&psys, &layout, &px).unwrap();
        let expected = r.select_channels(&perm).unwrap();
        for (u, v) in pr.values().iter().zip(expected.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_and_boundary_mismatches_error() {
        let sys = PdeSystem::Poisson;
        let bad_layout = StateLayout::canonical(PdeKind::GrayScott2);
        let spec = spec_for(&sys, 5);
        let x = Field::zeros(spec);
        assert!(matches!(residual(&sys, &bad_layout, &x), Err(Error::Layout(_))));
        let periodic = GridSpec { boundary: Boundary::Periodic, ..spec };
        let x = Field::zeros(periodic);
        let layout = StateLayout::canonical(PdeKind::Poisson);
        assert!(matches!(residual(&sys, &layout, &x), Err(Error::Boundary(_))));
        assert!(PdeSystem::competitive([[1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]], 1.0).is_err());
        assert!(StateLayout::new(PdeKind::Darcy, vec![Role::Solution, Role::Solution]).is_err());
        assert!(StateLayout::new(PdeKind::Darcy, vec![Role::Solution, Role::Coefficient]).is_ok());
    }

    #[test]
    fn permuted_layout_gives_same_residual() {
        let sys = PdeSystem::darcy();
        let canon = StateLayout::canonical(PdeKind::Darcy);
        let swapped = StateLayout::new(PdeKind::Darcy, vec![Role::Solution, Role::Coefficient]).unwrap();
        let spec = spec_for(&sys, 5);
        let x = Field::new(spec, random_state(&spec, 2)).unwrap();
        let xs = x.select_channels(&[1, 0]).unwrap();
        assert_eq!(residual(&sys, &canon, &x).unwrap(), residual(&sys, &swapped, &xs).unwrap());
    }
}
