//! Finite-difference stencils and their exact transposes.

use std::str::FromStr;

use super::{Boundary, Field, GridSpec};
use crate::error::{Error, Result};

/// Constant-coefficient stencils registered for adjoint application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stencil {
    /// 5-point Laplacian.
    Laplacian,
    /// Central difference along rows (`i`).
    GradX,
    /// Central difference along columns (`j`).
    GradY,
}

impl Stencil {
    pub const ALL: [Stencil; 3] = [Stencil::Laplacian, Stencil::GradX, Stencil::GradY];

    pub fn tag(self) -> &'static str {
        match self {
            Stencil::Laplacian => "laplacian",
            Stencil::GradX => "grad_x",
            Stencil::GradY => "grad_y",
        }
    }

    /// `(row offset, column offset, weight)` taps at spacing `h`.
    pub fn taps(self, h: f64) -> Vec<(isize, isize, f64)> {
        match self {
            Stencil::Laplacian => {
                let w = 1.0 / (h * h);
                vec![(0, 0, -4.0 * w), (1, 0, w), (-1, 0, w), (0, 1, w), (0, -1, w)]
            }
            Stencil::GradX => {
                let w = 0.5 / h;
                vec![(1, 0, w), (-1, 0, -w)]
            }
            Stencil::GradY => {
                let w = 0.5 / h;
                vec![(0, 1, w), (0, -1, -w)]
            }
        }
    }
}

impl FromStr for Stencil {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stencil::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::UnknownStencil(s.to_string()))
    }
}

/// Flat in-plane index of `(i + di, j + dj)`, or `None` for a zero ghost cell.
#[inline]
fn neighbor(spec: &GridSpec, i: usize, j: usize, di: isize, dj: isize) -> Option<usize> {
    let (h, w) = (spec.height as isize, spec.width as isize);
    let (mut ni, mut nj) = (i as isize + di, j as isize + dj);
    match spec.boundary {
        Boundary::Periodic => {
            ni = ni.rem_euclid(h);
            nj = nj.rem_euclid(w);
        }
        Boundary::DirichletZero => {
            if ni < 0 || ni >= h || nj < 0 || nj >= w {
                return None;
            }
        }
    }
    Some((ni * w + nj) as usize)
}

pub(crate) fn apply_plane(stencil: Stencil, spec: &GridSpec, src: &[f64], dst: &mut [f64]) {
    if stencil == Stencil::Laplacian {
        // Sum of neighbour differences so constants map to exactly zero.
        let w = 1.0 / (spec.spacing * spec.spacing);
        for i in 0..spec.height {
            for j in 0..spec.width {
                let centre = src[i * spec.width + j];
                let mut acc = 0.0;
                for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    acc += neighbor(spec, i, j, di, dj).map_or(0.0, |q| src[q]) - centre;
                }
                dst[i * spec.width + j] = w * acc;
            }
        }
        return;
    }
    let taps = stencil.taps(spec.spacing);
    for i in 0..spec.height {
        for j in 0..spec.width {
            let mut acc = 0.0;
            for &(di, dj, w) in &taps {
                if let Some(q) = neighbor(spec, i, j, di, dj) {
                    acc += w * src[q];
                }
            }
            dst[i * spec.width + j] = acc;
        }
    }
}

/// Scatters row `p` of the stencil matrix, i.e. computes `Aᵀ src`.
pub(crate) fn apply_plane_adjoint(stencil: Stencil, spec: &GridSpec, src: &[f64], dst: &mut [f64]) {
    dst.iter_mut().for_each(|v| *v = 0.0);
    let taps = stencil.taps(spec.spacing);
    for i in 0..spec.height {
        for j in 0..spec.width {
            let s = src[i * spec.width + j];
            for &(di, dj, w) in &taps {
                if let Some(q) = neighbor(spec, i, j, di, dj) {
                    dst[q] += w * s;
                }
            }
        }
    }
}

enum Face {
    Interior(usize, usize),
    /// Face between a cell and a zero Dirichlet ghost.
    Ghost(usize),
}

fn for_each_face(spec: &GridSpec, mut visit: impl FnMut(Face)) {
    let (h, w) = (spec.height, spec.width);
    let periodic = spec.boundary == Boundary::Periodic;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if i + 1 < h {
                visit(Face::Interior(p, p + w));
            } else if periodic {
                visit(Face::Interior(p, j));
            } else {
                visit(Face::Ghost(p));
            }
            if j + 1 < w {
                visit(Face::Interior(p, p + 1));
            } else if periodic {
                visit(Face::Interior(p, i * w));
            } else {
                visit(Face::Ghost(p));
            }
            if !periodic {
                if i == 0 {
                    visit(Face::Ghost(p));
                }
                if j == 0 {
                    visit(Face::Ghost(p));
                }
            }
        }
    }
}

/// `∇·(a∇u)` with `a` averaged arithmetically onto faces. On a Dirichlet
/// boundary the face coefficient is the adjacent cell's value.
pub(crate) fn flux_plane(spec: &GridSpec, coef: &[f64], u: &[f64], dst: &mut [f64]) {
    let inv_h2 = 1.0 / (spec.spacing * spec.spacing);
    dst.iter_mut().for_each(|v| *v = 0.0);
    for_each_face(spec, |face| match face {
        Face::Interior(p, q) => {
            let flux = 0.5 * (coef[p] + coef[q]) * (u[q] - u[p]) * inv_h2;
            dst[p] += flux;
            dst[q] -= flux;
        }
        Face::Ghost(p) => dst[p] -= coef[p] * u[p] * inv_h2,
    });
}

/// Transpose of `u ↦ ∇·(a∇u)` applied to `g`.
pub(crate) fn flux_plane_adjoint_u(spec: &GridSpec, coef: &[f64], g: &[f64], dst: &mut [f64]) {
    let inv_h2 = 1.0 / (spec.spacing * spec.spacing);
    dst.iter_mut().for_each(|v| *v = 0.0);
    for_each_face(spec, |face| match face {
        Face::Interior(p, q) => {
            let t = 0.5 * (coef[p] + coef[q]) * (g[q] - g[p]) * inv_h2;
            dst[p] += t;
            dst[q] -= t;
        }
        Face::Ghost(p) => dst[p] -= coef[p] * g[p] * inv_h2,
    });
}

/// Transpose of `a ↦ ∇·(a∇u)` applied to `g`.
pub(crate) fn flux_plane_adjoint_coef(spec: &GridSpec, u: &[f64], g: &[f64], dst: &mut [f64]) {
    let inv_h2 = 1.0 / (spec.spacing * spec.spacing);
    dst.iter_mut().for_each(|v| *v = 0.0);
    for_each_face(spec, |face| match face {
        Face::Interior(p, q) => {
            let t = 0.5 * (u[q] - u[p]) * (g[p] - g[q]) * inv_h2;
            dst[p] += t;
            dst[q] += t;
        }
        Face::Ghost(p) => dst[p] -= u[p] * g[p] * inv_h2,
    });
}

/// Diagonal of `u ↦ −∇·(a∇u)`.
pub(crate) fn flux_plane_diagonal(spec: &GridSpec, coef: &[f64], dst: &mut [f64]) {
    let inv_h2 = 1.0 / (spec.spacing * spec.spacing);
    dst.iter_mut().for_each(|v| *v = 0.0);
    for_each_face(spec, |face| match face {
        Face::Interior(p, q) => {
            let c = 0.5 * (coef[p] + coef[q]) * inv_h2;
            dst[p] += c;
            dst[q] += c;
        }
        Face::Ghost(p) => dst[p] += coef[p] * inv_h2,
    });
}

fn map_channels(f: &Field, mut op: impl FnMut(&[f64], &mut [f64])) -> Field {
    let n = f.spec().cells();
    let mut out = vec![0.0; f.values().len()];
    for (src, dst) in f.values().chunks(n).zip(out.chunks_mut(n)) {
        op(src, dst);
    }
    Field::new(*f.spec(), out).expect("stencil output keeps the input shape")
}

/// Applies a registered stencil to every channel.
pub fn stencil_apply(tag: &str, f: &Field) -> Result<Field> {
    let st: Stencil = tag.parse()?;
    Ok(map_channels(f, |s, d| apply_plane(st, f.spec(), s, d)))
}

/// Applies the transpose of a registered stencil to every channel.
pub fn stencil_adjoint_apply(tag: &str, f: &Field) -> Result<Field> {
    let st: Stencil = tag.parse()?;
    Ok(map_channels(f, |s, d| apply_plane_adjoint(st, f.spec(), s, d)))
}

/// 5-point Laplacian of one channel, returned as a single-channel field.
pub fn laplacian(f: &Field, channel: usize) -> Result<Field> {
    let plane = f.channel(channel)?;
    let spec = f.spec().with_channels(1);
    let mut out = vec![0.0; spec.cells()];
    apply_plane(Stencil::Laplacian, &spec, plane, &mut out);
    Field::new(spec, out)
}

/// Central-difference gradient `(∂ᵢ f, ∂ⱼ f)` of one channel.
pub fn gradient(f: &Field, channel: usize) -> Result<(Field, Field)> {
    let plane = f.channel(channel)?;
    let spec = f.spec().with_channels(1);
    let mut gx = vec![0.0; spec.cells()];
    let mut gy = vec![0.0; spec.cells()];
    apply_plane(Stencil::GradX, &spec, plane, &mut gx);
    apply_plane(Stencil::GradY, &spec, plane, &mut gy);
    Ok((Field::new(spec, gx)?, Field::new(spec, gy)?))
}

/// Channel-wise `∂ᵢ p + ∂ⱼ q`; the negative transpose of [`gradient`].
pub fn divergence(p: &Field, q: &Field) -> Result<Field> {
    if p.spec() != q.spec() {
        return Err(Error::Shape("divergence components must share a grid".into()));
    }
    let n = p.spec().cells();
    let mut out = vec![0.0; p.values().len()];
    let mut tmp = vec![0.0; n];
    for c in 0..p.spec().channels {
        let dst = &mut out[c * n..(c + 1) * n];
        apply_plane(Stencil::GradX, p.spec(), p.channel(c)?, dst);
        apply_plane(Stencil::GradY, q.spec(), q.channel(c)?, &mut tmp);
        dst.iter_mut().zip(&tmp).for_each(|(d, t)| *d += t);
    }
    Field::new(*p.spec(), out)
}

fn single_channel_pair(a: &Field, u: &Field) -> Result<()> {
    if a.spec() != u.spec() || a.spec().channels != 1 {
        return Err(Error::Shape("expected two single-channel fields on the same grid".into()));
    }
    Ok(())
}

/// `∇·(a∇u)` for single-channel `a` and `u`.
pub fn div_coef_grad(a: &Field, u: &Field) -> Result<Field> {
    single_channel_pair(a, u)?;
    let mut out = vec![0.0; u.values().len()];
    flux_plane(u.spec(), a.values(), u.values(), &mut out);
    Field::new(*u.spec(), out)
}

pub fn div_coef_grad_adjoint_u(a: &Field, g: &Field) -> Result<Field> {
    single_channel_pair(a, g)?;
    let mut out = vec![0.0; g.values().len()];
    flux_plane_adjoint_u(g.spec(), a.values(), g.values(), &mut out);
    Field::new(*g.spec(), out)
}

pub fn div_coef_grad_adjoint_coef(u: &Field, g: &Field) -> Result<Field> {
    single_channel_pair(u, g)?;
    let mut out = vec![0.0; g.values().len()];
    flux_plane_adjoint_coef(g.spec(), u.values(), g.values(), &mut out);
    Field::new(*g.spec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn spec(h: usize, w: usize, b: Boundary, dx: f64) -> GridSpec {
        GridSpec::new(h, w, 1, dx, b).unwrap()
    }

    fn random_field(spec: GridSpec, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(spec, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn constant_field_periodic_laplacian_is_zero() {
        let f = Field::constant(spec(5, 6, Boundary::Periodic, 0.3), 2.5);
        let l = laplacian(&f, 0).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_spike_dirichlet() {
        let s = spec(5, 5, Boundary::DirichletZero, 1.0);
        let f = Field::from_fn(s, |_, i, j| if (i, j) == (2, 2) { 1.0 } else { 0.0 }).unwrap();
        let l = laplacian(&f, 0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = match (i as i32 - 2).abs() + (j as i32 - 2).abs() {
                    0 => -4.0,
                    1 => 1.0,
                    _ => 0.0,
                };
                assert_eq!(l.get(0, i, j), expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn sine_mode_is_a_discrete_eigenfunction() {
        let (h, w, dx) = (12, 7, 0.25);
        let s = spec(h, w, Boundary::Periodic, dx);
        let f = Field::from_fn(s, |_, i, _| (2.0 * PI * i as f64 / h as f64).sin()).unwrap();
        let eig = (2.0 * (2.0 * PI / h as f64).cos() - 2.0) / (dx * dx);
        let l = laplacian(&f, 0).unwrap();
        for (lv, fv) in l.values().iter().zip(f.values()) {
            assert!((lv - eig * fv).abs() < 1e-12, "{lv} vs {}", eig * fv);
        }
    }

    #[test]
    fn dirichlet_laplacian_of_constant_counts_missing_neighbours() {
        let dx = 0.5;
        let c = 3.0;
        let s = spec(4, 5, Boundary::DirichletZero, dx);
        let l = laplacian(&Field::constant(s, c), 0).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let outside = [i == 0, i == 3, j == 0, j == 4].iter().filter(|&&b| b).count() as f64;
                assert!((l.get(0, i, j) + c * outside / (dx * dx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for b in [Boundary::Periodic, Boundary::DirichletZero] {
            let f = Field::constant(spec(4, 4, b, 1.0), 1.0);
            let (gx, gy) = gradient(&f, 0).unwrap();
            if b == Boundary::Periodic {
                assert!(gx.values().iter().chain(gy.values()).all(|&v| v == 0.0));
            } else {
                // only cells away from the boundary see a constant neighbourhood
                assert_eq!(gx.get(0, 1, 1), 0.0);
                assert_eq!(gy.get(0, 2, 2), 0.0);
            }
        }
    }

    #[test]
    fn gradient_of_linear_ramp_is_exact_in_interior() {
        let dx = 0.2;
        let s = spec(6, 7, Boundary::DirichletZero, dx);
        let f = Field::from_fn(s, |_, _, j| j as f64 * dx).unwrap();
        let (gx, gy) = gradient(&f, 0).unwrap();
        for i in 1..5 {
            for j in 1..6 {
                assert!((gy.get(0, i, j) - 1.0).abs() < 1e-12);
                assert!(gx.get(0, i, j).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_and_divergence_are_negative_adjoints() {
        for b in [Boundary::Periodic, Boundary::DirichletZero] {
            let s = spec(9, 8, b, 0.37);
            let f = random_field(s, 1);
            let p = random_field(s, 2);
            let q = random_field(s, 3);
            let (gx, gy) = gradient(&f, 0).unwrap();
            let lhs = dot(gx.values(), p.values()) + dot(gy.values(), q.values());
            let rhs = -dot(f.values(), divergence(&p, &q).unwrap().values());
            assert!((lhs - rhs).abs() < 1e-12, "{b:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn periodic_laplacian_is_self_adjoint() {
        let f = random_field(spec(7, 9, Boundary::Periodic, 0.8), 4);
        let a = stencil_apply("laplacian", &f).unwrap();
        let at = stencil_adjoint_apply("laplacian", &f).unwrap();
        for (x, y) in a.values().iter().zip(at.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_of_zero_is_zero_and_unknown_tag_errors() {
        let z = Field::zeros(spec(4, 4, Boundary::DirichletZero, 1.0));
        for st in Stencil::ALL {
            let out = stencil_adjoint_apply(st.tag(), &z).unwrap();
            assert!(out.values().iter().all(|&v| v == 0.0));
        }
        assert!(matches!(stencil_adjoint_apply("curl", &z), Err(Error::UnknownStencil(_))));
    }

    /// Dense matrix of a stencil written out from its definition, independent of
    /// the tap/neighbour machinery above.
    fn dense_oracle(st: Stencil, s: &GridSpec) -> Vec<Vec<f64>> {
        let (h, w, dx) = (s.height, s.width, s.spacing);
        let n = h * w;
        let mut a = vec![vec![0.0; n]; n];
        let wrap = |k: isize, m: usize| -> Option<usize> {
            if s.boundary == Boundary::Periodic {
                Some(k.rem_euclid(m as isize) as usize)
            } else if k < 0 || k >= m as isize {
                None
            } else {
                Some(k as usize)
            }
        };
        for i in 0..h {
            for j in 0..w {
                let row = i * w + j;
                let mut put = |di: isize, dj: isize, v: f64| {
                    if let (Some(ii), Some(jj)) = (wrap(i as isize + di, h), wrap(j as isize + dj, w)) {
                        a[row][ii * w + jj] += v;
                    }
                };
                match st {
                    Stencil::Laplacian => {
                        put(0, 0, -4.0 / (dx * dx));
                        for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                            put(di, dj, 1.0 / (dx * dx));
                        }
                    }
                    Stencil::GradX => {
                        put(1, 0, 1.0 / (2.0 * dx));
                        put(-1, 0, -1.0 / (2.0 * dx));
                    }
                    Stencil::GradY => {
                        put(0, 1, 1.0 / (2.0 * dx));
                        put(0, -1, -1.0 / (2.0 * dx));
                    }
                }
            }
        }
        a
    }

    #[test]
    fn stencils_match_dense_materialisation() {
        for b in [Boundary::Periodic, Boundary::DirichletZero] {
            let s = spec(6, 6, b, 0.7);
            for st in Stencil::ALL {
                let a = dense_oracle(st, &s);
                let n = s.cells();
                for k in 0..n {
                    let mut e = vec![0.0; n];
                    e[k] = 1.0;
                    let mut col = vec![0.0; n];
                    apply_plane(st, &s, &e, &mut col);
                    let mut row = vec![0.0; n];
                    apply_plane_adjoint(st, &s, &e, &mut row);
                    for r in 0..n {
                        assert!((col[r] - a[r][k]).abs() < 1e-13);
                        assert!((row[r] - a[k][r]).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn random_basis_pairs_satisfy_adjoint_identity() {
        let s = spec(8, 8, Boundary::DirichletZero, 1.0);
        let n = s.cells();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for st in Stencil::ALL {
            let a = dense_oracle(st, &s);
            for _ in 0..100 {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                let mut ei = vec![0.0; n];
                ei[i] = 1.0;
                let mut ej = vec![0.0; n];
                ej[j] = 1.0;
                let mut aei = vec![0.0; n];
                apply_plane(st, &s, &ei, &mut aei);
                let mut atej = vec![0.0; n];
                apply_plane_adjoint(st, &s, &ej, &mut atej);
                let lhs = dot(&aei, &ej);
                assert!((lhs - dot(&ei, &atej)).abs() < 1e-12);
                assert!((lhs - a[j][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flux_operator_adjoints_match_inner_products() {
        for b in [Boundary::Periodic, Boundary::DirichletZero] {
            let s = spec(7, 6, b, 0.4);
            let a = random_field(s, 20);
            let u = random_field(s, 21);
            let g = random_field(s, 22);
            let v = random_field(s, 23);
            // <L_a v, g> = <v, L_aᵀ g>
            let lav = div_coef_grad(&a, &v).unwrap();
            let ltg = div_coef_grad_adjoint_u(&a, &g).unwrap();
            assert!((dot(lav.values(), g.values()) - dot(v.values(), ltg.values())).abs() < 1e-11);
            // bilinear in coefficient: <L_v u, g> = <v, (∂/∂a)ᵀ g>
            let lvu = div_coef_grad(&v, &u).unwrap();
            let ct = div_coef_grad_adjoint_coef(&u, &g).unwrap();
            assert!((dot(lvu.values(), g.values()) - dot(v.values(), ct.values())).abs() < 1e-11);
        }
    }

    #[test]
    fn flux_with_unit_coefficient_is_laplacian() {
        for b in [Boundary::Periodic, Boundary::DirichletZero] {
            let s = spec(6, 5, b, 0.3);
            let u = random_field(s, 30);
            let one = Field::constant(s, 1.0);
            let f = div_coef_grad(&one, &u).unwrap();
            let l = laplacian(&u, 0).unwrap();
            for (x, y) in f.values().iter().zip(l.values()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stencils_are_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000, periodic: bool) {
                let b = if periodic { Boundary::Periodic } else { Boundary::DirichletZero };
                let s = spec(5, 6, b, 0.9);
                let f = random_field(s, seed);
                let g = random_field(s, seed + 7919);
                let comb = Field::new(s, f.values().iter().zip(g.values()).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
                for st in Stencil::ALL {
                    let lhs = stencil_apply(st.tag(), &comb).unwrap();
                    let af = stencil_apply(st.tag(), &f).unwrap();
                    let ag = stencil_apply(st.tag(), &g).unwrap();
                    for k in 0..s.cells() {
                        let rhs = alpha * af.values()[k] + beta * ag.values()[k];
                        prop_assert!((lhs.values()[k] - rhs).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
