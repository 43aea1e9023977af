//! Secondary phase space: left/right coordinates, the extended Hamiltonians,
//! composed flows, and sampled Lagrangian manifolds.
//!
//! The extended flow is always composed from two primary flows (the l-motion
//! and, for the Heisenberg problem, the r-motion); no 4n-dimensional ODE is
//! integrated outside the test suite.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::Result;
use crate::flow::{flow, FlowOptions, Trajectory};
use crate::geometry::{j_mul, PhasePoint};
use crate::hamiltonian::{Hamiltonian, InitialPhaseData, RectDomain};

/// Which extended evolution problem is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvolutionKind {
    /// Extended symbol H(l): evolves U(t,x).
    Schrodinger,
    /// Extended symbol H(l) - H(r): evolves rho(t,x).
    Heisenberg,
}

/// A point z = (x, y) of the secondary phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsPoint {
    pub x: PhasePoint,
    pub y: DVector<f64>,
}

impl SpsPoint {
    pub fn new(x: PhasePoint, y: DVector<f64>) -> Self {
        Self { x, y }
    }
}

/// l = x - Jy/2, r = x + Jy/2.
pub fn to_left_right(z: &SpsPoint) -> (PhasePoint, PhasePoint) {
    let jy = j_mul(&z.y);
    let l = PhasePoint::from_vector(&z.x.coords - 0.5 * &jy);
    let r = PhasePoint::from_vector(&z.x.coords + 0.5 * &jy);
    (l, r)
}

/// Inverse of `to_left_right`: x = (l+r)/2, y = J(l - r).
pub fn from_left_right(l: &PhasePoint, r: &PhasePoint) -> SpsPoint {
    let x = PhasePoint::from_vector(0.5 * (&l.coords + &r.coords));
    let y = j_mul(&(&l.coords - &r.coords));
    SpsPoint::new(x, y)
}

/// The extended Hamiltonian value at z.
pub fn extended_hamiltonian(h: &Hamiltonian, kind: EvolutionKind, t: f64, z: &SpsPoint) -> f64 {
    let (l, r) = to_left_right(z);
    match kind {
        EvolutionKind::Schrodinger => h.value(t, &l),
        EvolutionKind::Heisenberg => h.value(t, &l) - h.value(t, &r),
    }
}

/// Extended flow endpoint plus the underlying primary trajectories.
#[derive(Debug, Clone)]
pub struct SpsFlowResult {
    pub z: SpsPoint,
    pub left: Trajectory,
    /// None for the Schrodinger problem, where the r-motion is constant.
    pub right: Option<Trajectory>,
}

/// Advances z0 by composing primary flows.
pub fn sps_flow(
    h: &Hamiltonian,
    kind: EvolutionKind,
    z0: &SpsPoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<SpsFlowResult> {
    let (l0, r0) = to_left_right(z0);
    let left = flow(h, &l0, t, opts)?;
    match kind {
        EvolutionKind::Schrodinger => {
            let z = from_left_right(&left.end(), &r0);
            Ok(SpsFlowResult {
                z,
                left,
                right: None,
            })
        }
        EvolutionKind::Heisenberg => {
            let right = flow(h, &r0, t, opts)?;
            let z = from_left_right(&left.end(), &right.end());
            Ok(SpsFlowResult {
                z,
                left,
                right: Some(right),
            })
        }
    }
}

/// One advanced manifold sample.
#[derive(Debug, Clone)]
pub struct ManifoldSample {
    pub base: PhasePoint,
    pub l0: PhasePoint,
    pub r0: PhasePoint,
    pub l_t: PhasePoint,
    pub r_t: PhasePoint,
    /// midpoint image M_t(base)
    pub midpoint: PhasePoint,
    pub grad_m: DMatrix<f64>,
    pub det_m: f64,
}

/// The initial Lagrangian manifold y = grad beta0(x) sampled on a uniform
/// grid over D0, together with (after `advance`) its evolved images.
#[derive(Clone)]
pub struct LagrangianManifold {
    pub kind: EvolutionKind,
    pub phase0: InitialPhaseData,
    pub domain: RectDomain,
    /// samples per axis (2n axes)
    pub resolution: Vec<usize>,
    pub base_points: Vec<PhasePoint>,
    pub t: f64,
    pub samples: Vec<ManifoldSample>,
}

impl LagrangianManifold {
    /// Samples D0 uniformly; `resolution` entries are per-axis counts.
    pub fn sample(
        kind: EvolutionKind,
        phase0: &InitialPhaseData,
        resolution: Vec<usize>,
    ) -> Result<Self> {
        let domain = phase0.domain.clone();
        let dim = domain.dim();
        assert_eq!(resolution.len(), dim, "resolution must cover every axis");
        let mut base_points = Vec::new();
        let mut idx = vec![0usize; dim];
        loop {
            let coords: Vec<f64> = (0..dim)
                .map(|a| {
                    let frac = idx[a] as f64 / (resolution[a] - 1).max(1) as f64;
                    domain.lo[a] + frac * (domain.hi[a] - domain.lo[a])
                })
                .collect();
            base_points.push(PhasePoint::new(coords)?);
            // odometer over the per-axis indices
            let mut a = 0;
            loop {
                idx[a] += 1;
                if idx[a] < resolution[a] {
                    break;
                }
                idx[a] = 0;
                a += 1;
                if a == dim {
                    return Ok(Self {
                        kind,
                        phase0: phase0.clone(),
                        domain,
                        resolution,
                        base_points,
                        t: 0.0,
                        samples: Vec::new(),
                    });
                }
            }
        }
    }

    /// Flattened index of the sample at the given per-axis indices.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        let mut stride = 1;
        for (a, &i) in idx.iter().enumerate() {
            f += i * stride;
            stride *= self.resolution[a];
        }
        f
    }

    /// Advances every sample to time t via composed flows; records midpoint
    /// Jacobians and determinants per sample.
    pub fn advance(&self, h: &Hamiltonian, t: f64, opts: &FlowOptions) -> Result<Self> {
        let kind = self.kind;
        let phase0 = &self.phase0;
        let samples: Result<Vec<ManifoldSample>> = self
            .base_points
            .par_iter()
            .map(|xp| advance_sample(h, kind, phase0, xp, t, opts))
            .collect();
        Ok(Self {
            kind: self.kind,
            phase0: self.phase0.clone(),
            domain: self.domain.clone(),
            resolution: self.resolution.clone(),
            base_points: self.base_points.clone(),
            t,
            samples: samples?,
        })
    }
}

fn advance_sample(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    xp: &PhasePoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<ManifoldSample> {
    let data = crate::bc::midpoint_data(h, kind, phase0, xp, t, opts)?;
    let det_m = data.grad_m.determinant();
    Ok(ManifoldSample {
        base: xp.clone(),
        l0: data.l0,
        r0: data.r0,
        l_t: data.l_t,
        r_t: data.r_t,
        midpoint: data.midpoint,
        grad_m: data.grad_m,
        det_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate, OdeOptions};

    fn zp(q: f64, p: f64, yq: f64, yp: f64) -> SpsPoint {
        SpsPoint::new(PhasePoint::qp(q, p), DVector::from_vec(vec![yq, yp]))
    }

    #[test]
    fn left_right_example() {
        // x=(0,0), y=(2,0): Jy = (0,-2), l = (0,1), r = (0,-1)
        let (l, r) = to_left_right(&zp(0.0, 0.0, 2.0, 0.0));
        assert_eq!(l, PhasePoint::qp(0.0, 1.0));
        assert_eq!(r, PhasePoint::qp(0.0, -1.0));
    }

    #[test]
    fn left_right_round_trip() {
        let z = zp(0.3, -0.7, 1.1, 0.4);
        let (l, r) = to_left_right(&z);
        let back = from_left_right(&l, &r);
        assert!((&back.x.coords - &z.x.coords).norm() < 1e-15);
        assert!((&back.y - &z.y).norm() < 1e-15);
    }

    #[test]
    fn zero_y_collapses() {
        let z = zp(0.4, 0.2, 0.0, 0.0);
        let (l, r) = to_left_right(&z);
        assert_eq!(l, r);
        let h = Hamiltonian::pendulum(1.0);
        assert_eq!(
            extended_hamiltonian(&h, EvolutionKind::Heisenberg, 0.0, &z),
            0.0
        );
        let hs = extended_hamiltonian(&h, EvolutionKind::Schrodinger, 0.0, &z);
        assert!((hs - h.value(0.0, &z.x)).abs() < 1e-15);
    }

    #[test]
    fn heisenberg_reflection() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let z = zp(0.5, -0.2, 0.8, -1.3);
        let zr = zp(0.5, -0.2, -0.8, 1.3);
        let a = extended_hamiltonian(&h, EvolutionKind::Heisenberg, 0.0, &z);
        let b = extended_hamiltonian(&h, EvolutionKind::Heisenberg, 0.0, &zr);
        assert_eq!(a, -b);
    }

    #[test]
    fn schrodinger_r_constant() {
        let h = Hamiltonian::pendulum(1.0);
        let z0 = zp(0.3, 0.1, 0.5, -0.2);
        let (_, r0) = to_left_right(&z0);
        let res =
            sps_flow(&h, EvolutionKind::Schrodinger, &z0, 1.2, &FlowOptions::default()).unwrap();
        let (_, r_t) = to_left_right(&res.z);
        assert!((&r_t.coords - &r0.coords).norm() < 1e-12);
    }

    #[test]
    fn heisenberg_zero_y_transport() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let z0 = zp(0.7, -0.4, 0.0, 0.0);
        let res =
            sps_flow(&h, EvolutionKind::Heisenberg, &z0, 1.5, &FlowOptions::default()).unwrap();
        let direct = flow(&h, &z0.x, 1.5, &FlowOptions::default()).unwrap().end();
        assert!((&res.z.x.coords - &direct.coords).norm() < 1e-9);
        assert!(res.z.y.norm() < 1e-9);
    }

    #[test]
    fn sps_time_zero() {
        let h = Hamiltonian::pendulum(1.0);
        let z0 = zp(0.3, 0.1, 0.5, -0.2);
        let res =
            sps_flow(&h, EvolutionKind::Heisenberg, &z0, 0.0, &FlowOptions::default()).unwrap();
        assert!((&res.z.x.coords - &z0.x.coords).norm() < 1e-14);
        assert!((&res.z.y - &z0.y).norm() < 1e-14);
    }

    /// Direct 4n-dimensional integration of zdot = Jtilde grad Hext(z),
    /// used only as an oracle for the composed flows.
    fn sps_flow_direct(h: &Hamiltonian, kind: EvolutionKind, z0: &SpsPoint, t: f64) -> SpsPoint {
        let n2 = z0.x.dim();
        let fd = 1e-6;
        let rhs = |tau: f64, y: &DVector<f64>| -> DVector<f64> {
            let mut grad = DVector::zeros(2 * n2);
            for i in 0..2 * n2 {
                let mut zp = y.clone();
                let mut zm = y.clone();
                zp[i] += fd;
                zm[i] -= fd;
                let mk = |v: DVector<f64>| {
                    SpsPoint::new(
                        PhasePoint::from_vector(v.rows(0, n2).into_owned()),
                        v.rows(n2, n2).into_owned(),
                    )
                };
                grad[i] = (extended_hamiltonian(h, kind, tau, &mk(zp))
                    - extended_hamiltonian(h, kind, tau, &mk(zm)))
                    / (2.0 * fd);
            }
            // Jtilde (gx, gy) = (gy, -gx)
            let mut dz = DVector::zeros(2 * n2);
            for i in 0..n2 {
                dz[i] = grad[n2 + i];
                dz[n2 + i] = -grad[i];
            }
            dz
        };
        let mut y0 = DVector::zeros(2 * n2);
        y0.rows_mut(0, n2).copy_from(&z0.x.coords);
        y0.rows_mut(n2, n2).copy_from(&z0.y);
        let opts = OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..OdeOptions::default()
        };
        let sol = integrate(rhs, 0.0, y0, t, &opts).unwrap();
        SpsPoint::new(
            PhasePoint::from_vector(sol.y1.rows(0, n2).into_owned()),
            sol.y1.rows(n2, n2).into_owned(),
        )
    }

    #[test]
    fn composed_flow_matches_direct_integration() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        for kind in [EvolutionKind::Schrodinger, EvolutionKind::Heisenberg] {
            for (z0, t) in [
                (zp(0.4, 0.3, 0.2, -0.5), 1.3),
                (zp(-0.6, 0.1, -0.3, 0.4), 2.0),
                (zp(0.0, 0.8, 0.6, 0.2), -1.1),
            ] {
                let comp = sps_flow(&h, kind, &z0, t, &FlowOptions::default()).unwrap();
                let direct = sps_flow_direct(&h, kind, &z0, t);
                let dx = (&comp.z.x.coords - &direct.x.coords).norm();
                let dy = (&comp.z.y - &direct.y).norm();
                assert!(dx < 1e-7 && dy < 1e-7, "{kind:?} dx={dx} dy={dy}");
            }
        }
    }

    #[test]
    fn left_right_poisson_identities() {
        // {f o l, g o l}_2 = {f,g}_1 o l ; {f o r, g o r}_2 = -{f,g}_1 o r
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let g = |x: &[f64]| (x[0] * x[1]).cos() + x[0];
        let fd = 1e-5;
        let bracket1 = |fun: &dyn Fn(&[f64]) -> f64, gun: &dyn Fn(&[f64]) -> f64, x: &[f64]| {
            let mut df = [0.0; 2];
            let mut dg = [0.0; 2];
            for i in 0..2 {
                let mut xp = [x[0], x[1]];
                let mut xm = [x[0], x[1]];
                xp[i] += fd;
                xm[i] -= fd;
                df[i] = (fun(&xp) - fun(&xm)) / (2.0 * fd);
                dg[i] = (gun(&xp) - gun(&xm)) / (2.0 * fd);
            }
            df[0] * dg[1] - df[1] * dg[0]
        };
        let bracket2 = |fun: &dyn Fn(&SpsPoint) -> f64,
                        gun: &dyn Fn(&SpsPoint) -> f64,
                        z: &SpsPoint| {
            let mut df = [0.0; 4];
            let mut dg = [0.0; 4];
            let mk = |a: [f64; 4]| {
                SpsPoint::new(
                    PhasePoint::qp(a[0], a[1]),
                    DVector::from_vec(vec![a[2], a[3]]),
                )
            };
            for i in 0..4 {
                let mut zp = [z.x.coords[0], z.x.coords[1], z.y[0], z.y[1]];
                let mut zm = zp;
                zp[i] += fd;
                zm[i] -= fd;
                df[i] = (fun(&mk(zp)) - fun(&mk(zm))) / (2.0 * fd);
                dg[i] = (gun(&mk(zp)) - gun(&mk(zm))) / (2.0 * fd);
            }
            df[0] * dg[2] + df[1] * dg[3] - df[2] * dg[0] - df[3] * dg[1]
        };
        let z = zp(0.3, -0.4, 0.7, 0.2);
        let (l, r) = to_left_right(&z);
        let fl = |zz: &SpsPoint| f(to_left_right(zz).0.coords.as_slice());
        let gl = |zz: &SpsPoint| g(to_left_right(zz).0.coords.as_slice());
        let fr = |zz: &SpsPoint| f(to_left_right(zz).1.coords.as_slice());
        let gr = |zz: &SpsPoint| g(to_left_right(zz).1.coords.as_slice());
        let lhs_l = bracket2(&fl, &gl, &z);
        let rhs_l = bracket1(&f, &g, l.coords.as_slice());
        assert!((lhs_l - rhs_l).abs() / rhs_l.abs().max(1.0) < 1e-5);
        let lhs_r = bracket2(&fr, &gr, &z);
        let rhs_r = -bracket1(&f, &g, r.coords.as_slice());
        assert!((lhs_r - rhs_r).abs() / rhs_r.abs().max(1.0) < 1e-5);
    }
}
