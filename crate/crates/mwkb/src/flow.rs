//! Primary-phase-space Hamiltonian flow g(t|x0) with its Jacobi field,
//! action accumulators, and the closed-form propagator for quadratic symbols.
//!
//! The variational equations are integrated alongside the state (not by
//! finite-differencing flows) so boundary-condition Newton steps see smooth
//! Jacobians. Action int p.qdot and int H ride along as extra components
//! under the same adaptive error control.

use nalgebra::{DMatrix, DVector};

use crate::error::{MwkbError, Result};
use crate::geometry::{j_mul, ArcData, PhasePoint};
use crate::hamiltonian::Hamiltonian;
use crate::ode::{integrate, OdeOptions, OdeSolution};

/// Default time horizon.
pub const T_MAX_DEFAULT: f64 = 50.0;
/// Symplecticity tolerance for Jacobi samples.
pub const TOL_SYMP: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub ode: OdeOptions,
    pub t_max: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            ode: OdeOptions::default(),
            t_max: T_MAX_DEFAULT,
        }
    }
}

/// A single integrated trajectory with dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x0: PhasePoint,
    pub t: f64,
    dof: usize,
    sol: OdeSolution,
}

/// State layout: [x (2n) | grad g row-major (4n^2) | int p.qdot | int H].
fn pack(x: &PhasePoint, jac: &DMatrix<f64>, action: f64, ham: f64) -> DVector<f64> {
    let n2 = x.dim();
    let mut y = DVector::zeros(n2 + n2 * n2 + 2);
    y.rows_mut(0, n2).copy_from(&x.coords);
    for r in 0..n2 {
        for c in 0..n2 {
            y[n2 + r * n2 + c] = jac[(r, c)];
        }
    }
    y[n2 + n2 * n2] = action;
    y[n2 + n2 * n2 + 1] = ham;
    y
}

fn unpack(y: &DVector<f64>, dof: usize) -> (PhasePoint, DMatrix<f64>, f64, f64) {
    let n2 = 2 * dof;
    let x = PhasePoint::from_vector(DVector::from_column_slice(&y.as_slice()[..n2]));
    let jac = DMatrix::from_fn(n2, n2, |r, c| y[n2 + r * n2 + c]);
    (x, jac, y[n2 + n2 * n2], y[n2 + n2 * n2 + 1])
}

/// Integrates the flow from x0 over [0, t] (t may be negative).
pub fn flow(h: &Hamiltonian, x0: &PhasePoint, t: f64, opts: &FlowOptions) -> Result<Trajectory> {
    if t.abs() > opts.t_max {
        return Err(MwkbError::BeyondHorizon {
            t,
            t_max: opts.t_max,
        });
    }
    let dof = x0.dof();
    let n2 = 2 * dof;
    let rhs = |tau: f64, y: &DVector<f64>| -> DVector<f64> {
        let (x, jac, _, _) = unpack(y, dof);
        let grad = h.gradient(tau, &x);
        let hess = h.hessian(tau, &x);
        let xdot = j_mul(&grad);
        // variational: d/dt grad g = J H'' grad g
        let hj = &hess * &jac;
        let mut jdot = DMatrix::zeros(n2, n2);
        for c in 0..n2 {
            let col = j_mul(&DVector::from_column_slice(hj.column(c).as_slice()));
            jdot.set_column(c, &col);
        }
        let mut action_dot = 0.0;
        for i in 0..dof {
            action_dot += x.coords[dof + i] * xdot[i]; // p . qdot
        }
        let ham_dot = h.value(tau, &x);
        let mut dy = DVector::zeros(y.len());
        dy.rows_mut(0, n2).copy_from(&xdot);
        for r in 0..n2 {
            for c in 0..n2 {
                dy[n2 + r * n2 + c] = jdot[(r, c)];
            }
        }
        dy[n2 + n2 * n2] = action_dot;
        dy[n2 + n2 * n2 + 1] = ham_dot;
        dy
    };

    let y0 = pack(x0, &DMatrix::identity(n2, n2), 0.0, 0.0);
    let sol = integrate(rhs, 0.0, y0, t, &opts.ode)?;
    Ok(Trajectory {
        x0: x0.clone(),
        t,
        dof,
        sol,
    })
}

impl Trajectory {
    pub fn end(&self) -> PhasePoint {
        unpack(&self.sol.y1, self.dof).0
    }

    pub fn jacobi_end(&self) -> DMatrix<f64> {
        unpack(&self.sol.y1, self.dof).1
    }

    /// int_0^t p.qdot dtau.
    pub fn action_end(&self) -> f64 {
        unpack(&self.sol.y1, self.dof).2
    }

    /// int_0^t H(tau, g(tau)) dtau.
    pub fn ham_integral_end(&self) -> f64 {
        unpack(&self.sol.y1, self.dof).3
    }

    /// Dense state at any tau inside the span.
    pub fn sample(&self, tau: f64) -> (PhasePoint, DMatrix<f64>, f64, f64) {
        unpack(&self.sol.sample(tau), self.dof)
    }

    /// Accepted step boundary times (tau = 0 excluded, endpoint included).
    pub fn sample_times(&self) -> Vec<f64> {
        self.sol.steps.iter().map(|s| s.t0 + s.h).collect()
    }

    pub fn arc_data(&self) -> ArcData {
        ArcData {
            start: self.x0.clone(),
            end: self.end(),
            action: self.action_end(),
        }
    }

    /// Worst |grad g^T J grad g - J| over accepted samples.
    pub fn symplecticity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for ts in self.sample_times() {
            let (_, jac, _, _) = self.sample(ts);
            worst = worst.max(crate::geometry::symplectic_defect(&jac));
        }
        worst
    }

    /// Worst |H(g(tau)) - H(x0)| over accepted samples (static H only).
    pub fn energy_drift(&self, h: &Hamiltonian) -> f64 {
        let e0 = h.value(0.0, &self.x0);
        let mut worst: f64 = 0.0;
        for ts in self.sample_times() {
            let (x, _, _, _) = self.sample(ts);
            worst = worst.max((h.value(ts, &x) - e0).abs());
        }
        worst
    }
}

/// Report from checking Jacobi growth against the declared Hessian bound.
#[derive(Debug, Clone)]
pub struct JacobiBoundReport {
    /// min over samples of e^{c1 |tau|} - |grad g|.
    pub worst_norm_margin: f64,
    /// min over samples of (e^{c1 |tau|} - 1) - |grad g - I|.
    pub worst_dev_margin: f64,
    pub ok: bool,
}

/// Verifies |grad g(t)| <= e^{c1 t} and |grad g - I| <= e^{c1 t} - 1 at every
/// accepted sample. A violation signals either a wrong c1 or integrator drift.
pub fn jacobi_bound_check(traj: &Trajectory, c1: f64) -> JacobiBoundReport {
    let mut worst_norm = f64::INFINITY;
    let mut worst_dev = f64::INFINITY;
    let n2 = 2 * traj.dof;
    let eye = DMatrix::<f64>::identity(n2, n2);
    let mut times = traj.sample_times();
    times.push(0.0);
    for ts in times {
        let (_, jac, _, _) = traj.sample(ts);
        let bound = (c1 * ts.abs()).exp();
        let nj = spectral_norm(&jac);
        let nd = spectral_norm(&(&jac - &eye));
        worst_norm = worst_norm.min(bound - nj);
        worst_dev = worst_dev.min((bound - 1.0) - nd);
    }
    JacobiBoundReport {
        worst_norm_margin: worst_norm,
        worst_dev_margin: worst_dev,
        ok: worst_norm >= -1e-8 && worst_dev >= -1e-8,
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |a, &s| a.max(s))
}

/// Affine flow data for quadratic Hamiltonians: g(t,s|x) = K(t,s)[x + F(t,s)].
#[derive(Debug, Clone)]
pub struct QuadraticPropagator {
    pub k: DMatrix<f64>,
    pub f: DVector<f64>,
    pub s: f64,
    pub t: f64,
}

impl QuadraticPropagator {
    pub fn forward(&self, x: &PhasePoint) -> PhasePoint {
        PhasePoint::from_vector(&self.k * (&x.coords + &self.f))
    }

    /// g(s,t|x) = K(t,s)^{-1} x - F(t,s).
    pub fn backward(&self, x: &PhasePoint) -> PhasePoint {
        let kinv = self
            .k
            .clone()
            .lu()
            .solve(&x.coords)
            .expect("symplectic K is invertible");
        PhasePoint::from_vector(kinv - &self.f)
    }
}

/// Builds K(t,s), F(t,s) for a quadratic Hamiltonian: closed-form matrix
/// exponential when the coefficients are constant, otherwise by integrating
/// the matrix equation.
pub fn quadratic_propagate(h: &Hamiltonian, s: f64, t: f64, opts: &FlowOptions) -> Result<QuadraticPropagator> {
    let qf = match &h.kind {
        crate::hamiltonian::HamiltonianKind::Quadratic(qf) => qf,
        _ => {
            return Err(MwkbError::Scenario(
                "quadratic_propagate requires a quadratic Hamiltonian".into(),
            ))
        }
    };
    let n2 = 2 * h.dof;
    if let (crate::hamiltonian::MatrixOfTime::Constant(hess), crate::hamiltonian::VectorOfTime::Constant(lin)) =
        (&qf.hess, &qf.lin)
    {
        // A = J H''; K = exp((t-s) A); phi = int_0^{t-s} exp(u A) du J H'
        let mut a = DMatrix::zeros(n2, n2);
        for c in 0..n2 {
            let col = j_mul(&DVector::from_column_slice(hess.column(c).as_slice()));
            a.set_column(c, &col);
        }
        let dt = t - s;
        // augmented exponential: exp([[A, I],[0, 0]] dt) = [[e^{A dt}, int], [0, I]]
        let mut aug = DMatrix::zeros(2 * n2, 2 * n2);
        aug.view_mut((0, 0), (n2, n2)).copy_from(&a);
        aug.view_mut((0, n2), (n2, n2))
            .copy_from(&DMatrix::identity(n2, n2));
        let e = matrix_exp(&(aug * dt));
        let k = e.view((0, 0), (n2, n2)).into_owned();
        let integral = e.view((0, n2), (n2, n2)).into_owned();
        let phi = &integral * j_mul(&DVector::from_column_slice(lin.as_slice()));
        // F = K^{-1} phi
        let f = k
            .clone()
            .lu()
            .solve(&phi)
            .expect("symplectic K is invertible");
        Ok(QuadraticPropagator { k, f, s, t })
    } else {
        // integrate d/dt [K | phi] with K(s)=I, phi(s)=0
        let rhs = |tau: f64, y: &DVector<f64>| -> DVector<f64> {
            let hess = qf.hess.at(tau);
            let lin = qf.lin.at(tau);
            let mut dy = DVector::zeros(y.len());
            // K columns
            for c in 0..n2 {
                let col = DVector::from_fn(n2, |r, _| y[r * n2 + c]);
                let d = j_mul(&(&hess * col));
                for r in 0..n2 {
                    dy[r * n2 + c] = d[r];
                }
            }
            let phi = DVector::from_fn(n2, |r, _| y[n2 * n2 + r]);
            let dphi = j_mul(&(&hess * phi)) + j_mul(&lin);
            for r in 0..n2 {
                dy[n2 * n2 + r] = dphi[r];
            }
            dy
        };
        let mut y0 = DVector::zeros(n2 * n2 + n2);
        for i in 0..n2 {
            y0[i * n2 + i] = 1.0;
        }
        let sol = integrate(rhs, s, y0, t, &opts.ode)?;
        let k = DMatrix::from_fn(n2, n2, |r, c| sol.y1[r * n2 + c]);
        let phi = DVector::from_fn(n2, |r, _| sol.y1[n2 * n2 + r]);
        let f = k
            .clone()
            .lu()
            .solve(&phi)
            .expect("symplectic K is invertible");
        Ok(QuadraticPropagator { k, f, s, t })
    }
}

/// Scaling-and-squaring matrix exponential (Taylor core), adequate for the
/// small dense matrices used here.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().fold(0.0f64, |a, &v| a.max(v.abs())) * n as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2.0f64.powi(s);
    let mut term = DMatrix::identity(n, n);
    let mut acc = DMatrix::identity(n, n);
    for k in 1..=18 {
        term = &term * &scaled / k as f64;
        acc += &term;
    }
    let mut out = acc;
    for _ in 0..s {
        out = &out * &out;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ho() -> Hamiltonian {
        Hamiltonian::harmonic_oscillator(1, 1.0)
    }

    #[test]
    fn ho_quarter_turn() {
        let traj = flow(&ho(), &PhasePoint::qp(1.0, 0.0), PI / 2.0, &FlowOptions::default()).unwrap();
        let e = traj.end();
        assert!((e.coords[0]).abs() < 1e-9);
        assert!((e.coords[1] + 1.0).abs() < 1e-9);
        let k = traj.jacobi_end();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((k - expect).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_time_flow() {
        let x0 = PhasePoint::qp(0.4, -0.2);
        let traj = flow(&ho(), &x0, 0.0, &FlowOptions::default()).unwrap();
        assert_eq!(traj.end(), x0);
        assert_eq!(traj.action_end(), 0.0);
        assert_eq!(traj.jacobi_end(), DMatrix::identity(2, 2));
    }

    #[test]
    fn free_particle_action() {
        let h = Hamiltonian::free_particle(1.0);
        let traj = flow(&h, &PhasePoint::qp(0.0, 1.0), 2.0, &FlowOptions::default()).unwrap();
        let e = traj.end();
        assert!((e.coords[0] - 2.0).abs() < 1e-10);
        assert!((e.coords[1] - 1.0).abs() < 1e-10);
        assert!((traj.action_end() - 2.0).abs() < 1e-10);
        assert!((traj.ham_integral_end() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn symplectic_and_energy() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let traj = flow(&h, &PhasePoint::qp(1.2, -0.3), 3.0, &FlowOptions::default()).unwrap();
        assert!(traj.symplecticity_defect() < TOL_SYMP);
        assert!(traj.energy_drift(&h) < 1e-9);
    }

    #[test]
    fn flow_composition_and_inverse() {
        let h = Hamiltonian::pendulum(1.0);
        let x0 = PhasePoint::qp(0.7, 0.4);
        let opts = FlowOptions::default();
        let a = flow(&h, &x0, 0.8, &opts).unwrap().end();
        let b = flow(&h, &a, 0.7, &opts).unwrap().end();
        let c = flow(&h, &x0, 1.5, &opts).unwrap().end();
        assert!((&b.coords - &c.coords).norm() < 1e-7);
        let back = flow(&h, &c, -1.5, &opts).unwrap().end();
        assert!((&back.coords - &x0.coords).norm() < 1e-7);
    }

    #[test]
    fn quadratic_propagator_rotation() {
        let prop = quadratic_propagate(&ho(), 0.0, 0.9, &FlowOptions::default()).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.9f64.cos(), 0.9f64.sin(), -(0.9f64.sin()), 0.9f64.cos()]);
        assert!((&prop.k - &expect).iter().all(|v| v.abs() < 1e-12));
        assert!(prop.f.norm() < 1e-14);
        assert!((prop.k.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_propagator_identity_at_equal_times() {
        let prop = quadratic_propagate(&ho(), 0.3, 0.3, &FlowOptions::default()).unwrap();
        assert!((&prop.k - DMatrix::identity(2, 2)).iter().all(|v| v.abs() < 1e-14));
        assert!(prop.f.norm() < 1e-14);
    }

    #[test]
    fn quadratic_flow_matches_ode_flow() {
        let h = Hamiltonian::driven_oscillator([0.7, 0.0], 1.0);
        let prop = quadratic_propagate(&h, 0.0, 0.9, &FlowOptions::default()).unwrap();
        let x0 = PhasePoint::qp(0.2, 0.1);
        let traj = flow(&h, &x0, 0.9, &FlowOptions::default()).unwrap();
        let cf = prop.forward(&x0);
        assert!((&cf.coords - &traj.end().coords).norm() < 1e-8);
        let back = prop.backward(&cf);
        assert!((&back.coords - &x0.coords).norm() < 1e-10);
    }

    #[test]
    fn beyond_horizon_rejected() {
        let res = flow(&ho(), &PhasePoint::qp(1.0, 0.0), 100.0, &FlowOptions::default());
        assert!(matches!(res, Err(MwkbError::BeyondHorizon { .. })));
    }

    #[test]
    fn jacobi_bounds_rotation() {
        let traj = flow(&ho(), &PhasePoint::qp(1.0, 0.0), 1.0, &FlowOptions::default()).unwrap();
        let rep = jacobi_bound_check(&traj, 1.0);
        assert!(rep.ok, "{rep:?}");
    }

    #[test]
    fn matrix_exp_rotation() {
        let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let e = matrix_exp(&(j * 0.7));
        assert!((e[(0, 0)] - 0.7f64.cos()).abs() < 1e-14);
        assert!((e[(0, 1)] - 0.7f64.sin()).abs() < 1e-14);
    }
}
