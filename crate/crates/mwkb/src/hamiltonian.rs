//! Weyl-symbol Hamiltonians H(x) with first and second derivatives, the
//! exactly solvable quadratic family, and WKB initial data (amplitude, phase).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{MwkbError, Result};
use crate::expr::Field;
use crate::geometry::PhasePoint;

pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>;
pub type HessFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Time-dependent coefficient matrix H''(t).
#[derive(Clone)]
pub enum MatrixOfTime {
    Constant(DMatrix<f64>),
    Varying(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>),
}

impl MatrixOfTime {
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            MatrixOfTime::Constant(m) => m.clone(),
            MatrixOfTime::Varying(f) => f(t),
        }
    }
    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixOfTime::Constant(_))
    }
}

/// Time-dependent coefficient vector H'(t).
#[derive(Clone)]
pub enum VectorOfTime {
    Constant(DVector<f64>),
    Varying(Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
}

impl VectorOfTime {
    pub fn at(&self, t: f64) -> DVector<f64> {
        match self {
            VectorOfTime::Constant(v) => v.clone(),
            VectorOfTime::Varying(f) => f(t),
        }
    }
    pub fn is_constant(&self) -> bool {
        matches!(self, VectorOfTime::Constant(_))
    }
}

/// H(t,x) = x.H''(t)x/2 + H'(t).x
#[derive(Clone)]
pub struct QuadraticForm {
    pub hess: MatrixOfTime,
    pub lin: VectorOfTime,
}

#[derive(Clone)]
pub struct AnalyticForm {
    pub value: ScalarFn,
    pub grad: GradFn,
    pub hess: HessFn,
}

#[derive(Clone)]
pub enum HamiltonianKind {
    Quadratic(QuadraticForm),
    Analytic(AnalyticForm),
}

/// The Hamiltonian symbol with hbar and an optional declared Hessian bound
/// (used only to report the guaranteed short-time contraction horizon).
#[derive(Clone)]
pub struct Hamiltonian {
    pub kind: HamiltonianKind,
    /// Configuration-space dimension n; phase points live in R^{2n}.
    pub dof: usize,
    pub hbar: f64,
    pub c1_bound: Option<f64>,
    pub time_dependent: bool,
}

impl Hamiltonian {
    pub fn quadratic(hess: DMatrix<f64>, lin: DVector<f64>, hbar: f64) -> Result<Self> {
        let n2 = hess.nrows();
        if hess.ncols() != n2 || lin.len() != n2 || n2 % 2 != 0 {
            return Err(MwkbError::DimensionMismatch {
                expected: n2,
                got: lin.len(),
            });
        }
        let sym_defect = abs_max(&(&hess - hess.transpose()));
        if sym_defect > 1e-10 {
            return Err(MwkbError::Scenario(format!(
                "quadratic Hessian not symmetric (defect {sym_defect:.3e})"
            )));
        }
        let c1 = hess_norm(&hess);
        Ok(Self {
            kind: HamiltonianKind::Quadratic(QuadraticForm {
                hess: MatrixOfTime::Constant(hess),
                lin: VectorOfTime::Constant(lin),
            }),
            dof: n2 / 2,
            hbar,
            c1_bound: Some(c1),
            time_dependent: false,
        })
    }

    pub fn quadratic_time_dependent(
        hess: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
        lin: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
        dof: usize,
        hbar: f64,
        c1_bound: Option<f64>,
    ) -> Self {
        Self {
            kind: HamiltonianKind::Quadratic(QuadraticForm {
                hess: MatrixOfTime::Varying(hess),
                lin: VectorOfTime::Varying(lin),
            }),
            dof,
            hbar,
            c1_bound,
            time_dependent: true,
        }
    }

    pub fn analytic(
        value: ScalarFn,
        grad: GradFn,
        hess: HessFn,
        dof: usize,
        hbar: f64,
        c1_bound: Option<f64>,
    ) -> Self {
        Self {
            kind: HamiltonianKind::Analytic(AnalyticForm { value, grad, hess }),
            dof,
            hbar,
            c1_bound,
            time_dependent: false,
        }
    }

    /// H = (q^2 + p^2)/2 for n degrees of freedom.
    pub fn harmonic_oscillator(dof: usize, hbar: f64) -> Self {
        Self::quadratic(
            DMatrix::identity(2 * dof, 2 * dof),
            DVector::zeros(2 * dof),
            hbar,
        )
        .expect("identity Hessian is symmetric")
    }

    /// H = p^2/2, n = 1.
    pub fn free_particle(hbar: f64) -> Self {
        let mut h = DMatrix::zeros(2, 2);
        h[(1, 1)] = 1.0;
        Self::quadratic(h, DVector::zeros(2), hbar).unwrap()
    }

    /// Driven oscillator H = (q^2+p^2)/2 + f.x, n = 1.
    pub fn driven_oscillator(force: [f64; 2], hbar: f64) -> Self {
        Self::quadratic(
            DMatrix::identity(2, 2),
            DVector::from_column_slice(&force),
            hbar,
        )
        .unwrap()
    }

    /// H = p^2/2 + q^2/2 + lambda q^4, n = 1.
    pub fn quartic_oscillator(lambda: f64, hbar: f64) -> Self {
        let value: ScalarFn = Arc::new(move |_t, x: &[f64]| {
            0.5 * (x[0] * x[0] + x[1] * x[1]) + lambda * x[0].powi(4)
        });
        let grad: GradFn = Arc::new(move |_t, x: &[f64]| {
            DVector::from_vec(vec![x[0] + 4.0 * lambda * x[0].powi(3), x[1]])
        });
        let hess: HessFn = Arc::new(move |_t, x: &[f64]| {
            DMatrix::from_row_slice(2, 2, &[1.0 + 12.0 * lambda * x[0] * x[0], 0.0, 0.0, 1.0])
        });
        Self::analytic(value, grad, hess, 1, hbar, None)
    }

    /// H = p^2/2 - cos q, n = 1. The Hessian norm is bounded by 1.
    pub fn pendulum(hbar: f64) -> Self {
        let value: ScalarFn =
            Arc::new(|_t, x: &[f64]| 0.5 * x[1] * x[1] - x[0].cos());
        let grad: GradFn =
            Arc::new(|_t, x: &[f64]| DVector::from_vec(vec![x[0].sin(), x[1]]));
        let hess: HessFn = Arc::new(|_t, x: &[f64]| {
            DMatrix::from_row_slice(2, 2, &[x[0].cos(), 0.0, 0.0, 1.0])
        });
        Self::analytic(value, grad, hess, 1, hbar, Some(1.0))
    }

    /// Builds an analytic Hamiltonian from an expression in (q.., p..) with
    /// symbolic derivatives; variables are q, p for n = 1 and q1..qn, p1..pn
    /// otherwise.
    pub fn from_expression(text: &str, dof: usize, hbar: f64, c1_bound: Option<f64>) -> Result<Self> {
        let f = parse_phase_field(text, dof)?;
        let dim = 2 * dof;
        let grad_fields: Vec<Field> = f.gradient();
        let hess_fields: Vec<Vec<Field>> = grad_fields
            .iter()
            .map(|g| g.gradient())
            .collect();
        let fv = f.clone();
        let value: ScalarFn = Arc::new(move |_t, x: &[f64]| fv.eval(x));
        let gf = grad_fields.clone();
        let grad: GradFn = Arc::new(move |_t, x: &[f64]| {
            DVector::from_iterator(dim, gf.iter().map(|g| g.eval(x)))
        });
        let hf = hess_fields;
        let hess: HessFn = Arc::new(move |_t, x: &[f64]| {
            DMatrix::from_fn(dim, dim, |i, j| hf[i][j].eval(x))
        });
        Ok(Self::analytic(value, grad, hess, dof, hbar, c1_bound))
    }

    /// value, gradient and Hessian at (t, x).
    pub fn eval(&self, t: f64, x: &PhasePoint) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let xs = x.coords.as_slice();
        let (v, g, h) = match &self.kind {
            HamiltonianKind::Quadratic(qf) => {
                let hm = qf.hess.at(t);
                let lv = qf.lin.at(t);
                let hx = &hm * &x.coords;
                let v = 0.5 * x.coords.dot(&hx) + lv.dot(&x.coords);
                (v, hx + lv, hm)
            }
            HamiltonianKind::Analytic(af) => {
                ((af.value)(t, xs), (af.grad)(t, xs), (af.hess)(t, xs))
            }
        };
        if !v.is_finite() || !g.iter().all(|c| c.is_finite()) {
            return Err(MwkbError::NonFinite {
                context: "Hamiltonian::eval".into(),
                x: xs.to_vec(),
            });
        }
        Ok((v, g, h))
    }

    pub fn value(&self, t: f64, x: &PhasePoint) -> f64 {
        match &self.kind {
            HamiltonianKind::Quadratic(qf) => {
                let hx = qf.hess.at(t) * &x.coords;
                0.5 * x.coords.dot(&hx) + qf.lin.at(t).dot(&x.coords)
            }
            HamiltonianKind::Analytic(af) => (af.value)(t, x.coords.as_slice()),
        }
    }

    pub fn gradient(&self, t: f64, x: &PhasePoint) -> DVector<f64> {
        match &self.kind {
            HamiltonianKind::Quadratic(qf) => {
                qf.hess.at(t) * &x.coords + qf.lin.at(t)
            }
            HamiltonianKind::Analytic(af) => (af.grad)(t, x.coords.as_slice()),
        }
    }

    pub fn hessian(&self, t: f64, x: &PhasePoint) -> DMatrix<f64> {
        match &self.kind {
            HamiltonianKind::Quadratic(qf) => qf.hess.at(t),
            HamiltonianKind::Analytic(af) => (af.hess)(t, x.coords.as_slice()),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.kind, HamiltonianKind::Quadratic(_))
    }

    /// Largest |t| for which the short-time contraction argument is
    /// guaranteed: 2(e^{c1 t} - 1) < 1.
    pub fn contraction_horizon(&self) -> Option<f64> {
        self.c1_bound.map(|c1| {
            if c1 <= 0.0 {
                f64::INFINITY
            } else {
                (1.5f64).ln() / c1
            }
        })
    }

    /// Worst relative disagreement between the gradient/Hessian evaluators and
    /// central finite differences of the level below, over the given probes.
    pub fn derivative_consistency(&self, t: f64, probes: &[PhasePoint]) -> Result<f64> {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for x in probes {
            let dim = x.dim();
            let (_, g, hess) = self.eval(t, x)?;
            for i in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.coords[i] += h;
                xm.coords[i] -= h;
                let fd = (self.value(t, &xp) - self.value(t, &xm)) / (2.0 * h);
                let scale = g[i].abs().max(1.0);
                worst = worst.max((g[i] - fd).abs() / scale);
                let gp = self.gradient(t, &xp);
                let gm = self.gradient(t, &xm);
                for j in 0..dim {
                    let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                    let scale = hess[(j, i)].abs().max(1.0);
                    worst = worst.max((hess[(j, i)] - fd2).abs() / scale);
                }
            }
        }
        Ok(worst)
    }
}

/// Phase-space variable names for expressions: ["q","p"] or ["q1",..,"p1",..].
pub fn phase_var_names(dof: usize) -> Vec<String> {
    if dof == 1 {
        vec!["q".into(), "p".into()]
    } else {
        let mut v: Vec<String> = (1..=dof).map(|i| format!("q{i}")).collect();
        v.extend((1..=dof).map(|i| format!("p{i}")));
        v
    }
}

pub fn parse_phase_field(text: &str, dof: usize) -> Result<Field> {
    let names = phase_var_names(dof);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Field::parse(text, &refs)
}

fn hess_norm(m: &DMatrix<f64>) -> f64 {
    // spectral norm of a symmetric matrix = max |eigenvalue|
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |a, &l| a.max(l.abs()))
}

fn abs_max(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// WKB initial data: amplitude field and phase field with derivatives,
/// supported on a rectangular domain D0.
#[derive(Clone)]
pub struct InitialPhaseData {
    pub amplitude: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub phase: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub phase_grad: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
    pub phase_hess: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    pub domain: RectDomain,
}

/// An axis-aligned box in R^{2n}.
#[derive(Debug, Clone, PartialEq)]
pub struct RectDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RectDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(MwkbError::Scenario("empty or inverted domain box".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &PhasePoint) -> bool {
        x.coords
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&c, (&l, &h))| c >= l && c <= h)
    }

    pub fn center(&self) -> PhasePoint {
        PhasePoint::new(
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(&l, &h)| 0.5 * (l + h))
                .collect(),
        )
        .expect("finite box center")
    }
}

impl InitialPhaseData {
    /// amplitude = 1, phase = 0 (identity-symbol initial data).
    pub fn unit(domain: RectDomain) -> Self {
        let dim = domain.dim();
        Self {
            amplitude: Arc::new(|_x| 1.0),
            phase: Arc::new(|_x| 0.0),
            phase_grad: Arc::new(move |_x| DVector::zeros(dim)),
            phase_hess: Arc::new(move |_x| DMatrix::zeros(dim, dim)),
            domain,
        }
    }

    /// Gaussian amplitude exp(-|x-c|^2/(2 w^2)) with zero phase.
    pub fn gaussian_amplitude(center: Vec<f64>, width: f64, domain: RectDomain) -> Self {
        let dim = domain.dim();
        let c = center.clone();
        Self {
            amplitude: Arc::new(move |x| {
                let s: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                (-s / (2.0 * width * width)).exp()
            }),
            phase: Arc::new(|_x| 0.0),
            phase_grad: Arc::new(move |_x| DVector::zeros(dim)),
            phase_hess: Arc::new(move |_x| DMatrix::zeros(dim, dim)),
            domain,
        }
    }

    /// Builds from expression strings in the phase-space variables.
    pub fn from_expressions(
        amplitude: &str,
        phase: &str,
        dof: usize,
        domain: RectDomain,
    ) -> Result<Self> {
        let amp = parse_phase_field(amplitude, dof)?;
        let ph = parse_phase_field(phase, dof)?;
        let dim = 2 * dof;
        let grad_fields = ph.gradient();
        let hess_fields: Vec<Vec<Field>> = grad_fields.iter().map(|g| g.gradient()).collect();
        let gf = grad_fields;
        let hf = hess_fields;
        Ok(Self {
            amplitude: Arc::new(move |x| amp.eval(x)),
            phase: Arc::new(move |x| ph.eval(x)),
            phase_grad: Arc::new(move |x| {
                DVector::from_iterator(dim, gf.iter().map(|g| g.eval(x)))
            }),
            phase_hess: Arc::new(move |x| DMatrix::from_fn(dim, dim, |i, j| hf[i][j].eval(x))),
            domain,
        })
    }

    pub fn amplitude_at(&self, x: &PhasePoint) -> f64 {
        (self.amplitude)(x.coords.as_slice())
    }

    pub fn phase_at(&self, x: &PhasePoint) -> f64 {
        (self.phase)(x.coords.as_slice())
    }

    pub fn phase_grad_at(&self, x: &PhasePoint) -> DVector<f64> {
        (self.phase_grad)(x.coords.as_slice())
    }

    pub fn phase_hess_at(&self, x: &PhasePoint) -> DMatrix<f64> {
        (self.phase_hess)(x.coords.as_slice())
    }

    /// Worst relative disagreement between phase gradient and central finite
    /// differences over probes in D0.
    pub fn phase_consistency(&self, probes: &[PhasePoint]) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for x in probes {
            let g = self.phase_grad_at(x);
            for i in 0..x.dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.coords[i] += h;
                xm.coords[i] -= h;
                let fd = (self.phase_at(&xp) - self.phase_at(&xm)) / (2.0 * h);
                worst = worst.max((g[i] - fd).abs() / g[i].abs().max(1.0));
            }
        }
        worst
    }
}
