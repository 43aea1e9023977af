//! Assembly of the semiclassical fields: boundary-condition loops, their
//! symplectic-area phases, amplitudes and Maslov factors; the closed-form
//! quadratic evolution; Hamilton-Jacobi residuals; phase additivity and
//! affine covariance checks.
//!
//! Sign conventions follow the loop construction itself: the evolved phase
//! obeys d Phi/dt + H(x - J grad Phi/2) = 0 for the Schrodinger field and
//! d S/dt + H(x - J grad S/2) - H(x + J grad S/2) = 0 for the Heisenberg
//! field. Both are validated against the closed-form quadratic evolution and
//! the grid oracle.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bc::{
    solve_sheets, solve_single, BcOptions, BcSheet, PointClassification,
};
use crate::error::{MwkbError, Result};
use crate::flow::{flow, matrix_exp, quadratic_propagate, FlowOptions};
use crate::geometry::{
    chord_action, j_mul, polygon_phase, ArcData, LoopLabel, PhaseLoop, PhasePoint, Segment,
    TOL_GEOM,
};
use crate::grid::{GridAxes, GridMeta, PointClass, SheetValue, SymbolGrid};
use crate::hamiltonian::{Hamiltonian, InitialPhaseData};
use crate::sps::{EvolutionKind, LagrangianManifold};

/// How the Heisenberg phase is evaluated on grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseRoute {
    /// Four-segment loop with the int H(l)-H(r) correction (two flows).
    WRoute,
    /// Two-segment loop with the flow-translated chord (quadrature nodes).
    LRoute { nodes: usize },
}

#[derive(Debug, Clone)]
pub struct WkbOptions {
    pub bc: BcOptions,
    /// Manifold samples per axis for the multi-sheet scan.
    pub manifold_resolution: usize,
    pub phase_route: PhaseRoute,
    /// Emit alpha cos(S/hbar - pi m/2) instead of the complex exponential.
    pub cosine_mode: bool,
    /// Cross-check tolerance between the two Heisenberg phase routes.
    pub tol_route: f64,
}

impl Default for WkbOptions {
    fn default() -> Self {
        Self {
            bc: BcOptions::default(),
            manifold_resolution: 65,
            phase_route: PhaseRoute::WRoute,
            cosine_mode: false,
            tol_route: 1e-6,
        }
    }
}

/// Builds the boundary-condition loop for a solved sheet. Schrodinger sheets
/// get the three-sided loop (initial chord, left trajectory, closing chord);
/// Heisenberg sheets get the four-sided loop with the backward right
/// trajectory. All loops close to geometric tolerance by construction.
pub fn build_loop(sheet: &BcSheet) -> Result<PhaseLoop> {
    let lp = match sheet.kind {
        EvolutionKind::Schrodinger => PhaseLoop::new(
            vec![
                Segment::Chord(sheet.r0.clone(), sheet.l0.clone()),
                Segment::TrajectoryArc {
                    arc: sheet.left.arc_data(),
                    direction: 1,
                },
                Segment::Chord(sheet.l_t.clone(), sheet.r0.clone()),
            ],
            LoopLabel::SchrodingerLTilde,
        ),
        EvolutionKind::Heisenberg => {
            let right = sheet
                .right
                .as_ref()
                .expect("Heisenberg sheet carries a right trajectory");
            PhaseLoop::new(
                vec![
                    Segment::Chord(sheet.r0.clone(), sheet.l0.clone()),
                    Segment::TrajectoryArc {
                        arc: sheet.left.arc_data(),
                        direction: 1,
                    },
                    Segment::Chord(sheet.l_t.clone(), sheet.r_t.clone()),
                    Segment::TrajectoryArc {
                        arc: right.arc_data(),
                        direction: -1,
                    },
                ],
                LoopLabel::HeisenbergW,
            )
        }
    };
    lp.check_closed(TOL_GEOM)?;
    Ok(lp)
}

/// Two-segment Heisenberg loop: the final chord plus the flow-translated
/// image of the initial chord, whose action is evaluated by Gauss-Legendre
/// quadrature with one flow per node.
pub fn build_heisenberg_l_loop(
    h: &Hamiltonian,
    sheet: &BcSheet,
    nodes: usize,
    opts: &FlowOptions,
) -> Result<(PhaseLoop, f64)> {
    let gamma = flowed_chord_action(h, &sheet.r0, &sheet.l0, sheet.t, nodes, opts)?;
    let lp = PhaseLoop::new(
        vec![
            Segment::Chord(sheet.l_t.clone(), sheet.r_t.clone()),
            Segment::TrajectoryArc {
                arc: ArcData {
                    start: sheet.r_t.clone(),
                    end: sheet.l_t.clone(),
                    action: gamma,
                },
                direction: 1,
            },
        ],
        LoopLabel::HeisenbergL,
    );
    lp.check_closed(TOL_GEOM)?;
    let area = chord_action(&sheet.l_t, &sheet.r_t) + gamma;
    Ok((lp, area))
}

/// Gauss-Legendre nodes and weights on [0, 1], by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    let n = n.max(2);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess on [-1, 1]
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        xs[n - 1 - i] = 0.5 * (x + 1.0);
        ws[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

/// int p.dq along the time-t flow image of the chord from a to b.
fn flowed_chord_action(
    h: &Hamiltonian,
    a: &PhasePoint,
    b: &PhasePoint,
    t: f64,
    nodes: usize,
    opts: &FlowOptions,
) -> Result<f64> {
    let (xs, ws) = gauss_legendre_01(nodes);
    let d = &b.coords - &a.coords;
    let dof = a.dof();
    let mut total = 0.0;
    for (&xi, &w) in xs.iter().zip(&ws) {
        let c = PhasePoint::from_vector(&a.coords + xi * &d);
        let traj = flow(h, &c, t, opts)?;
        let g = traj.end();
        let dgd = traj.jacobi_end() * &d;
        let mut integrand = 0.0;
        for i in 0..dof {
            integrand += g.coords[dof + i] * dgd[i];
        }
        total += w * integrand;
    }
    Ok(total)
}

/// Schrodinger WKB phase: Phi0(x0) + loop area - int_0^t H(g(tau|l0)) dtau.
pub fn schrodinger_phase(sheet: &BcSheet, phase0: &InitialPhaseData) -> Result<f64> {
    debug_assert_eq!(sheet.kind, EvolutionKind::Schrodinger);
    let lp = build_loop(sheet)?;
    Ok(phase0.phase_at(&sheet.x0) + lp.area(TOL_GEOM)? - sheet.left.ham_integral_end())
}

/// Heisenberg WKB phase via the four-segment route:
/// S0(x0) + oint_W p.dq - int [H(l) - H(r)] dtau.
pub fn heisenberg_phase_w(sheet: &BcSheet, phase0: &InitialPhaseData) -> Result<f64> {
    debug_assert_eq!(sheet.kind, EvolutionKind::Heisenberg);
    let right = sheet.right.as_ref().expect("right trajectory");
    let lp = build_loop(sheet)?;
    Ok(phase0.phase_at(&sheet.x0) + lp.area(TOL_GEOM)?
        - (sheet.left.ham_integral_end() - right.ham_integral_end()))
}

/// Heisenberg WKB phase: the two-segment-loop value, cross-checked against
/// the four-segment route. Disagreement beyond `tol_route` is an internal
/// inconsistency (the two routes are related by an exact surface identity).
pub fn heisenberg_phase(
    h: &Hamiltonian,
    sheet: &BcSheet,
    phase0: &InitialPhaseData,
    nodes: usize,
    tol_route: f64,
    opts: &FlowOptions,
) -> Result<f64> {
    let (_, area_l) = build_heisenberg_l_loop(h, sheet, nodes, opts)?;
    let s_l = phase0.phase_at(&sheet.x0) + area_l;
    let s_w = heisenberg_phase_w(sheet, phase0)?;
    let defect = (s_l - s_w).abs();
    if defect > tol_route {
        return Err(MwkbError::PhaseRouteMismatch {
            defect,
            tol: tol_route,
        });
    }
    Ok(s_l)
}

/// Gradient of the evolved phase at the sheet's query point: J(l_t - r_t).
pub fn sheet_phase_gradient(sheet: &BcSheet) -> DVector<f64> {
    j_mul(&(&sheet.l_t.coords - &sheet.r_t.coords))
}

fn sheet_phase(
    h: &Hamiltonian,
    sheet: &BcSheet,
    phase0: &InitialPhaseData,
    route: PhaseRoute,
    tol_route: f64,
    opts: &FlowOptions,
) -> Result<f64> {
    match sheet.kind {
        EvolutionKind::Schrodinger => schrodinger_phase(sheet, phase0),
        EvolutionKind::Heisenberg => match route {
            PhaseRoute::WRoute => heisenberg_phase_w(sheet, phase0),
            PhaseRoute::LRoute { nodes } => {
                heisenberg_phase(h, sheet, phase0, nodes, tol_route, opts)
            }
        },
    }
}

fn sheet_amplitude(sheet: &BcSheet, phase0: &InitialPhaseData) -> f64 {
    sheet.det_m.abs().powf(-0.5) * phase0.amplitude_at(&sheet.x0)
}

/// Everything evaluated for one sheet at one point.
#[derive(Debug, Clone)]
pub struct EvaluatedSheet {
    pub sheet: BcSheet,
    pub phase: f64,
    pub amplitude: f64,
}

impl EvaluatedSheet {
    pub fn contribution(&self, hbar: f64, cosine_mode: bool) -> Complex64 {
        let arg = self.phase / hbar - std::f64::consts::FRAC_PI_2 * self.sheet.maslov as f64;
        if cosine_mode {
            Complex64::new(self.amplitude * arg.cos(), 0.0)
        } else {
            self.amplitude * Complex64::new(0.0, arg).exp()
        }
    }
}

/// Per-point evaluation through the single-sheet solver (contraction with a
/// Newton fallback); suited to sampled checks inside the single-sheet regime.
pub fn eval_point_single(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    kind: EvolutionKind,
    t: f64,
    x: &PhasePoint,
    opts: &WkbOptions,
) -> Result<EvaluatedSheet> {
    let sheet = solve_single(h, kind, phase0, x, t, &opts.bc)?;
    let phase = sheet_phase(h, &sheet, phase0, opts.phase_route, opts.tol_route, &opts.bc.flow)?;
    let amplitude = sheet_amplitude(&sheet, phase0);
    Ok(EvaluatedSheet {
        sheet,
        phase,
        amplitude,
    })
}

struct PointResult {
    class: PointClass,
    value: Complex64,
    sheets: Vec<(PhasePoint, SheetValue)>,
}

/// Assembles the Schrodinger semiclassical field on a grid.
pub fn u_semiclassical(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    t: f64,
    axes: GridAxes,
    opts: &WkbOptions,
) -> Result<SymbolGrid> {
    assemble(h, phase0, EvolutionKind::Schrodinger, t, axes, "u", opts)
}

/// Assembles the Heisenberg semiclassical field on a grid.
pub fn rho_semiclassical(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    t: f64,
    axes: GridAxes,
    opts: &WkbOptions,
) -> Result<SymbolGrid> {
    assemble(h, phase0, EvolutionKind::Heisenberg, t, axes, "rho", opts)
}

fn assemble(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    kind: EvolutionKind,
    t: f64,
    axes: GridAxes,
    meta_kind: &str,
    opts: &WkbOptions,
) -> Result<SymbolGrid> {
    let res = opts.manifold_resolution;
    let dim = phase0.domain.dim();
    let manifold = LagrangianManifold::sample(kind, phase0, vec![res; dim])?.advance(
        h,
        t,
        &opts.bc.flow,
    )?;
    let points: Vec<(usize, PhasePoint)> = (0..axes.len())
        .map(|idx| {
            let iq = idx / axes.np;
            let ip = idx % axes.np;
            (idx, PhasePoint::qp(axes.q(iq), axes.p(ip)))
        })
        .collect();

    let results: Result<Vec<PointResult>> = points
        .par_iter()
        .map(|(_, x)| {
            let class = solve_sheets(h, &manifold, x, t, &opts.bc)?;
            match class {
                PointClassification::Forbidden => Ok(PointResult {
                    class: PointClass::Forbidden,
                    value: Complex64::new(0.0, 0.0),
                    sheets: Vec::new(),
                }),
                PointClassification::Caustic => Ok(PointResult {
                    class: PointClass::Caustic,
                    value: Complex64::new(0.0, 0.0),
                    sheets: Vec::new(),
                }),
                PointClassification::NonFocal(sheets) => {
                    let mut value = Complex64::new(0.0, 0.0);
                    let mut svals = Vec::with_capacity(sheets.len());
                    for sheet in sheets {
                        let phase = sheet_phase(
                            h,
                            &sheet,
                            phase0,
                            opts.phase_route,
                            opts.tol_route,
                            &opts.bc.flow,
                        )?;
                        let amplitude = sheet_amplitude(&sheet, phase0);
                        let ev = EvaluatedSheet {
                            phase,
                            amplitude,
                            sheet,
                        };
                        value += ev.contribution(h.hbar, opts.cosine_mode);
                        svals.push((
                            ev.sheet.x0.clone(),
                            SheetValue {
                                sheet_id: 0,
                                phase,
                                amplitude,
                                maslov: ev.sheet.maslov as u32,
                            },
                        ));
                    }
                    Ok(PointResult {
                        class: PointClass::NonFocal,
                        value,
                        sheets: svals,
                    })
                }
            }
        })
        .collect();
    let mut results = results?;

    // continuation pass: propagate sheet ids from solved neighbors by root
    // proximity (row-major sweep)
    let match_tol = 2.0 * cell_scale(&manifold);
    let mut next_id: u32 = 0;
    for iq in 0..axes.nq {
        for ip in 0..axes.np {
            let idx = axes.index(iq, ip);
            let neighbor_roots: Vec<(PhasePoint, u32)> = {
                let mut v = Vec::new();
                if ip > 0 {
                    let nb = &results[axes.index(iq, ip - 1)];
                    v.extend(nb.sheets.iter().map(|(x0, sv)| (x0.clone(), sv.sheet_id)));
                }
                if iq > 0 {
                    let nb = &results[axes.index(iq - 1, ip)];
                    v.extend(nb.sheets.iter().map(|(x0, sv)| (x0.clone(), sv.sheet_id)));
                }
                v
            };
            let r = &mut results[idx];
            let mut used: Vec<u32> = Vec::new();
            for (x0, sv) in r.sheets.iter_mut() {
                let best = neighbor_roots
                    .iter()
                    .filter(|(_, id)| !used.contains(id))
                    .map(|(nx0, id)| ((&nx0.coords - &x0.coords).norm(), *id))
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                match best {
                    Some((d, id)) if d < match_tol => {
                        sv.sheet_id = id;
                        used.push(id);
                    }
                    _ => {
                        sv.sheet_id = next_id;
                        used.push(next_id);
                        next_id += 1;
                    }
                }
            }
        }
    }

    let meta = GridMeta {
        t,
        hbar: h.hbar,
        kind: meta_kind.to_string(),
        scenario_hash: String::new(),
    };
    let mut grid = SymbolGrid::zeros(axes, meta);
    let mut sheets = vec![Vec::new(); grid.axes.len()];
    for (idx, r) in results.into_iter().enumerate() {
        grid.values[idx] = r.value;
        grid.class[idx] = r.class;
        sheets[idx] = r.sheets.into_iter().map(|(_, sv)| sv).collect();
    }
    grid.sheets = Some(sheets);
    Ok(grid)
}

fn cell_scale(manifold: &LagrangianManifold) -> f64 {
    let dim = manifold.domain.dim();
    (0..dim)
        .map(|a| {
            (manifold.domain.hi[a] - manifold.domain.lo[a])
                / (manifold.resolution[a] - 1).max(1) as f64
        })
        .fold(0.0f64, f64::max)
}

/// Closed-form quadratic Schrodinger symbol data at one time.
pub struct QuadraticExactU {
    pub k: DMatrix<f64>,
    pub f: DVector<f64>,
    /// quadratic form matrix J(K-I)(K+I)^{-1} (symmetric)
    pub quad: DMatrix<f64>,
    /// linear coefficient 2 J K (K+I)^{-1} F
    pub lin: DVector<f64>,
    /// constant fixed by the loop route at a reference point
    pub constant: f64,
    pub amplitude: f64,
    pub maslov: usize,
    pub det_kpi: f64,
}

impl QuadraticExactU {
    pub fn phase(&self, x: &PhasePoint) -> f64 {
        x.coords.dot(&(&self.quad * &x.coords)) + self.lin.dot(&x.coords) + self.constant
    }

    pub fn value(&self, x: &PhasePoint, hbar: f64) -> Complex64 {
        let arg = self.phase(x) / hbar - std::f64::consts::FRAC_PI_2 * self.maslov as f64;
        self.amplitude * Complex64::new(0.0, arg).exp()
    }

    pub fn root(&self, x: &PhasePoint) -> PhasePoint {
        let rhs = 2.0 * &x.coords - &self.k * &self.f;
        let kpi = &self.k + DMatrix::<f64>::identity(self.k.nrows(), self.k.nrows());
        PhasePoint::from_vector(kpi.lu().solve(&rhs).expect("non-caustic time"))
    }
}

/// Builds the closed-form quadratic U(t,x) data; errors at caustic times
/// where det(K+I) vanishes.
pub fn quadratic_exact_u(
    h: &Hamiltonian,
    s: f64,
    t: f64,
    opts: &FlowOptions,
) -> Result<QuadraticExactU> {
    let n2 = 2 * h.dof;
    let prop = quadratic_propagate(h, s, t, opts)?;
    let eye = DMatrix::<f64>::identity(n2, n2);
    let kpi = &prop.k + &eye;
    let det_kpi = kpi.determinant();
    if det_kpi.abs() < 1e-9 {
        return Err(MwkbError::Caustic {
            det: det_kpi,
            tol: 1e-9,
        });
    }
    let kpi_lu = kpi.clone().lu();
    let kmi = &prop.k - &eye;
    let sol = kpi_lu.solve(&kmi).expect("det checked");
    let mut quad = DMatrix::zeros(n2, n2);
    for c in 0..n2 {
        let col = j_mul(&DVector::from_column_slice(sol.column(c).as_slice()));
        quad.set_column(c, &col);
    }
    // symmetrize against rounding
    quad = 0.5 * (&quad + quad.transpose());
    let kf = &prop.k * kpi_lu.solve(&prop.f).expect("det checked");
    let lin = 2.0 * j_mul(&kf);

    // constant from the loop route at the reference point x = 0
    let x_ref = PhasePoint::zeros(h.dof);
    let rhs = -(&prop.k * &prop.f);
    let x0 = PhasePoint::from_vector(kpi_lu.solve(&rhs).expect("det checked"));
    let traj = flow(h, &x0, t - s, opts)?;
    let loop_phase = traj.action_end() + chord_action(&traj.end(), &x0)
        - traj.ham_integral_end();
    let quad_part = x_ref.coords.dot(&(&quad * &x_ref.coords)) + lin.dot(&x_ref.coords);
    let constant = loop_phase - quad_part;

    // Maslov index from determinant events of (K(tau)+I)/2 along s -> t
    let maslov = quadratic_schrodinger_maslov(h, s, t, opts)?;

    let amplitude = 2.0f64.powi(h.dof as i32) * det_kpi.abs().powf(-0.5);
    Ok(QuadraticExactU {
        k: prop.k,
        f: prop.f,
        quad,
        lin,
        constant,
        amplitude,
        maslov,
        det_kpi,
    })
}

fn quadratic_schrodinger_maslov(
    h: &Hamiltonian,
    s: f64,
    t: f64,
    opts: &FlowOptions,
) -> Result<usize> {
    let n2 = 2 * h.dof;
    let eye = DMatrix::<f64>::identity(n2, n2);
    // cache constant-coefficient exponentials
    let qf = match &h.kind {
        crate::hamiltonian::HamiltonianKind::Quadratic(qf) => qf.clone(),
        _ => unreachable!("caller checks quadratic"),
    };
    let grad_at: Box<dyn Fn(f64) -> DMatrix<f64>> = if qf.hess.is_constant() {
        let hess = qf.hess.at(0.0);
        let mut a = DMatrix::zeros(n2, n2);
        for c in 0..n2 {
            a.set_column(c, &j_mul(&DVector::from_column_slice(hess.column(c).as_slice())));
        }
        let eye = eye.clone();
        Box::new(move |tau: f64| 0.5 * (matrix_exp(&(&a * (tau - s))) + &eye))
    } else {
        let opts = opts.clone();
        let h = h.clone();
        let eye = eye.clone();
        Box::new(move |tau: f64| {
            let prop = quadratic_propagate(&h, s, tau, &opts).expect("propagator");
            0.5 * (&prop.k + &eye)
        })
    };
    crate::bc::count_det_events(&*grad_at, s, t, 600)
}

/// Closed-form quadratic Heisenberg symbol: rho(t,x) = rho0(x0(t,x)) with
/// x0 the backward flow; det grad M = 1 and no caustics.
pub struct QuadraticExactRho {
    pub k: DMatrix<f64>,
    pub f: DVector<f64>,
}

impl QuadraticExactRho {
    pub fn root(&self, x: &PhasePoint) -> PhasePoint {
        let kinv = self.k.clone().lu().solve(&x.coords).expect("symplectic K");
        PhasePoint::from_vector(kinv - &self.f)
    }

    pub fn value(&self, phase0: &InitialPhaseData, x: &PhasePoint, hbar: f64) -> Complex64 {
        let x0 = self.root(x);
        let s0 = phase0.phase_at(&x0);
        phase0.amplitude_at(&x0) * Complex64::new(0.0, s0 / hbar).exp()
    }
}

pub fn quadratic_exact_rho(h: &Hamiltonian, s: f64, t: f64, opts: &FlowOptions) -> Result<QuadraticExactRho> {
    let prop = quadratic_propagate(h, s, t, opts)?;
    Ok(QuadraticExactRho {
        k: prop.k,
        f: prop.f,
    })
}

/// Masked Hamilton-Jacobi residual field computed from three phase grids at
/// t - dt, t, t + dt by central differences.
pub struct HjResidualField {
    pub axes: GridAxes,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl HjResidualField {
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold(0.0f64, |a, (v, _)| a.max(v.abs()))
    }
}

/// Residuals: Schrodinger d_t Phi + H(x - J grad Phi / 2); Heisenberg
/// d_t S + H(x - J grad S / 2) - H(x + J grad S / 2). Points whose stencil
/// crosses a caustic, a Forbidden zone or a sheet-count change are masked out.
pub fn hj_residual(
    before: &SymbolGrid,
    at: &SymbolGrid,
    after: &SymbolGrid,
    dt: f64,
    h: &Hamiltonian,
    kind: EvolutionKind,
) -> Result<HjResidualField> {
    let axes = at.axes.clone();
    let sheets_b = before
        .sheets
        .as_ref()
        .ok_or_else(|| MwkbError::Scenario("phase sheets missing".into()))?;
    let sheets_a = at.sheets.as_ref().unwrap();
    let sheets_f = after.sheets.as_ref().unwrap();

    let phase_of = |sheets: &Vec<Vec<SheetValue>>, grid: &SymbolGrid, idx: usize| -> Option<f64> {
        if grid.class[idx] != PointClass::NonFocal || sheets[idx].len() != 1 {
            None
        } else {
            Some(sheets[idx][0].phase)
        }
    };

    let mut values = vec![0.0; axes.len()];
    let mut mask = vec![false; axes.len()];
    for iq in 1..axes.nq - 1 {
        for ip in 1..axes.np - 1 {
            let idx = axes.index(iq, ip);
            let stencil = [
                phase_of(sheets_a, at, idx),
                phase_of(sheets_a, at, axes.index(iq + 1, ip)),
                phase_of(sheets_a, at, axes.index(iq - 1, ip)),
                phase_of(sheets_a, at, axes.index(iq, ip + 1)),
                phase_of(sheets_a, at, axes.index(iq, ip - 1)),
                phase_of(sheets_b, before, idx),
                phase_of(sheets_f, after, idx),
            ];
            if stencil.iter().any(Option::is_none) {
                continue;
            }
            let v: Vec<f64> = stencil.into_iter().map(Option::unwrap).collect();
            let dphi_dq = (v[1] - v[2]) / (2.0 * axes.dq);
            let dphi_dp = (v[3] - v[4]) / (2.0 * axes.dp);
            let dphi_dt = (v[6] - v[5]) / (2.0 * dt);
            let grad = DVector::from_vec(vec![dphi_dq, dphi_dp]);
            let jg = j_mul(&grad);
            let x = PhasePoint::qp(axes.q(iq), axes.p(ip));
            let l = PhasePoint::from_vector(&x.coords - 0.5 * &jg);
            let res = match kind {
                EvolutionKind::Schrodinger => dphi_dt + h.value(at.meta.t, &l),
                EvolutionKind::Heisenberg => {
                    let r = PhasePoint::from_vector(&x.coords + 0.5 * &jg);
                    dphi_dt + h.value(at.meta.t, &l) - h.value(at.meta.t, &r)
                }
            };
            values[idx] = res;
            mask[idx] = true;
        }
    }
    Ok(HjResidualField { axes, values, mask })
}

/// Defects of the loop-phase additivity identities at one (t1, t2, x).
#[derive(Debug, Clone)]
pub struct AdditivityReport {
    /// three-sided Schrodinger loops: phi(t1+t2) - phi(t1) - phi(t2)
    pub schrodinger_defect: Option<f64>,
    /// four-sided Heisenberg loops: A(t1+t2) - A(t1) - A(t2)
    pub heisenberg_defect: Option<f64>,
    /// two-sided loops with the triangle-area correction
    pub marinov_defect: Option<f64>,
    /// left/right split of the four-sided loop with the quadrangle area
    pub w_split_defect: Option<f64>,
}

/// Verifies the additivity identities along the boundary-condition chain of
/// the (t1 + t2) solve. Schrodinger identities need Phi0 = 0 for the
/// two-sided (Marinov) variant; the others accept any initial phase.
pub fn additivity_check(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    kind: EvolutionKind,
    t1: f64,
    t2: f64,
    x: &PhasePoint,
    opts: &BcOptions,
) -> Result<AdditivityReport> {
    let t12 = t1 + t2;
    let sheet = solve_single(h, kind, phase0, x, t12, opts)?;
    let fl = &opts.flow;
    let mut report = AdditivityReport {
        schrodinger_defect: None,
        heisenberg_defect: None,
        marinov_defect: None,
        w_split_defect: None,
    };
    match kind {
        EvolutionKind::Schrodinger => {
            let l0 = sheet.l0.clone();
            let r0 = sheet.r0.clone();
            let tr1 = flow(h, &l0, t1, fl)?;
            let l1 = tr1.end();
            let tr12 = flow(h, &l1, t2, fl)?;
            let l2 = tr12.end();
            // phi(t1+t2): chord(r0,l0) + T+(l0,l2) + chord(l2,r0)
            let a12 = chord_action(&r0, &l0)
                + (tr1.action_end() + tr12.action_end())
                + chord_action(&l2, &r0);
            let a1 = chord_action(&r0, &l0) + tr1.action_end() + chord_action(&l1, &r0);
            let a2 = chord_action(&r0, &l1) + tr12.action_end() + chord_action(&l2, &r0);
            report.schrodinger_defect = Some(a12 - a1 - a2);

            // two-sided loops (Phi0 = 0 sector): X(t) = T+(x0, g(t|x0)) + C(g,x0)
            if phase0.phase_grad_at(&sheet.x0).norm() < 1e-12 {
                let x0 = sheet.x0.clone();
                let x1m = PhasePoint::from_vector(0.5 * (&x0.coords + &l1.coords));
                let x2m = PhasePoint::from_vector(0.5 * (&l1.coords + &l2.coords));
                let xm = PhasePoint::from_vector(0.5 * (&x0.coords + &l2.coords));
                let x12_loop =
                    tr1.action_end() + tr12.action_end() + chord_action(&l2, &x0);
                let x1_loop = tr1.action_end() + chord_action(&l1, &x0);
                let x2_loop = tr12.action_end() + chord_action(&l2, &l1);
                let p3 = polygon_phase(&[xm.clone(), x2m, x1m])?;
                report.marinov_defect = Some(x12_loop - x1_loop - x2_loop - p3);
            }
        }
        EvolutionKind::Heisenberg => {
            let l0 = sheet.l0.clone();
            let r0 = sheet.r0.clone();
            let trl1 = flow(h, &l0, t1, fl)?;
            let trr1 = flow(h, &r0, t1, fl)?;
            let l1 = trl1.end();
            let r1 = trr1.end();
            let trl2 = flow(h, &l1, t2, fl)?;
            let trr2 = flow(h, &r1, t2, fl)?;
            let l2 = trl2.end();
            let r2 = trr2.end();
            let a12 = chord_action(&r0, &l0)
                + (trl1.action_end() + trl2.action_end())
                + chord_action(&l2, &r2)
                - (trr1.action_end() + trr2.action_end());
            let a1 = chord_action(&r0, &l0) + trl1.action_end() + chord_action(&l1, &r1)
                - trr1.action_end();
            let a2 = chord_action(&r1, &l1) + trl2.action_end() + chord_action(&l2, &r2)
                - trr2.action_end();
            report.heisenberg_defect = Some(a12 - a1 - a2);

            // W = X_l - X_r + P4(x, x_l, x0, x_r)
            let xl = PhasePoint::from_vector(0.5 * (&l0.coords + &l2.coords));
            let xr = PhasePoint::from_vector(0.5 * (&r0.coords + &r2.coords));
            let x_l_loop = trl1.action_end() + trl2.action_end() + chord_action(&l2, &l0);
            let x_r_loop = trr1.action_end() + trr2.action_end() + chord_action(&r2, &r0);
            let p4 = polygon_phase(&[x.clone(), xl, sheet.x0.clone(), xr])?;
            report.w_split_defect = Some(a12 - (x_l_loop - x_r_loop + p4));
        }
    }
    Ok(report)
}

/// Builds the affine-transformed problem (H, beta0, alpha0 composed with the
/// inverse map) and compares the transformed field at sampled points against
/// the original field at the mapped points. Both sides go through the same
/// short-time per-point evaluation.
pub fn covariance_check(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    kind: EvolutionKind,
    map: &crate::geometry::AffineMap,
    t: f64,
    samples: &[PhasePoint],
    opts: &WkbOptions,
) -> Result<f64> {
    let (h_v, phase0_v) = transform_problem(h, phase0, map)?;
    let mut worst = 0.0f64;
    for x in samples {
        let transformed = eval_point_single(&h_v, &phase0_v, kind, t, x, opts)?;
        let mapped = map.apply_inverse(x);
        let original = eval_point_single(h, phase0, kind, t, &mapped, opts)?;
        let dv = (transformed.contribution(h.hbar, false)
            - original.contribution(h.hbar, false))
        .norm();
        worst = worst.max(dv);
    }
    Ok(worst)
}

/// (H o A^{-1}, beta0 o A^{-1}, alpha0 o A^{-1}) with exact chain-rule
/// derivatives; the domain box maps to the bounding box of the image.
pub fn transform_problem(
    h: &Hamiltonian,
    phase0: &InitialPhaseData,
    map: &crate::geometry::AffineMap,
) -> Result<(Hamiltonian, InitialPhaseData)> {
    let r = map.r.clone();
    let rt = r.transpose();
    let h_inner = h.clone();
    let map_c = map.clone();
    let value: crate::hamiltonian::ScalarFn = {
        let map = map_c.clone();
        let h = h_inner.clone();
        std::sync::Arc::new(move |t, x: &[f64]| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            h.value(t, &map.apply_inverse(&pt))
        })
    };
    let grad: crate::hamiltonian::GradFn = {
        let map = map_c.clone();
        let h = h_inner.clone();
        let rt = rt.clone();
        std::sync::Arc::new(move |t, x: &[f64]| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            &rt * h.gradient(t, &map.apply_inverse(&pt))
        })
    };
    let hess: crate::hamiltonian::HessFn = {
        let map = map_c.clone();
        let h = h_inner.clone();
        let rt = rt.clone();
        let r = r.clone();
        std::sync::Arc::new(move |t, x: &[f64]| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            &rt * h.hessian(t, &map.apply_inverse(&pt)) * &r
        })
    };
    let h_v = Hamiltonian::analytic(value, grad, hess, h.dof, h.hbar, h.c1_bound);

    // transformed domain: bounding box of A(D0) = R^{-1}(corner - x0)
    let dim = phase0.domain.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for corner in 0..(1usize << dim) {
        let coords: Vec<f64> = (0..dim)
            .map(|a| {
                if corner >> a & 1 == 1 {
                    phase0.domain.hi[a]
                } else {
                    phase0.domain.lo[a]
                }
            })
            .collect();
        let mapped = map.apply(&PhasePoint::new(coords)?);
        for a in 0..dim {
            lo[a] = lo[a].min(mapped.coords[a]);
            hi[a] = hi[a].max(mapped.coords[a]);
        }
    }
    let amp0 = phase0.amplitude.clone();
    let ph0 = phase0.phase.clone();
    let pg0 = phase0.phase_grad.clone();
    let phh0 = phase0.phase_hess.clone();
    let m1 = map_c.clone();
    let m2 = map_c.clone();
    let m3 = map_c.clone();
    let m4 = map_c;
    let rt2 = rt.clone();
    let rt3 = rt.clone();
    let r3 = r.clone();
    let phase0_v = InitialPhaseData {
        amplitude: std::sync::Arc::new(move |x| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            amp0(m1.apply_inverse(&pt).coords.as_slice())
        }),
        phase: std::sync::Arc::new(move |x| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            ph0(m2.apply_inverse(&pt).coords.as_slice())
        }),
        phase_grad: std::sync::Arc::new(move |x| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            &rt2 * pg0(m3.apply_inverse(&pt).coords.as_slice())
        }),
        phase_hess: std::sync::Arc::new(move |x| {
            let pt = PhasePoint::new(x.to_vec()).expect("finite");
            &rt3 * phh0(m4.apply_inverse(&pt).coords.as_slice()) * &r3
        }),
        domain: crate::hamiltonian::RectDomain::new(lo, hi)?,
    };
    Ok((h_v, phase0_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::RectDomain;
    use std::f64::consts::PI;

    fn domain() -> RectDomain {
        RectDomain::new(vec![-8.0, -8.0], vec![8.0, 8.0]).unwrap()
    }

    fn zero_phase() -> InitialPhaseData {
        InitialPhaseData::unit(domain())
    }

    fn ho() -> Hamiltonian {
        Hamiltonian::harmonic_oscillator(1, 1.0)
    }

    #[test]
    fn schrodinger_phase_matches_ho_closed_form() {
        // Phi(t,x) = -tan(t/2) |x|^2
        let h = ho();
        let ipd = zero_phase();
        let opts = BcOptions::default();
        for t in [0.3, 0.8, PI / 2.0] {
            for (q, p) in [(1.0, 0.0), (0.4, -0.7), (1.3, 2.1)] {
                let x = PhasePoint::qp(q, p);
                let sheet =
                    solve_single(&h, EvolutionKind::Schrodinger, &ipd, &x, t, &opts).unwrap();
                let phi = schrodinger_phase(&sheet, &ipd).unwrap();
                let exact = -(t / 2.0).tan() * (q * q + p * p);
                assert!((phi - exact).abs() < 1e-8, "t={t} x=({q},{p}): {phi} vs {exact}");
                let amp = sheet_amplitude(&sheet, &ipd);
                assert!((amp - 1.0 / (t / 2.0).cos().abs()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn schrodinger_unitarity_phase_odd_in_t() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = zero_phase();
        let opts = BcOptions::default();
        let x = PhasePoint::qp(0.7, -0.2);
        for t in [0.2, 0.5] {
            let sp = solve_single(&h, EvolutionKind::Schrodinger, &ipd, &x, t, &opts).unwrap();
            let sm = solve_single(&h, EvolutionKind::Schrodinger, &ipd, &x, -t, &opts).unwrap();
            let pp = schrodinger_phase(&sp, &ipd).unwrap();
            let pm = schrodinger_phase(&sm, &ipd).unwrap();
            assert!((pp + pm).abs() < 1e-7, "t={t}: {pp} vs {pm}");
            let ap = sheet_amplitude(&sp, &ipd);
            let am = sheet_amplitude(&sm, &ipd);
            assert!((ap - am).abs() < 1e-7);
        }
    }

    #[test]
    fn heisenberg_phase_routes_agree() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = InitialPhaseData::from_expressions(
            "1",
            "0.3*sin(q)*cos(p)",
            1,
            domain(),
        )
        .unwrap();
        let opts = BcOptions::default();
        for (q, p) in [(0.4, 0.3), (-0.2, 0.9), (1.1, -0.5)] {
            let x = PhasePoint::qp(q, p);
            let sheet =
                solve_single(&h, EvolutionKind::Heisenberg, &ipd, &x, 0.8, &opts).unwrap();
            let s = heisenberg_phase(&h, &sheet, &ipd, 80, 1e-6, &opts.flow).unwrap();
            let s_w = heisenberg_phase_w(&sheet, &ipd).unwrap();
            assert!((s - s_w).abs() < 1e-7, "{s} vs {s_w}");
        }
    }

    #[test]
    fn heisenberg_zero_phase_stays_zero() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = zero_phase();
        let opts = BcOptions::default();
        let x = PhasePoint::qp(0.8, 0.3);
        let sheet = solve_single(&h, EvolutionKind::Heisenberg, &ipd, &x, 1.4, &opts).unwrap();
        let s = heisenberg_phase_w(&sheet, &ipd).unwrap();
        assert!(s.abs() < 1e-9, "S = {s}");
    }

    #[test]
    fn quadratic_heisenberg_phase_is_initial_phase() {
        let h = Hamiltonian::driven_oscillator([0.5, 0.0], 1.0);
        let ipd = InitialPhaseData::from_expressions("1", "0.2*q*p", 1, domain()).unwrap();
        let opts = BcOptions::default();
        let x = PhasePoint::qp(0.4, -0.1);
        let t = 0.7;
        let sheet = solve_single(&h, EvolutionKind::Heisenberg, &ipd, &x, t, &opts).unwrap();
        let s = heisenberg_phase_w(&sheet, &ipd).unwrap();
        assert!((s - ipd.phase_at(&sheet.x0)).abs() < 1e-8);
        assert!((sheet.det_m - 1.0).abs() < 1e-8);
    }

    #[test]
    fn quadratic_exact_u_matches_loop_route() {
        let h = Hamiltonian::driven_oscillator([0.7, 0.0], 1.0);
        let ipd = zero_phase();
        let cf = quadratic_exact_u(&h, 0.0, 0.9, &FlowOptions::default()).unwrap();
        let opts = BcOptions::default();
        for (q, p) in [(0.3, -0.5), (1.0, 0.2), (-0.6, 0.9)] {
            let x = PhasePoint::qp(q, p);
            let sheet =
                solve_single(&h, EvolutionKind::Schrodinger, &ipd, &x, 0.9, &opts).unwrap();
            let phi = schrodinger_phase(&sheet, &ipd).unwrap();
            assert!((phi - cf.phase(&x)).abs() < 1e-8, "{phi} vs {}", cf.phase(&x));
            assert!((&cf.root(&x).coords - &sheet.x0.coords).norm() < 1e-8);
        }
    }

    #[test]
    fn quadratic_exact_rho_is_transport() {
        let h = Hamiltonian::driven_oscillator([0.0, 0.0], 1.0);
        let ipd = InitialPhaseData::gaussian_amplitude(vec![1.0, 0.0], 1.0, domain());
        let cf = quadratic_exact_rho(&h, 0.0, 1.0, &FlowOptions::default()).unwrap();
        let x = PhasePoint::qp(0.5, 0.5);
        let back = flow(&h, &x, -1.0, &FlowOptions::default()).unwrap().end();
        let v = cf.value(&ipd, &x, 1.0);
        assert!((v.re - ipd.amplitude_at(&back)).abs() < 1e-9);
        assert!(v.im.abs() < 1e-12);
    }

    #[test]
    fn additivity_ho_small_times() {
        let h = ho();
        let ipd = zero_phase();
        let rep = additivity_check(
            &h,
            &ipd,
            EvolutionKind::Schrodinger,
            0.4,
            0.4,
            &PhasePoint::qp(0.5, 0.2),
            &BcOptions::default(),
        )
        .unwrap();
        assert!(rep.schrodinger_defect.unwrap().abs() < 1e-9);
        assert!(rep.marinov_defect.unwrap().abs() < 1e-9);

        let rep = additivity_check(
            &h,
            &ipd,
            EvolutionKind::Heisenberg,
            0.4,
            0.4,
            &PhasePoint::qp(0.5, 0.2),
            &BcOptions::default(),
        )
        .unwrap();
        assert!(rep.heisenberg_defect.unwrap().abs() < 1e-9);
        assert!(rep.w_split_defect.unwrap().abs() < 1e-9);
    }

    #[test]
    fn additivity_zero_second_leg() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = InitialPhaseData::from_expressions("1", "0.2*sin(q+0.4*p)", 1, domain()).unwrap();
        let rep = additivity_check(
            &h,
            &ipd,
            EvolutionKind::Heisenberg,
            0.3,
            0.0,
            &PhasePoint::qp(0.4, 0.1),
            &BcOptions::default(),
        )
        .unwrap();
        assert!(
            rep.heisenberg_defect.unwrap().abs() < 1e-9,
            "heisenberg {:?}",
            rep.heisenberg_defect
        );
        assert!(
            rep.w_split_defect.unwrap().abs() < 1e-9,
            "w_split {:?}",
            rep.w_split_defect
        );
    }

    #[test]
    fn covariance_translation_and_rotation() {
        let h = ho();
        let ipd = zero_phase();
        let opts = WkbOptions::default();
        let samples: Vec<PhasePoint> = [(0.3, 0.2), (-0.4, 0.6), (0.9, -0.1)]
            .iter()
            .map(|&(q, p)| PhasePoint::qp(q, p))
            .collect();
        let tr = crate::geometry::AffineMap::new(
            DMatrix::identity(2, 2),
            PhasePoint::qp(0.7, -0.3),
        )
        .unwrap();
        let dev = covariance_check(&h, &ipd, EvolutionKind::Schrodinger, &tr, 0.5, &samples, &opts)
            .unwrap();
        assert!(dev < 1e-7, "translation deviation {dev}");

        let ang = 0.6f64;
        let rot = crate::geometry::AffineMap::new(
            DMatrix::from_row_slice(2, 2, &[ang.cos(), -ang.sin(), ang.sin(), ang.cos()]),
            PhasePoint::zeros(1),
        )
        .unwrap();
        let dev = covariance_check(&h, &ipd, EvolutionKind::Schrodinger, &rot, 0.5, &samples, &opts)
            .unwrap();
        assert!(dev < 1e-7, "rotation deviation {dev}");

        let id = crate::geometry::AffineMap::identity(1);
        let dev = covariance_check(&h, &ipd, EvolutionKind::Heisenberg, &id, 0.5, &samples, &opts)
            .unwrap();
        assert!(dev < 1e-12);
    }

    #[test]
    fn loop_zero_at_t_zero() {
        let h = Hamiltonian::pendulum(1.0);
        let ipd = InitialPhaseData::from_expressions("1", "0.2*sin(q)", 1, domain()).unwrap();
        let sheet = solve_single(
            &h,
            EvolutionKind::Heisenberg,
            &ipd,
            &PhasePoint::qp(0.3, 0.4),
            0.0,
            &BcOptions::default(),
        )
        .unwrap();
        let lp = build_loop(&sheet).unwrap();
        assert!(lp.area(TOL_GEOM).unwrap().abs() < 1e-12);
    }
}
