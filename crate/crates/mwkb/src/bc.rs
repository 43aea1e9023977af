//! The two-point boundary-condition problem: find every x0 with
//! M_t(x0) = x, where M_t maps an initial manifold point to the midpoint of
//! its evolved left/right images. Short times use the contraction map
//! T(x') = x + x' - M_t(x'); long times scan an advanced manifold and polish
//! candidates with damped Newton. Emitted sheets carry determinants and
//! Maslov indices.

use nalgebra::{DMatrix, DVector};

use crate::error::{MwkbError, Result};
use crate::flow::{flow, FlowOptions, Trajectory};
use crate::geometry::{j_mul, PhasePoint};
use crate::hamiltonian::{Hamiltonian, InitialPhaseData};
use crate::sps::{EvolutionKind, LagrangianManifold, SpsPoint};

#[derive(Debug, Clone)]
pub struct BcOptions {
    /// Forward-check residual tolerance on |M_t(x0) - x|.
    pub tol_bc: f64,
    /// Roots closer than this are the same sheet.
    pub tol_dedup: f64,
    /// Relative determinant threshold (vs the sample median) for Caustic.
    pub tol_caustic: f64,
    pub max_fixed_point_iter: usize,
    pub max_newton_iter: usize,
    /// Minimum number of continuation nodes for the Maslov march.
    pub maslov_nodes: usize,
    pub flow: FlowOptions,
}

impl Default for BcOptions {
    fn default() -> Self {
        Self {
            tol_bc: 1e-9,
            tol_dedup: 1e-8,
            tol_caustic: 1e-6,
            max_fixed_point_iter: 400,
            max_newton_iter: 60,
            maslov_nodes: 600,
            flow: FlowOptions::default(),
        }
    }
}

/// Everything the midpoint map produces at one initial point.
#[derive(Debug, Clone)]
pub struct MidpointData {
    pub l0: PhasePoint,
    pub r0: PhasePoint,
    pub l_t: PhasePoint,
    pub r_t: PhasePoint,
    pub midpoint: PhasePoint,
    pub grad_m: DMatrix<f64>,
    pub left: Trajectory,
    /// None for the Schrodinger problem (the r-motion is constant).
    pub right: Option<Trajectory>,
}

/// Left/right lift of a base point: l' = x' - J grad beta0(x')/2, r' = x' + ...
pub fn lift(phase0: &InitialPhaseData, xp: &PhasePoint) -> (PhasePoint, PhasePoint) {
    let jg = j_mul(&phase0.phase_grad_at(xp));
    (
        PhasePoint::from_vector(&xp.coords - 0.5 * &jg),
        PhasePoint::from_vector(&xp.coords + 0.5 * &jg),
    )
}

/// Evaluates M_t and grad M_t at x' by running the composed flows.
pub fn midpoint_data(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    xp: &PhasePoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<MidpointData> {
    let (l0, r0) = lift(phase0, xp);
    let n2 = xp.dim();
    let eye = DMatrix::<f64>::identity(n2, n2);
    let hess0 = phase0.phase_hess_at(xp);
    // I -+ J beta0''/2
    let mut jh = DMatrix::zeros(n2, n2);
    for c in 0..n2 {
        let col = j_mul(&DVector::from_column_slice(hess0.column(c).as_slice()));
        jh.set_column(c, &col);
    }
    let dl = &eye - 0.5 * &jh;
    let dr = &eye + 0.5 * &jh;

    let left = flow(h, &l0, t, opts)?;
    let l_t = left.end();
    match kind {
        EvolutionKind::Schrodinger => {
            let midpoint = PhasePoint::from_vector(0.5 * (&l_t.coords + &r0.coords));
            let grad_m = 0.5 * (left.jacobi_end() * dl + dr);
            Ok(MidpointData {
                l0,
                r_t: r0.clone(),
                r0,
                l_t,
                midpoint,
                grad_m,
                left,
                right: None,
            })
        }
        EvolutionKind::Heisenberg => {
            let right = flow(h, &r0, t, opts)?;
            let r_t = right.end();
            let midpoint = PhasePoint::from_vector(0.5 * (&l_t.coords + &r_t.coords));
            let grad_m = 0.5 * (left.jacobi_end() * dl + right.jacobi_end() * dr);
            Ok(MidpointData {
                l0,
                r0,
                l_t,
                r_t,
                midpoint,
                grad_m,
                left,
                right: Some(right),
            })
        }
    }
}

/// M_t(x').
pub fn midpoint_map(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    xp: &PhasePoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<PhasePoint> {
    Ok(midpoint_data(h, kind, phase0, xp, t, opts)?.midpoint)
}

/// grad M_t(x') from the Jacobi fields of the composed flows.
pub fn midpoint_jacobian(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    xp: &PhasePoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<DMatrix<f64>> {
    Ok(midpoint_data(h, kind, phase0, xp, t, opts)?.grad_m)
}

/// det of the secondary-space bracket {x(t), eta}_2 at (x', grad beta0(x')),
/// evaluated by central finite differences of the composed flow. Equals
/// det grad M_t(x') and serves as its independent check.
pub fn amplitude_bracket(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    xp: &PhasePoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<f64> {
    let n2 = xp.dim();
    let y0 = phase0.phase_grad_at(xp);
    let fd = 1e-6;
    // A = dx(t)/dx, B = dx(t)/dy of the composed flow
    let mut a = DMatrix::zeros(n2, n2);
    let mut b = DMatrix::zeros(n2, n2);
    for i in 0..n2 {
        let mut xp_p = xp.clone();
        let mut xp_m = xp.clone();
        xp_p.coords[i] += fd;
        xp_m.coords[i] -= fd;
        let zp = SpsPoint::new(xp_p, y0.clone());
        let zm = SpsPoint::new(xp_m, y0.clone());
        let xsp = crate::sps::sps_flow(h, kind, &zp, t, opts)?.z.x;
        let xsm = crate::sps::sps_flow(h, kind, &zm, t, opts)?.z.x;
        let col = (&xsp.coords - &xsm.coords) / (2.0 * fd);
        a.set_column(i, &col);

        let mut yp = y0.clone();
        let mut ym = y0.clone();
        yp[i] += fd;
        ym[i] -= fd;
        let zp = SpsPoint::new(xp.clone(), yp);
        let zm = SpsPoint::new(xp.clone(), ym);
        let xsp = crate::sps::sps_flow(h, kind, &zp, t, opts)?.z.x;
        let xsm = crate::sps::sps_flow(h, kind, &zm, t, opts)?.z.x;
        let col = (&xsp.coords - &xsm.coords) / (2.0 * fd);
        b.set_column(i, &col);
    }
    // {x(t)_a, eta_b}_2 = A_ab + (B beta0'')_ab with eta = y - grad beta0(x)
    let hess0 = phase0.phase_hess_at(xp);
    Ok((a + b * hess0).determinant())
}

/// One solution branch of the BC problem at (t, x).
#[derive(Debug, Clone)]
pub struct BcSheet {
    pub sheet_id: usize,
    pub kind: EvolutionKind,
    pub t: f64,
    pub x0: PhasePoint,
    pub l0: PhasePoint,
    pub r0: PhasePoint,
    pub l_t: PhasePoint,
    pub r_t: PhasePoint,
    pub det_m: f64,
    pub grad_m: DMatrix<f64>,
    pub maslov: usize,
    pub left: Trajectory,
    pub right: Option<Trajectory>,
}

/// Classification of a query point against the advanced manifold.
#[derive(Debug, Clone)]
pub enum PointClassification {
    NonFocal(Vec<BcSheet>),
    Caustic,
    Forbidden,
}

/// Short-time solve via the contraction T_{t,x}(x') = x + x' - M_t(x'),
/// started at x' = x. The unique sheet in this regime has Maslov index 0.
pub fn solve_short_time(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    x: &PhasePoint,
    t: f64,
    opts: &BcOptions,
) -> Result<BcSheet> {
    let mut xp = x.clone();
    let mut last_step = f64::INFINITY;
    for _ in 0..opts.max_fixed_point_iter {
        let m = midpoint_map(h, kind, phase0, &xp, t, &opts.flow)?;
        let step = &x.coords - &m.coords;
        last_step = step.norm();
        xp = PhasePoint::from_vector(&xp.coords + step);
        if last_step < opts.tol_bc {
            let data = midpoint_data(h, kind, phase0, &xp, t, &opts.flow)?;
            let residual = (&data.midpoint.coords - &x.coords).norm();
            if residual > opts.tol_bc * 10.0 {
                break;
            }
            let det_m = data.grad_m.determinant();
            return Ok(BcSheet {
                sheet_id: 0,
                kind,
                t,
                x0: xp,
                l0: data.l0,
                r0: data.r0,
                l_t: data.l_t,
                r_t: data.r_t,
                det_m,
                grad_m: data.grad_m,
                maslov: 0,
                left: data.left,
                right: data.right,
            });
        }
    }
    Err(MwkbError::ContractionFailed {
        iters: opts.max_fixed_point_iter,
        last_step,
    })
}

/// Single-sheet solve for moderate times: attempts the contraction first,
/// then falls back to damped Newton from the same start. The BC problem
/// often has a unique root well beyond the guaranteed contraction horizon
/// (the hypothesis of the short-time construction is sufficient, not
/// necessary), and Newton reaches it.
pub fn solve_single(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    x: &PhasePoint,
    t: f64,
    opts: &BcOptions,
) -> Result<BcSheet> {
    let fp_opts = BcOptions {
        max_fixed_point_iter: 60,
        ..opts.clone()
    };
    match solve_short_time(h, kind, phase0, x, t, &fp_opts) {
        Ok(sheet) => Ok(sheet),
        Err(_) => {
            let root = newton_polish(h, kind, phase0, x, x, t, opts)?;
            let det_m = root.data.grad_m.determinant();
            let maslov = maslov_from_data(phase0, &root.x0, &root.data, t, opts)?;
            Ok(BcSheet {
                sheet_id: 0,
                kind,
                t,
                x0: root.x0,
                l0: root.data.l0,
                r0: root.data.r0,
                l_t: root.data.l_t,
                r_t: root.data.r_t,
                det_m,
                grad_m: root.data.grad_m,
                maslov,
                left: root.data.left,
                right: root.data.right,
            })
        }
    }
}

/// Damped Newton polish of M_t(x') = x from a starting guess.
fn newton_polish(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    x: &PhasePoint,
    guess: &PhasePoint,
    t: f64,
    opts: &BcOptions,
) -> Result<MidpointRoot> {
    let mut xp = guess.clone();
    let mut data = midpoint_data(h, kind, phase0, &xp, t, &opts.flow)?;
    let mut res = (&data.midpoint.coords - &x.coords).norm();
    for _ in 0..opts.max_newton_iter {
        if res < opts.tol_bc {
            return Ok(MidpointRoot { x0: xp, data });
        }
        let f = &data.midpoint.coords - &x.coords;
        let step = data
            .grad_m
            .clone()
            .lu()
            .solve(&f)
            .ok_or(MwkbError::NewtonStagnated {
                residual: res,
                iters: opts.max_newton_iter,
            })?;
        let mut damping = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let trial = PhasePoint::from_vector(&xp.coords - damping * &step);
            let tdata = midpoint_data(h, kind, phase0, &trial, t, &opts.flow)?;
            let tres = (&tdata.midpoint.coords - &x.coords).norm();
            if tres < res {
                xp = trial;
                data = tdata;
                res = tres;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if !improved {
            return Err(MwkbError::NewtonStagnated {
                residual: res,
                iters: opts.max_newton_iter,
            });
        }
    }
    if res < opts.tol_bc {
        return Ok(MidpointRoot { x0: xp, data });
    }
    Err(MwkbError::NewtonStagnated {
        residual: res,
        iters: opts.max_newton_iter,
    })
}

struct MidpointRoot {
    x0: PhasePoint,
    data: MidpointData,
}

/// Multi-sheet solve by scanning the advanced manifold for bracketing cells
/// and polishing each candidate. Classifies the point as NonFocal, Caustic
/// or Forbidden.
pub fn solve_sheets(
    h: &Hamiltonian,
    manifold: &LagrangianManifold,
    x: &PhasePoint,
    t: f64,
    opts: &BcOptions,
) -> Result<PointClassification> {
    assert!(
        (manifold.t - t).abs() < 1e-12,
        "manifold must be advanced to the query time"
    );
    let dim = manifold.domain.dim();
    let res = &manifold.resolution;
    let kind = manifold.kind;
    let phase0 = &manifold.phase0;

    // determinant scale for the caustic threshold
    let mut dets: Vec<f64> = manifold.samples.iter().map(|s| s.det_m.abs()).collect();
    dets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_det = if dets.is_empty() {
        1.0
    } else {
        dets[dets.len() / 2].max(1e-300)
    };
    let caustic_abs = opts.tol_caustic * median_det;

    // scan cells whose corner midpoints bracket x per axis
    let mut candidates: Vec<PhasePoint> = Vec::new();
    let mut cell_idx = vec![0usize; dim];
    let n_corners = 1usize << dim;
    'cells: loop {
        // corners of this cell
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut center = DVector::zeros(dim);
        for corner in 0..n_corners {
            let mut idx = cell_idx.clone();
            for a in 0..dim {
                if corner >> a & 1 == 1 {
                    idx[a] += 1;
                }
            }
            let s = &manifold.samples[manifold.flat_index(&idx)];
            for a in 0..dim {
                lo[a] = lo[a].min(s.midpoint.coords[a]);
                hi[a] = hi[a].max(s.midpoint.coords[a]);
            }
            center += &s.base.coords;
        }
        let brackets = (0..dim).all(|a| lo[a] <= x.coords[a] && x.coords[a] <= hi[a]);
        if brackets {
            candidates.push(PhasePoint::from_vector(center / n_corners as f64));
        }
        // odometer over cells
        let mut a = 0;
        loop {
            cell_idx[a] += 1;
            if cell_idx[a] < res[a] - 1 {
                break;
            }
            cell_idx[a] = 0;
            a += 1;
            if a == dim {
                break 'cells;
            }
        }
    }

    // polish candidates, deduplicate roots
    let mut roots: Vec<MidpointRoot> = Vec::new();
    for guess in &candidates {
        match newton_polish(h, kind, phase0, x, guess, t, opts) {
            Ok(root) => {
                let dup = roots
                    .iter()
                    .any(|r| (&r.x0.coords - &root.x0.coords).norm() < opts.tol_dedup);
                if !dup {
                    roots.push(root);
                }
            }
            Err(_) => {
                // candidate dropped; near-caustic cells routinely stagnate
            }
        }
    }

    if roots.is_empty() {
        let inside = inside_midpoint_hull(manifold, x);
        return Ok(if inside {
            PointClassification::Caustic
        } else {
            PointClassification::Forbidden
        });
    }

    // caustic if any root determinant sits below the threshold
    if roots
        .iter()
        .any(|r| r.data.grad_m.determinant().abs() < caustic_abs)
    {
        return Ok(PointClassification::Caustic);
    }

    roots.sort_by(|a, b| {
        a.x0
            .coords
            .iter()
            .partial_cmp(b.x0.coords.iter())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut sheets = Vec::with_capacity(roots.len());
    for (i, root) in roots.into_iter().enumerate() {
        let det_m = root.data.grad_m.determinant();
        let maslov = match maslov_from_data(phase0, &root.x0, &root.data, t, opts) {
            Ok(m) => m,
            Err(MwkbError::MaslovAtCaustic { .. }) | Err(MwkbError::NumericallyDegenerate { .. }) => {
                return Ok(PointClassification::Caustic)
            }
            Err(e) => return Err(e),
        };
        sheets.push(BcSheet {
            sheet_id: i,
            kind,
            t,
            x0: root.x0,
            l0: root.data.l0,
            r0: root.data.r0,
            l_t: root.data.l_t,
            r_t: root.data.r_t,
            det_m,
            grad_m: root.data.grad_m,
            maslov,
            left: root.data.left,
            right: root.data.right,
        });
    }
    Ok(PointClassification::NonFocal(sheets))
}

/// Maslov index of the sheet anchored at x0: counts, with multiplicity, the
/// determinant zeros of grad M_tau(x0) along tau: 0 -> t. The multiplicity of
/// each event is the rank deficiency of grad M at the event time.
pub fn maslov_index(
    h: &Hamiltonian,
    kind: EvolutionKind,
    phase0: &InitialPhaseData,
    x0: &PhasePoint,
    t: f64,
    opts: &BcOptions,
) -> Result<usize> {
    let data = midpoint_data(h, kind, phase0, x0, t, &opts.flow)?;
    maslov_from_data(phase0, x0, &data, t, opts)
}

fn maslov_from_data(
    phase0: &InitialPhaseData,
    x0: &PhasePoint,
    data: &MidpointData,
    t: f64,
    opts: &BcOptions,
) -> Result<usize> {
    let n2 = x0.dim();
    let eye = DMatrix::<f64>::identity(n2, n2);
    let hess0 = phase0.phase_hess_at(x0);
    let mut jh = DMatrix::zeros(n2, n2);
    for c in 0..n2 {
        let col = j_mul(&DVector::from_column_slice(hess0.column(c).as_slice()));
        jh.set_column(c, &col);
    }
    let dl = &eye - 0.5 * &jh;
    let dr = &eye + 0.5 * &jh;

    let grad_m_at = |tau: f64| -> DMatrix<f64> {
        let (_, jl, _, _) = data.left.sample(tau);
        match &data.right {
            Some(right) => {
                let (_, jr, _, _) = right.sample(tau);
                0.5 * (jl * &dl + jr * &dr)
            }
            None => 0.5 * (jl * &dl + &dr),
        }
    };
    count_det_events(&grad_m_at, 0.0, t, opts.maslov_nodes)
}

/// Counts determinant zeros of a matrix family along tau in [t0, t1], with
/// SVD rank-deficiency multiplicities. Sign changes are transversal
/// crossings; sign-preserving dips must reach zero to count, and ambiguous
/// events (small but nonzero minima, or touching zeros with odd rank drop)
/// are reported as numerically degenerate.
pub fn count_det_events(
    grad_m_at: &dyn Fn(f64) -> DMatrix<f64>,
    t0: f64,
    t1: f64,
    nodes: usize,
) -> Result<usize> {
    let nodes = nodes.max(16);
    let taus: Vec<f64> = (0..=nodes)
        .map(|k| t0 + (t1 - t0) * k as f64 / nodes as f64)
        .collect();
    let dets: Vec<f64> = taus.iter().map(|&tau| grad_m_at(tau).determinant()).collect();
    let scale = dets.iter().fold(0.0f64, |a, &d| a.max(d.abs())).max(1e-300);

    let tol_zero = 1e-10 * scale;
    let tol_degen = 1e-5 * scale;
    let span = (t1 - t0).abs();

    let mut m = 0usize;
    let mut k = 1;
    while k < dets.len() {
        let sign_change = dets[k - 1] * dets[k] < 0.0;
        let local_dip = k + 1 < dets.len()
            && dets[k].abs() < dets[k - 1].abs()
            && dets[k].abs() <= dets[k + 1].abs()
            && dets[k].abs() < tol_degen;
        if sign_change || local_dip {
            let lo = taus[k - 1];
            let hi = taus[(k + 1).min(taus.len() - 1)];
            let (tau_star, d_star) = if sign_change {
                bisect_zero(grad_m_at, taus[k - 1], taus[k])
            } else {
                golden_min(grad_m_at, lo, hi)
            };
            let at_end = (t1 - tau_star).abs() < (span * 1e-9).max(1e-12);
            if d_star.abs() < tol_zero || sign_change {
                if at_end {
                    return Err(MwkbError::MaslovAtCaustic {
                        dist: (t1 - tau_star).abs(),
                    });
                }
                let g = grad_m_at(tau_star);
                let sv = g.svd(false, false).singular_values;
                let smax = sv.iter().fold(0.0f64, |a, &s| a.max(s)).max(1e-300);
                let mult = sv
                    .iter()
                    .filter(|&&s| s < 1e-6 * smax.max(1.0))
                    .count()
                    .max(1);
                if !sign_change && mult % 2 == 1 {
                    return Err(MwkbError::NumericallyDegenerate {
                        tau: tau_star,
                        det: d_star,
                    });
                }
                m += mult;
            } else if d_star.abs() < tol_degen {
                return Err(MwkbError::NumericallyDegenerate {
                    tau: tau_star,
                    det: d_star,
                });
            }
            k += 2;
        } else {
            k += 1;
        }
    }
    Ok(m)
}

fn bisect_zero(f: &dyn Fn(f64) -> DMatrix<f64>, mut a: f64, mut b: f64) -> (f64, f64) {
    let mut fa = f(a).determinant();
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        let fm = f(mid).determinant();
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
            fa = fm;
        }
    }
    let tau = 0.5 * (a + b);
    (tau, f(tau).determinant())
}

fn golden_min(f: &dyn Fn(f64) -> DMatrix<f64>, mut a: f64, mut b: f64) -> (f64, f64) {
    let phi = 0.5 * (3.0 - 5.0f64.sqrt());
    for _ in 0..200 {
        let x1 = a + phi * (b - a);
        let x2 = b - phi * (b - a);
        if f(x1).determinant().abs() < f(x2).determinant().abs() {
            b = x2;
        } else {
            a = x1;
        }
        if (b - a).abs() < 1e-14 {
            break;
        }
    }
    let tau = 0.5 * (a + b);
    (tau, f(tau).determinant())
}

/// Whether x lies inside the convex hull of the advanced midpoints
/// (exact for 2-d grids; bounding box otherwise).
fn inside_midpoint_hull(manifold: &LagrangianManifold, x: &PhasePoint) -> bool {
    let dim = manifold.domain.dim();
    if dim != 2 {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for s in &manifold.samples {
            for a in 0..dim {
                lo[a] = lo[a].min(s.midpoint.coords[a]);
                hi[a] = hi[a].max(s.midpoint.coords[a]);
            }
        }
        return (0..dim).all(|a| lo[a] <= x.coords[a] && x.coords[a] <= hi[a]);
    }
    // Andrew monotone chain
    let mut pts: Vec<(f64, f64)> = manifold
        .samples
        .iter()
        .map(|s| (s.midpoint.coords[0], s.midpoint.coords[1]))
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return false;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let (px, py) = (x.coords[0], x.coords[1]);
    let m = hull.len();
    if m < 3 {
        return false;
    }
    for i in 0..m {
        let a = hull[i];
        let b = hull[(i + 1) % m];
        if cross(a, b, (px, py)) < 0.0 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::RectDomain;
    use std::f64::consts::PI;

    fn default_domain() -> RectDomain {
        RectDomain::new(vec![-6.0, -6.0], vec![6.0, 6.0]).unwrap()
    }

    fn zero_phase() -> InitialPhaseData {
        InitialPhaseData::unit(default_domain())
    }

    fn curved_phase() -> InitialPhaseData {
        InitialPhaseData::from_expressions(
            "1",
            "0.3*sin(q)*cos(p)",
            1,
            default_domain(),
        )
        .unwrap()
    }

    #[test]
    fn midpoint_time_zero() {
        let h = Hamiltonian::pendulum(1.0);
        let ipd = curved_phase();
        let xp = PhasePoint::qp(0.4, -0.3);
        for kind in [EvolutionKind::Schrodinger, EvolutionKind::Heisenberg] {
            let m = midpoint_map(&h, kind, &ipd, &xp, 0.0, &FlowOptions::default()).unwrap();
            assert!((&m.coords - &xp.coords).norm() < 1e-14);
            let j = midpoint_jacobian(&h, kind, &ipd, &xp, 0.0, &FlowOptions::default()).unwrap();
            assert!((j - DMatrix::identity(2, 2)).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn zero_phase_heisenberg_is_transport() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = zero_phase();
        let xp = PhasePoint::qp(0.5, 0.2);
        let t = 1.3;
        let m = midpoint_map(&h, EvolutionKind::Heisenberg, &ipd, &xp, t, &FlowOptions::default())
            .unwrap();
        let g = flow(&h, &xp, t, &FlowOptions::default()).unwrap().end();
        assert!((&m.coords - &g.coords).norm() < 1e-10);
        let j =
            midpoint_jacobian(&h, EvolutionKind::Heisenberg, &ipd, &xp, t, &FlowOptions::default())
                .unwrap();
        assert!((j.determinant() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ho_schrodinger_jacobian_closed_form() {
        // grad Mtilde = (K(t)+I)/2, det = cos^2(t/2)
        let h = Hamiltonian::harmonic_oscillator(1, 1.0);
        let ipd = zero_phase();
        let t = 0.8;
        let j = midpoint_jacobian(
            &h,
            EvolutionKind::Schrodinger,
            &ipd,
            &PhasePoint::qp(0.3, 0.7),
            t,
            &FlowOptions::default(),
        )
        .unwrap();
        assert!((j.determinant() - (t / 2.0).cos().powi(2)).abs() < 1e-9);
    }

    #[test]
    fn bracket_matches_jacobian_det() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = curved_phase();
        let xp = PhasePoint::qp(0.4, 0.3);
        let t = 0.9;
        for kind in [EvolutionKind::Schrodinger, EvolutionKind::Heisenberg] {
            let d1 = midpoint_jacobian(&h, kind, &ipd, &xp, t, &FlowOptions::default())
                .unwrap()
                .determinant();
            let d2 = amplitude_bracket(&h, kind, &ipd, &xp, t, &FlowOptions::default()).unwrap();
            assert!((d1 - d2).abs() / d1.abs().max(1.0) < 1e-5, "{kind:?}: {d1} vs {d2}");
        }
    }

    #[test]
    fn bracket_time_zero_is_one() {
        let h = Hamiltonian::pendulum(1.0);
        let ipd = curved_phase();
        let d = amplitude_bracket(
            &h,
            EvolutionKind::Heisenberg,
            &ipd,
            &PhasePoint::qp(0.2, 0.1),
            0.0,
            &FlowOptions::default(),
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constraint_involution() {
        // {eta_a, eta_b}_2 = 0 for eta = y - grad beta0(x): finite differences
        let ipd = curved_phase();
        let fd = 1e-5;
        let eta = |a: usize, z: &[f64; 4]| -> f64 {
            let x = PhasePoint::qp(z[0], z[1]);
            let g = ipd.phase_grad_at(&x);
            z[2 + a] - g[a]
        };
        let z0 = [0.3, -0.2, 0.15, 0.4];
        for a in 0..2 {
            for b in 0..2 {
                let mut da = [0.0; 4];
                let mut db = [0.0; 4];
                for i in 0..4 {
                    let mut zp = z0;
                    let mut zm = z0;
                    zp[i] += fd;
                    zm[i] -= fd;
                    da[i] = (eta(a, &zp) - eta(a, &zm)) / (2.0 * fd);
                    db[i] = (eta(b, &zp) - eta(b, &zm)) / (2.0 * fd);
                }
                let bracket = da[0] * db[2] + da[1] * db[3] - da[2] * db[0] - da[3] * db[1];
                assert!(bracket.abs() < 1e-5, "involution defect {bracket}");
            }
        }
    }

    #[test]
    fn short_time_ho_example() {
        // HO Schrodinger, beta0=0, t=pi/2, x=(1,0) -> x0 = (1,1)
        let h = Hamiltonian::harmonic_oscillator(1, 1.0);
        let ipd = zero_phase();
        let sheet = solve_short_time(
            &h,
            EvolutionKind::Schrodinger,
            &ipd,
            &PhasePoint::qp(1.0, 0.0),
            PI / 2.0,
            &BcOptions::default(),
        )
        .unwrap();
        assert!((&sheet.x0.coords - &PhasePoint::qp(1.0, 1.0).coords).norm() < 1e-7);
        assert_eq!(sheet.maslov, 0);
    }

    #[test]
    fn short_time_t_zero() {
        let h = Hamiltonian::pendulum(1.0);
        let ipd = curved_phase();
        let x = PhasePoint::qp(0.6, -0.1);
        let sheet = solve_short_time(
            &h,
            EvolutionKind::Heisenberg,
            &ipd,
            &x,
            0.0,
            &BcOptions::default(),
        )
        .unwrap();
        assert!((&sheet.x0.coords - &x.coords).norm() < 1e-12);
    }

    #[test]
    fn zero_phase_heisenberg_root_is_backward_flow() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = zero_phase();
        let x = PhasePoint::qp(0.8, 0.3);
        let t = 0.35;
        let sheet = solve_short_time(
            &h,
            EvolutionKind::Heisenberg,
            &ipd,
            &x,
            t,
            &BcOptions::default(),
        )
        .unwrap();
        let back = flow(&h, &x, -t, &FlowOptions::default()).unwrap().end();
        assert!((&sheet.x0.coords - &back.coords).norm() < 1e-8);
    }

    #[test]
    fn maslov_zero_short_time() {
        let h = Hamiltonian::harmonic_oscillator(1, 1.0);
        let ipd = zero_phase();
        let m = maslov_index(
            &h,
            EvolutionKind::Schrodinger,
            &ipd,
            &PhasePoint::qp(0.8, 0.1),
            0.4,
            &BcOptions::default(),
        )
        .unwrap();
        assert_eq!(m, 0);
    }

    #[test]
    fn maslov_two_after_pi() {
        // both eigenvalues of (K+I)/2 vanish at tau = pi
        let h = Hamiltonian::harmonic_oscillator(1, 1.0);
        let ipd = zero_phase();
        for t in [4.0, 6.0] {
            let m = maslov_index(
                &h,
                EvolutionKind::Schrodinger,
                &ipd,
                &PhasePoint::qp(0.8, 0.1),
                t,
                &BcOptions::default(),
            )
            .unwrap();
            assert_eq!(m, 2, "t={t}");
        }
    }

    #[test]
    fn maslov_zero_for_transport() {
        let h = Hamiltonian::quartic_oscillator(0.1, 1.0);
        let ipd = zero_phase();
        let m = maslov_index(
            &h,
            EvolutionKind::Heisenberg,
            &ipd,
            &PhasePoint::qp(0.8, 0.1),
            3.0,
            &BcOptions::default(),
        )
        .unwrap();
        assert_eq!(m, 0);
    }
}
