//! Numerical Weyl-symbol calculus: Wigner transforms of wave functions and
//! operator kernels, chord-geometry WKB symbols of pure states, the Moyal
//! star product on grids, and the stationary-phase composition of
//! semiclassical evolution with an initial symbol.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::bc::{solve_single, BcOptions};
use crate::error::{MwkbError, Result};
use crate::flow::{flow, FlowOptions};
use crate::geometry::{chord_action, j_mul, polygon_phase, PhasePoint};
use crate::grid::{GridAxes, GridMeta, SymbolGrid};
use crate::hamiltonian::{Hamiltonian, InitialPhaseData};
use crate::sps::EvolutionKind;
use crate::wkb::sheet_phase_gradient;

/// A complex wave function on a uniform position grid.
#[derive(Debug, Clone)]
pub struct WaveFunction {
    pub q0: f64,
    pub dq: f64,
    pub values: Vec<Complex64>,
    pub hbar: f64,
}

impl WaveFunction {
    pub fn from_fn(q0: f64, dq: f64, n: usize, hbar: f64, f: impl Fn(f64) -> Complex64) -> Self {
        let values = (0..n).map(|j| f(q0 + j as f64 * dq)).collect();
        Self {
            q0,
            dq,
            values,
            hbar,
        }
    }

    /// psi(q) = n(q) exp(i s(q)/hbar).
    pub fn from_amplitude_phase(
        q0: f64,
        dq: f64,
        n: usize,
        hbar: f64,
        amp: &dyn Fn(f64) -> f64,
        phase: &dyn Fn(f64) -> f64,
    ) -> Self {
        Self::from_fn(q0, dq, n, hbar, |q| {
            amp(q) * Complex64::new(0.0, phase(q) / hbar).exp()
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn q(&self, j: usize) -> f64 {
        self.q0 + j as f64 * self.dq
    }

    /// L2 norm with the grid measure.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.dq).sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        for v in &mut self.values {
            *v /= n;
        }
        self
    }

    /// Largest boundary magnitude relative to the peak.
    pub fn boundary_magnitude(&self) -> f64 {
        let max = self
            .values
            .iter()
            .fold(0.0f64, |a, v| a.max(v.norm()))
            .max(1e-300);
        self.values[0].norm().max(self.values[self.len() - 1].norm()) / max
    }

    fn check_boundary(&self) -> Result<()> {
        let edge = self.boundary_magnitude();
        if edge > 1e-8 {
            return Err(MwkbError::BoundaryEnergy { edge });
        }
        Ok(())
    }
}

/// The momentum axis produced by the chord transforms: spacing
/// pi hbar / (N dq), centered on zero.
pub fn wigner_momentum_axis(n: usize, dq: f64, hbar: f64) -> (f64, f64) {
    let dp = std::f64::consts::PI * hbar / (n as f64 * dq);
    let p0 = -dp * (n / 2) as f64;
    (p0, dp)
}

/// Wigner transform of a wave function:
/// f(q,p) = int dv e^{-i p v / hbar} psi(q + v/2) conj(psi)(q - v/2),
/// evaluated row-by-row with FFTs over the chord offset.
pub fn wigner_transform(psi: &WaveFunction) -> Result<SymbolGrid> {
    psi.check_boundary()?;
    wigner_of_pairs(psi.len(), psi.q0, psi.dq, psi.hbar, "wigner", |jp, jm| {
        psi.values[jp] * psi.values[jm].conj()
    })
}

/// Wigner transform of an operator kernel K(a, b) given as a row-major
/// n x n matrix over the same position grid.
pub fn wigner_transform_kernel(
    kernel: &DMatrix<Complex64>,
    q0: f64,
    dq: f64,
    hbar: f64,
) -> Result<SymbolGrid> {
    let n = kernel.nrows();
    wigner_of_pairs(n, q0, dq, hbar, "wigner", |jp, jm| kernel[(jp, jm)])
}

fn wigner_of_pairs(
    n: usize,
    q0: f64,
    dq: f64,
    hbar: f64,
    kind: &str,
    pair: impl Fn(usize, usize) -> Complex64,
) -> Result<SymbolGrid> {
    let (p0, dp) = wigner_momentum_axis(n, dq, hbar);
    let axes = GridAxes {
        q0,
        dq,
        nq: n,
        p0,
        dp,
        np: n,
    };
    let meta = GridMeta {
        t: 0.0,
        hbar,
        kind: kind.into(),
        scenario_hash: String::new(),
    };
    let mut grid = SymbolGrid::zeros(axes, meta);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let half = n / 2;
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for v in row.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        let kmax = j.min(n - 1 - j);
        for k in 0..=kmax {
            row[k % n] = pair(j + k, j - k);
            if k > 0 {
                row[n - k] = pair(j - k, j + k);
            }
        }
        fft.process(&mut row);
        // fftshift: output index ip corresponds to frequency m = ip - n/2
        for ip in 0..n {
            let m = (ip + half) % n;
            grid.values[grid.axes.index(j, ip)] = row[m] * (2.0 * dq);
        }
    }
    Ok(grid)
}

/// h^{-n} int f dx, the trace functional on symbols (n = 1).
pub fn symbol_trace(grid: &SymbolGrid) -> Complex64 {
    let cell = grid.axes.dq * grid.axes.dp;
    let h = 2.0 * std::f64::consts::PI * grid.meta.hbar;
    grid.values.iter().sum::<Complex64>() * (cell / h)
}

/// A pure position-space state given by smooth amplitude and phase fields
/// with first and second phase derivatives.
#[derive(Clone)]
pub struct PositionState {
    pub amp: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub phase: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub dphase: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d2phase: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl PositionState {
    pub fn from_expressions(amp: &str, phase: &str) -> Result<Self> {
        let a = crate::expr::Field::parse(amp, &["q"])?;
        let s = crate::expr::Field::parse(phase, &["q"])?;
        let ds = s.derivative(0);
        let d2s = ds.derivative(0);
        Ok(Self {
            amp: Arc::new(move |q| a.eval(&[q])),
            phase: Arc::new(move |q| s.eval(&[q])),
            dphase: Arc::new(move |q| ds.eval(&[q])),
            d2phase: Arc::new(move |q| d2s.eval(&[q])),
        })
    }
}

/// One resolved chord point of the pure-state WKB symbol.
#[derive(Debug, Clone)]
pub struct ChordPoint {
    /// positive root of the midpoint-chord equation
    pub v: f64,
    pub x_plus: PhasePoint,
    pub x_minus: PhasePoint,
    /// stationary phase value s(q+) - s(q-) - p v
    pub s0: f64,
    /// the same phase from the chord loop geometry
    pub s0_geometric: f64,
    pub amplitude: f64,
    /// sign of the second phase derivative at the root
    pub signature: i32,
    pub value: f64,
}

/// The chord-construction WKB symbol of a pure state on a grid: per point,
/// the chord root, phase (by both routes), amplitude and cosine value.
/// Points with no chord root or a degenerate root are None.
pub struct PureStateWkbSymbol {
    pub axes: GridAxes,
    pub hbar: f64,
    pub points: Vec<Option<ChordPoint>>,
}

impl PureStateWkbSymbol {
    pub fn value_grid(&self) -> SymbolGrid {
        let meta = GridMeta {
            t: 0.0,
            hbar: self.hbar,
            kind: "pure_state_wkb".into(),
            scenario_hash: String::new(),
        };
        let mut g = SymbolGrid::zeros(self.axes.clone(), meta);
        for (i, p) in self.points.iter().enumerate() {
            g.values[i] = match p {
                Some(cp) => Complex64::new(cp.value, 0.0),
                None => Complex64::new(0.0, 0.0),
            };
            if p.is_none() {
                g.class[i] = crate::grid::PointClass::Forbidden;
            }
        }
        g
    }
}

/// Builds the pure-state WKB symbol by solving the chord equation
/// 2p = s'(q - v/2) + s'(q + v/2) per grid point.
pub fn pure_state_symbol(
    state: &PositionState,
    axes: &GridAxes,
    hbar: f64,
    v_max: f64,
) -> PureStateWkbSymbol {
    let caustic_tol = 1e-8;
    let mut points = Vec::with_capacity(axes.len());
    for iq in 0..axes.nq {
        let q = axes.q(iq);
        for ip in 0..axes.np {
            let p = axes.p(ip);
            points.push(chord_root(state, q, p, hbar, v_max, caustic_tol));
        }
    }
    PureStateWkbSymbol {
        axes: axes.clone(),
        hbar,
        points,
    }
}

fn chord_root(
    state: &PositionState,
    q: f64,
    p: f64,
    hbar: f64,
    v_max: f64,
    caustic_tol: f64,
) -> Option<ChordPoint> {
    let f = |v: f64| (state.dphase)(q - 0.5 * v) + (state.dphase)(q + 0.5 * v) - 2.0 * p;
    let df = |v: f64| 0.5 * ((state.d2phase)(q + 0.5 * v) - (state.d2phase)(q - 0.5 * v));
    // scan positive v for a bracket (roots come in +- pairs)
    let scan = 400;
    let mut root: Option<f64> = None;
    let mut prev = f(0.0);
    for k in 1..=scan {
        let v = v_max * k as f64 / scan as f64;
        let cur = f(v);
        if prev * cur <= 0.0 && prev != cur {
            // bisect then polish
            let (mut a, mut b) = (v_max * (k - 1) as f64 / scan as f64, v);
            let mut fa = prev;
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if fa * fm <= 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            let mut v0 = 0.5 * (a + b);
            for _ in 0..30 {
                let d = df(v0);
                if d.abs() < 1e-300 {
                    break;
                }
                let step = f(v0) / d;
                v0 -= step;
                if step.abs() < 1e-14 {
                    break;
                }
            }
            if v0.is_finite() && v0 > 0.0 {
                root = Some(v0);
            }
            break;
        }
        prev = cur;
    }
    let v = root?;
    let phi2 = 0.25 * ((state.d2phase)(q + 0.5 * v) - (state.d2phase)(q - 0.5 * v));
    if phi2.abs() < caustic_tol {
        return None;
    }
    let qp_ = q + 0.5 * v;
    let qm = q - 0.5 * v;
    let x_plus = PhasePoint::qp(qp_, (state.dphase)(qp_));
    let x_minus = PhasePoint::qp(qm, (state.dphase)(qm));
    let s0 = (state.phase)(qp_) - (state.phase)(qm) - p * v;
    // chord loop: curve on lambda from x- to x+, then the chord back
    let s0_geometric =
        ((state.phase)(qp_) - (state.phase)(qm)) + chord_action(&x_plus, &x_minus);
    let signature = if phi2 > 0.0 { 1 } else { -1 };
    let h = 2.0 * std::f64::consts::PI * hbar;
    let amplitude = h.sqrt() * phi2.abs().powf(-0.5) * (state.amp)(qp_) * (state.amp)(qm);
    let value = amplitude
        * 2.0
        * (s0 / hbar + std::f64::consts::FRAC_PI_4 * signature as f64).cos();
    Some(ChordPoint {
        v,
        x_plus,
        x_minus,
        s0,
        s0_geometric,
        amplitude,
        signature,
        value,
    })
}

// ---------------------------------------------------------------------------
// star product
// ---------------------------------------------------------------------------

/// hbar-scaled forward transform F(y) = sum f(x) e^{-i y.x/hbar} dq dp on the
/// dual lattice y_q(m) = 2 pi hbar m /(N dq), fftshifted so index 0 is the
/// most negative frequency.
fn hbar_fft2(grid: &SymbolGrid) -> Vec<Complex64> {
    let nq = grid.axes.nq;
    let np = grid.axes.np;
    let mut data = grid.values.clone();
    let mut planner = FftPlanner::new();
    let fft_p = planner.plan_fft_forward(np);
    let fft_q = planner.plan_fft_forward(nq);
    // FFT along p (contiguous rows)
    for iq in 0..nq {
        fft_p.process(&mut data[iq * np..(iq + 1) * np]);
    }
    // FFT along q (strided)
    let mut col = vec![Complex64::new(0.0, 0.0); nq];
    for ip in 0..np {
        for iq in 0..nq {
            col[iq] = data[iq * np + ip];
        }
        fft_q.process(&mut col);
        for iq in 0..nq {
            data[iq * np + ip] = col[iq];
        }
    }
    // origin phases + measure + shift to centered order
    let mut out = vec![Complex64::new(0.0, 0.0); nq * np];
    let measure = grid.axes.dq * grid.axes.dp;
    for mq in 0..nq {
        let fq = centered_freq(mq, nq);
        let phase_q = -2.0 * std::f64::consts::PI * fq * grid.axes.q0 / (nq as f64 * grid.axes.dq);
        for mp in 0..np {
            let fp = centered_freq(mp, np);
            let phase_p =
                -2.0 * std::f64::consts::PI * fp * grid.axes.p0 / (np as f64 * grid.axes.dp);
            let raw = data[freq_to_raw(mq, nq) * np + freq_to_raw(mp, np)];
            out[mq * np + mp] =
                raw * Complex64::new(0.0, phase_q + phase_p).exp() * measure;
        }
    }
    out
}

/// Inverse of `hbar_fft2` (centered spectrum back to the grid).
fn hbar_ifft2(spec: &[Complex64], axes: &GridAxes) -> Vec<Complex64> {
    let nq = axes.nq;
    let np = axes.np;
    let mut data = vec![Complex64::new(0.0, 0.0); nq * np];
    for mq in 0..nq {
        let fq = centered_freq(mq, nq);
        let phase_q = 2.0 * std::f64::consts::PI * fq * axes.q0 / (nq as f64 * axes.dq);
        for mp in 0..np {
            let fp = centered_freq(mp, np);
            let phase_p = 2.0 * std::f64::consts::PI * fp * axes.p0 / (np as f64 * axes.dp);
            data[freq_to_raw(mq, nq) * np + freq_to_raw(mp, np)] =
                spec[mq * np + mp] * Complex64::new(0.0, phase_q + phase_p).exp();
        }
    }
    let mut planner = FftPlanner::new();
    let ifft_p = planner.plan_fft_inverse(np);
    let ifft_q = planner.plan_fft_inverse(nq);
    let mut col = vec![Complex64::new(0.0, 0.0); nq];
    for ip in 0..np {
        for iq in 0..nq {
            col[iq] = data[iq * np + ip];
        }
        ifft_q.process(&mut col);
        for iq in 0..nq {
            data[iq * np + ip] = col[iq];
        }
    }
    for iq in 0..nq {
        ifft_p.process(&mut data[iq * np..(iq + 1) * np]);
    }
    let scale = 1.0 / (nq as f64 * np as f64 * axes.dq * axes.dp);
    for v in &mut data {
        *v *= scale;
    }
    data
}

/// centered index -> signed frequency
fn centered_freq(m: usize, n: usize) -> f64 {
    m as f64 - (n / 2) as f64
}

/// centered index -> raw FFT bin
fn freq_to_raw(m: usize, n: usize) -> usize {
    let f = m as isize - (n / 2) as isize;
    f.rem_euclid(n as isize) as usize
}

fn spectral_patch(spec: &[Complex64], rel: f64) -> (Vec<usize>, f64) {
    let max = spec.iter().fold(0.0f64, |a, v| a.max(v.norm())).max(1e-300);
    let idx = spec
        .iter()
        .enumerate()
        .filter(|(_, v)| v.norm() > rel * max)
        .map(|(i, _)| i)
        .collect();
    (idx, max)
}

#[derive(Debug, Clone)]
pub struct StarOptions {
    /// Relative spectral magnitude below which modes are dropped.
    pub patch_rel: f64,
    /// Error out when the spectrum reaches the frequency-lattice edge above
    /// this relative magnitude (the grid cannot resolve the symbol at hbar).
    pub edge_rel: f64,
    /// Cap on |patch1| * |patch2| pair count.
    pub max_pairs: usize,
    /// Out-of-band spectral mass (an l1 bound on the filtered remainder)
    /// above which the product is reported as unresolved.
    pub dropped_rel: f64,
}

impl Default for StarOptions {
    fn default() -> Self {
        Self {
            patch_rel: 1e-13,
            edge_rel: 1e-8,
            max_pairs: 1_000_000_000,
            dropped_rel: 1e-6,
        }
    }
}

/// Moyal star product of two symbols on a common grid, via the dual-lattice
/// twisted convolution restricted to the spectral patches of both factors
/// (the left-right pseudodifferential form after the change of variables
/// y = 2 J u; two FFT passes plus the patch convolution).
pub fn star_product(f1: &SymbolGrid, f2: &SymbolGrid, opts: &StarOptions) -> Result<SymbolGrid> {
    assert_eq!(f1.axes, f2.axes, "star product needs a common grid");
    let hbar = f1.meta.hbar;
    assert!(
        (hbar - f2.meta.hbar).abs() < 1e-14,
        "inconsistent hbar between factors"
    );
    let axes = &f1.axes;
    let nq = axes.nq;
    let np = axes.np;
    let s1 = hbar_fft2(f1);
    let s2 = hbar_fft2(f2);
    for (name, s) in [("left", &s1), ("right", &s2)] {
        let max = s.iter().fold(0.0f64, |a, v| a.max(v.norm())).max(1e-300);
        let mut edge = 0.0f64;
        for mq in 0..nq {
            edge = edge.max(s[mq * np].norm());
            edge = edge.max(s[mq * np + np - 1].norm());
        }
        for mp in 0..np {
            edge = edge.max(s[mp].norm());
            edge = edge.max(s[(nq - 1) * np + mp].norm());
        }
        if edge / max > opts.edge_rel {
            return Err(MwkbError::Aliasing {
                hbar,
                reason: format!(
                    "{name} factor spectrum reaches the frequency-lattice edge at relative magnitude {:.2e}",
                    edge / max
                ),
            });
        }
    }
    let (p1, _) = spectral_patch(&s1, opts.patch_rel);
    let (p2, _) = spectral_patch(&s2, opts.patch_rel);
    if p1.len() * p2.len() > opts.max_pairs {
        return Err(MwkbError::Aliasing {
            hbar,
            reason: format!(
                "spectral patches too large ({} x {} modes)",
                p1.len(),
                p2.len()
            ),
        });
    }

    let dyq = 2.0 * std::f64::consts::PI * hbar / (nq as f64 * axes.dq);
    let dyp = 2.0 * std::f64::consts::PI * hbar / (np as f64 * axes.dp);
    let cell = dyq * dyp;
    let norm = (2.0 * std::f64::consts::PI * hbar).powi(-2) * cell;

    let mut out = vec![Complex64::new(0.0, 0.0); nq * np];
    let mut dropped = 0.0f64;
    let mut total = 0.0f64;
    let half_q = (nq / 2) as isize;
    let half_p = (np / 2) as isize;
    for &ia in &p1 {
        let (mqa, mpa) = (ia / np, ia % np);
        let aq = centered_freq(mqa, nq) * dyq;
        let ap = centered_freq(mpa, np) * dyp;
        let va = s1[ia];
        for &ib in &p2 {
            let (mqb, mpb) = (ib / np, ib % np);
            let bq = centered_freq(mqb, nq) * dyq;
            let bp = centered_freq(mpb, np) * dyp;
            let vb = s2[ib];
            let mag = va.norm() * vb.norm();
            total += mag;
            let mc = centered_freq(mqa, nq) as isize + centered_freq(mqb, nq) as isize;
            let mpc = centered_freq(mpa, np) as isize + centered_freq(mpb, np) as isize;
            if mc < -half_q || mc >= half_q || mpc < -half_p || mpc >= half_p {
                dropped += mag;
                continue;
            }
            // wedge a ^ b = aq*bp - ap*bq
            let w = aq * bp - ap * bq;
            let tw = Complex64::new(0.0, -w / (2.0 * hbar)).exp();
            let idx = (mc + half_q) as usize * np + (mpc + half_p) as usize;
            out[idx] += va * vb * tw;
        }
    }
    if dropped / total.max(1e-300) > opts.dropped_rel {
        return Err(MwkbError::Aliasing {
            hbar,
            reason: format!(
                "twisted convolution leaves the frequency band (dropped mass {:.2e})",
                dropped / total
            ),
        });
    }
    for v in &mut out {
        *v *= norm;
    }
    let values = hbar_ifft2(&out, axes);
    Ok(SymbolGrid {
        axes: axes.clone(),
        values,
        class: vec![crate::grid::PointClass::NonFocal; nq * np],
        sheets: None,
        meta: GridMeta {
            t: f1.meta.t,
            hbar,
            kind: "star".into(),
            scenario_hash: String::new(),
        },
    })
}

/// Triple product evaluated as (f*g)*h, with the associativity defect versus
/// f*(g*h) reported alongside.
pub fn star_product3(
    f: &SymbolGrid,
    g: &SymbolGrid,
    h: &SymbolGrid,
    opts: &StarOptions,
) -> Result<(SymbolGrid, f64)> {
    let left = star_product(&star_product(f, g, opts)?, h, opts)?;
    let right = star_product(f, &star_product(g, h, opts)?, opts)?;
    let defect = left
        .values
        .iter()
        .zip(&right.values)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).norm()));
    Ok((left, defect))
}

// ---------------------------------------------------------------------------
// stationary phase composition
// ---------------------------------------------------------------------------

/// Result of composing the evolution symbol with an initial symbol by
/// stationary phase.
#[derive(Debug, Clone)]
pub struct StphResult {
    pub value: Complex64,
    pub x1: PhasePoint,
    pub x2: PhasePoint,
    pub x3: PhasePoint,
    pub theta: f64,
    pub det_theta: f64,
    pub signature: i32,
    /// determinant identity right-hand side (left/right flow factorization)
    pub det_identity_rhs: f64,
}

/// Composes U^sc(t) * rho0 * conj(U^sc(t)) at one point by stationary phase,
/// using the single-sheet evolution data (initial evolution phase zero).
/// The critical-point system is solved by fixed-point iteration; the phase
/// Hessian comes from central differences of the total phase.
pub fn stationary_phase_compose(
    h: &Hamiltonian,
    rho0: &InitialPhaseData,
    t: f64,
    x: &PhasePoint,
    opts: &BcOptions,
) -> Result<StphResult> {
    let dof = x.dof();
    let unit_domain = rho0.domain.clone();
    let phase0_u = InitialPhaseData::unit(unit_domain);
    let hbar = h.hbar;

    // phi data of the evolution symbol at a point
    let phi_sheet = |xx: &PhasePoint| -> Result<(f64, f64, DVector<f64>)> {
        let sheet = solve_single(h, EvolutionKind::Schrodinger, &phase0_u, xx, t, opts)?;
        let phi = crate::wkb::schrodinger_phase(&sheet, &phase0_u)?;
        let amp = sheet.det_m.abs().powf(-0.5);
        let grad = sheet_phase_gradient(&sheet);
        Ok((phi, amp, grad))
    };

    let mut x1 = x.clone();
    let mut x3 = x.clone();
    let mut converged = false;
    for _ in 0..300 {
        let x2 = PhasePoint::from_vector(&x1.coords + &x3.coords - &x.coords);
        let (_, _, g1) = phi_sheet(&x1)?;
        let (_, _, g3) = phi_sheet(&x3)?;
        let gs = rho0.phase_grad_at(&x2);
        let x1n = PhasePoint::from_vector(
            &x.coords + 0.5 * j_mul(&g3) - 0.5 * j_mul(&gs),
        );
        let x3n = PhasePoint::from_vector(
            &x.coords + 0.5 * j_mul(&g1) + 0.5 * j_mul(&gs),
        );
        let step = (&x1n.coords - &x1.coords).norm() + (&x3n.coords - &x3.coords).norm();
        x1 = x1n;
        x3 = x3n;
        if step < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MwkbError::CriticalPointInconclusive(300));
    }
    let x2 = PhasePoint::from_vector(&x1.coords + &x3.coords - &x.coords);

    let theta_of = |y1: &PhasePoint, y3: &PhasePoint| -> Result<f64> {
        let y2 = PhasePoint::from_vector(&y1.coords + &y3.coords - &x.coords);
        let (phi1, _, _) = phi_sheet(y1)?;
        let (phi3, _, _) = phi_sheet(y3)?;
        Ok(phi1 - phi3
            + rho0.phase_at(&y2)
            + polygon_phase(&[y3.clone(), x.clone(), y1.clone()])?)
    };

    let theta = theta_of(&x1, &x3)?;
    let (phi1, amp1, _) = phi_sheet(&x1)?;
    let (_, amp3, _) = phi_sheet(&x3)?;
    let _ = phi1;

    // Hessian of Theta over xi = (x1, x3) by central differences
    let m = 4 * dof;
    let eps = 1e-5;
    let mut hess = DMatrix::zeros(m, m);
    let perturbed = |xi: &DVector<f64>| -> (PhasePoint, PhasePoint) {
        (
            PhasePoint::from_vector(xi.rows(0, 2 * dof).into_owned()),
            PhasePoint::from_vector(xi.rows(2 * dof, 2 * dof).into_owned()),
        )
    };
    let mut xi0 = DVector::zeros(m);
    xi0.rows_mut(0, 2 * dof).copy_from(&x1.coords);
    xi0.rows_mut(2 * dof, 2 * dof).copy_from(&x3.coords);
    for i in 0..m {
        for j in i..m {
            let mut pp = xi0.clone();
            pp[i] += eps;
            pp[j] += eps;
            let mut pm = xi0.clone();
            pm[i] += eps;
            pm[j] -= eps;
            let mut mp = xi0.clone();
            mp[i] -= eps;
            mp[j] += eps;
            let mut mm = xi0.clone();
            mm[i] -= eps;
            mm[j] -= eps;
            let (a1, a3) = perturbed(&pp);
            let tpp = theta_of(&a1, &a3)?;
            let (a1, a3) = perturbed(&pm);
            let tpm = theta_of(&a1, &a3)?;
            let (a1, a3) = perturbed(&mp);
            let tmp = theta_of(&a1, &a3)?;
            let (a1, a3) = perturbed(&mm);
            let tmm = theta_of(&a1, &a3)?;
            let v = (tpp - tpm - tmp + tmm) / (4.0 * eps * eps);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let det_theta = hess.determinant();
    let eig = hess.clone().symmetric_eigen();
    let signature: i32 = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > 0.0 { 1 } else { -1 })
        .sum();

    // determinant identity: det Theta'' = 2^{6n} [det(1+Kl)(1+Kr)]^{-1}
    //                       det[Kl(1 - J S0''/2) + Kr(1 + J S0''/2)] at x2
    let (l2, r2) = crate::bc::lift(rho0, &x2);
    let kl = flow(h, &l2, t, &opts.flow)?.jacobi_end();
    let kr = flow(h, &r2, t, &opts.flow)?.jacobi_end();
    let eye = DMatrix::<f64>::identity(2 * dof, 2 * dof);
    let s2h = rho0.phase_hess_at(&x2);
    let mut js = DMatrix::zeros(2 * dof, 2 * dof);
    for c in 0..2 * dof {
        js.set_column(c, &j_mul(&DVector::from_column_slice(s2h.column(c).as_slice())));
    }
    let det_identity_rhs = 2.0f64.powi(6 * dof as i32)
        / ((&eye + &kl).determinant() * (&eye + &kr).determinant())
        * ((&kl * (&eye - 0.5 * &js)) + (&kr * (&eye + 0.5 * &js))).determinant();

    let amp = 2.0f64.powi(2 * dof as i32)
        * amp1
        * amp3
        * rho0.amplitude_at(&x2)
        * det_theta.abs().powf(-0.5);
    let value = amp
        * Complex64::new(
            0.0,
            theta / hbar + std::f64::consts::FRAC_PI_4 * signature as f64,
        )
        .exp();
    Ok(StphResult {
        value,
        x1,
        x2,
        x3,
        theta,
        det_theta,
        signature,
        det_identity_rhs,
    })
}
