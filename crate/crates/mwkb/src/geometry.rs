//! Symplectic linear algebra on the primary phase space: wedge products,
//! polygon phases, chord actions, loop bookkeeping and affine maps.
//!
//! Points are ordered (q_1..q_n, p_1..p_n). The symplectic matrix
//! J = [[0, I], [-I, 0]] is never materialized; `j_mul` applies it directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{MwkbError, Result};

/// Loop-closure tolerance.
pub const TOL_GEOM: f64 = 1e-9;
/// Symplecticity tolerance for affine maps.
pub const TOL_MAT: f64 = 1e-10;

/// A point x = (q, p) of the primary phase space R^{2n}.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub coords: DVector<f64>,
}

impl PhasePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % 2 != 0 || coords.is_empty() {
            return Err(MwkbError::DimensionMismatch {
                expected: 2,
                got: coords.len(),
            });
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(MwkbError::NonFinite {
                context: "PhasePoint::new".into(),
                x: coords,
            });
        }
        Ok(Self {
            coords: DVector::from_vec(coords),
        })
    }

    /// n = 1 convenience constructor.
    pub fn qp(q: f64, p: f64) -> Self {
        Self {
            coords: DVector::from_vec(vec![q, p]),
        }
    }

    pub fn from_vector(v: DVector<f64>) -> Self {
        Self { coords: v }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            coords: DVector::zeros(2 * n),
        }
    }

    /// Configuration-space dimension n.
    pub fn dof(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.coords.as_slice()[..self.dof()]
    }

    pub fn p(&self) -> &[f64] {
        &self.coords.as_slice()[self.dof()..]
    }
}

impl std::ops::Add<&PhasePoint> for &PhasePoint {
    type Output = PhasePoint;
    fn add(self, rhs: &PhasePoint) -> PhasePoint {
        PhasePoint::from_vector(&self.coords + &rhs.coords)
    }
}

impl std::ops::Sub<&PhasePoint> for &PhasePoint {
    type Output = PhasePoint;
    fn sub(self, rhs: &PhasePoint) -> PhasePoint {
        PhasePoint::from_vector(&self.coords - &rhs.coords)
    }
}

impl std::ops::Mul<f64> for &PhasePoint {
    type Output = PhasePoint;
    fn mul(self, s: f64) -> PhasePoint {
        PhasePoint::from_vector(&self.coords * s)
    }
}

/// J x = (p, -q), written on raw slices so no J matrix is ever formed.
pub fn j_mul_slice(x: &[f64]) -> Vec<f64> {
    let n = x.len() / 2;
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        out[i] = x[n + i];
        out[n + i] = -x[i];
    }
    out
}

pub fn j_mul(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(j_mul_slice(x.as_slice()))
}

/// x1 wedge x2 = x1 . J x2 = q1.p2 - p1.q2.
pub fn wedge(x1: &PhasePoint, x2: &PhasePoint) -> Result<f64> {
    if x1.dim() != x2.dim() {
        return Err(MwkbError::DimensionMismatch {
            expected: x1.dim(),
            got: x2.dim(),
        });
    }
    Ok(wedge_unchecked(x1.coords.as_slice(), x2.coords.as_slice()))
}

pub fn wedge_unchecked(x1: &[f64], x2: &[f64]) -> f64 {
    let n = x1.len() / 2;
    let mut s = 0.0;
    for i in 0..n {
        s += x1[i] * x2[n + i] - x1[n + i] * x2[i];
    }
    s
}

/// Symplectic polygon phase P_N = 2 sum_{i<j} (-1)^{i+j+1} x_i ^ x_j
/// (1-based indices). Needs N >= 3.
pub fn polygon_phase(points: &[PhasePoint]) -> Result<f64> {
    let n = points.len();
    if n < 3 {
        return Err(MwkbError::PolygonTooSmall(n));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let sign = if (i + j) % 2 == 0 { -1.0 } else { 1.0 };
            // (-1)^{(i+1)+(j+1)+1} = (-1)^{i+j+1}
            s += sign * wedge(&points[i], &points[j])?;
        }
    }
    Ok(2.0 * s)
}

/// Alternating sum S_N = x1 - x2 + x3 - ...
pub fn alternating_sum(points: &[PhasePoint]) -> Result<PhasePoint> {
    let first = points
        .first()
        .ok_or(MwkbError::PolygonTooSmall(0))?;
    let mut acc = DVector::zeros(first.dim());
    for (k, x) in points.iter().enumerate() {
        if x.dim() != first.dim() {
            return Err(MwkbError::DimensionMismatch {
                expected: first.dim(),
                got: x.dim(),
            });
        }
        if k % 2 == 0 {
            acc += &x.coords;
        } else {
            acc -= &x.coords;
        }
    }
    Ok(PhasePoint::from_vector(acc))
}

/// Exact int p.dq along the straight chord from x1 to x2:
/// (p1+p2)/2 . (q2-q1).
pub fn chord_action(x1: &PhasePoint, x2: &PhasePoint) -> f64 {
    let n = x1.dof();
    let mut s = 0.0;
    for i in 0..n {
        s += 0.5 * (x1.p()[i] + x2.p()[i]) * (x2.q()[i] - x1.q()[i]);
    }
    s
}

/// Vertices of the unique polygon with odd midpoint count, oriented so that
/// the chord loop over the returned cycle has action equal to
/// `polygon_phase(midpoints)`.
pub fn polygon_vertices(midpoints: &[PhasePoint]) -> Result<Vec<PhasePoint>> {
    let n = midpoints.len();
    if n < 3 {
        return Err(MwkbError::PolygonTooSmall(n));
    }
    if n % 2 == 0 {
        return Err(MwkbError::Scenario(format!(
            "vertex reconstruction from midpoints is unique only for odd N (got {n})"
        )));
    }
    let mut verts = Vec::with_capacity(n);
    verts.push(alternating_sum(midpoints)?);
    for k in 0..n - 1 {
        let prev = verts.last().unwrap();
        verts.push(&(&midpoints[k] * 2.0) - prev);
    }
    // traverse sides in decreasing midpoint order: v1 -> vN -> ... -> v2
    let mut cycle = Vec::with_capacity(n);
    cycle.push(verts[0].clone());
    cycle.extend(verts[1..].iter().rev().cloned());
    Ok(cycle)
}

/// Trajectory arc data needed by loop bookkeeping: endpoint states and the
/// accumulated int p.dq over the arc, oriented start -> end.
#[derive(Debug, Clone)]
pub struct ArcData {
    pub start: PhasePoint,
    pub end: PhasePoint,
    /// int p.dq from start to end along the flow.
    pub action: f64,
}

/// One side of a phase-space loop.
#[derive(Debug, Clone)]
pub enum Segment {
    /// Straight chord from .0 to .1.
    Chord(PhasePoint, PhasePoint),
    /// Flow arc; `direction` = +1 traverses start->end, -1 end->start.
    TrajectoryArc { arc: ArcData, direction: i8 },
}

impl Segment {
    pub fn start(&self) -> &PhasePoint {
        match self {
            Segment::Chord(a, _) => a,
            Segment::TrajectoryArc { arc, direction } => {
                if *direction >= 0 {
                    &arc.start
                } else {
                    &arc.end
                }
            }
        }
    }

    pub fn end(&self) -> &PhasePoint {
        match self {
            Segment::Chord(_, b) => b,
            Segment::TrajectoryArc { arc, direction } => {
                if *direction >= 0 {
                    &arc.end
                } else {
                    &arc.start
                }
            }
        }
    }

    pub fn action(&self) -> f64 {
        match self {
            Segment::Chord(a, b) => chord_action(a, b),
            Segment::TrajectoryArc { arc, direction } => {
                if *direction >= 0 {
                    arc.action
                } else {
                    -arc.action
                }
            }
        }
    }
}

/// What a loop represents; purely informational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopLabel {
    SchrodingerLTilde,
    HeisenbergW,
    HeisenbergL,
    TwoSidedX,
    Polygon,
}

/// An oriented closed loop of chords and trajectory arcs.
#[derive(Debug, Clone)]
pub struct PhaseLoop {
    pub segments: Vec<Segment>,
    pub label: LoopLabel,
}

impl PhaseLoop {
    pub fn new(segments: Vec<Segment>, label: LoopLabel) -> Self {
        Self { segments, label }
    }

    /// Checks consecutive endpoint matching and closure to `tol`.
    pub fn check_closed(&self, tol: f64) -> Result<()> {
        let m = self.segments.len();
        for i in 0..m {
            let a = self.segments[i].end();
            let b = self.segments[(i + 1) % m].start();
            let gap = (&a.coords - &b.coords).norm();
            if gap > tol {
                return Err(MwkbError::LoopNotClosed {
                    gap,
                    tol,
                    segment: i,
                });
            }
        }
        Ok(())
    }

    /// oint p.dq: chord actions plus signed arc actions.
    pub fn area(&self, tol: f64) -> Result<f64> {
        self.check_closed(tol)?;
        Ok(self.segments.iter().map(Segment::action).sum())
    }
}

/// Builds the pure-chord loop through the given vertex cycle.
pub fn chord_loop(cycle: &[PhasePoint], label: LoopLabel) -> PhaseLoop {
    let n = cycle.len();
    let segments = (0..n)
        .map(|i| Segment::Chord(cycle[i].clone(), cycle[(i + 1) % n].clone()))
        .collect();
    PhaseLoop::new(segments, label)
}

/// Affine canonical map x -> R^{-1}(x - x0) with R in Sp(2n).
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub r: DMatrix<f64>,
    pub x0: PhasePoint,
    r_inv: DMatrix<f64>,
}

impl AffineMap {
    pub fn new(r: DMatrix<f64>, x0: PhasePoint) -> Result<Self> {
        let defect = symplectic_defect(&r);
        if defect > TOL_MAT {
            return Err(MwkbError::NotSymplectic {
                defect,
                tol: TOL_MAT,
            });
        }
        let r_inv = exact_symplectic_inverse(&r);
        Ok(Self { r, x0, r_inv })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            r: DMatrix::identity(2 * n, 2 * n),
            x0: PhasePoint::zeros(n),
            r_inv: DMatrix::identity(2 * n, 2 * n),
        }
    }

    /// A(x) = R^{-1}(x - x0).
    pub fn apply(&self, x: &PhasePoint) -> PhasePoint {
        PhasePoint::from_vector(&self.r_inv * (&x.coords - &self.x0.coords))
    }

    /// A^{-1}(x') = R x' + x0.
    pub fn apply_inverse(&self, x: &PhasePoint) -> PhasePoint {
        PhasePoint::from_vector(&self.r * &x.coords + &self.x0.coords)
    }
}

/// R^{-1} = -J R^T J for symplectic R.
fn exact_symplectic_inverse(r: &DMatrix<f64>) -> DMatrix<f64> {
    let n2 = r.nrows();
    let rt = r.transpose();
    let mut out = DMatrix::zeros(n2, n2);
    for col in 0..n2 {
        let e = DVector::from_fn(n2, |i, _| if i == col { 1.0 } else { 0.0 });
        let v = -j_mul(&(&rt * j_mul(&e)));
        out.set_column(col, &v);
    }
    out
}

/// |R^T J R - J| (max-abs entry).
pub fn symplectic_defect(r: &DMatrix<f64>) -> f64 {
    let n2 = r.nrows();
    let n = n2 / 2;
    let mut worst: f64 = 0.0;
    // (R^T J R)_{ab} = sum_c R_{ca} (J R)_{cb};  (J R)_{cb} = R_{c+n,b} (c<n) or -R_{c-n,b}
    for a in 0..n2 {
        for b in 0..n2 {
            let mut s = 0.0;
            for c in 0..n2 {
                let jr = if c < n { r[(c + n, b)] } else { -r[(c - n, b)] };
                s += r[(c, a)] * jr;
            }
            let jab = if a < n && b == a + n {
                1.0
            } else if a >= n && b + n == a {
                -1.0
            } else {
                0.0
            };
            worst = worst.max((s - jab).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp(q: f64, p: f64) -> PhasePoint {
        PhasePoint::qp(q, p)
    }

    #[test]
    fn wedge_basics() {
        assert_eq!(wedge(&pp(1.0, 0.0), &pp(0.0, 1.0)).unwrap(), 1.0);
        let x = pp(0.3, -1.2);
        assert_eq!(wedge(&x, &x).unwrap(), 0.0);
        assert_eq!(wedge(&pp(2.0, 3.0), &pp(5.0, 7.0)).unwrap(), -1.0);
    }

    #[test]
    fn wedge_dimension_mismatch() {
        let a = pp(1.0, 0.0);
        let b = PhasePoint::new(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(wedge(&a, &b).is_err());
    }

    #[test]
    fn polygon_phase_triangle() {
        let pts = [pp(1.0, 0.0), pp(0.0, 1.0), pp(0.0, 0.0)];
        assert!((polygon_phase(&pts).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn polygon_phase_degenerate() {
        let pts = vec![pp(0.4, 0.4); 5];
        assert_eq!(polygon_phase(&pts).unwrap(), 0.0);
    }

    #[test]
    fn polygon_phase_reversal() {
        let pts = [pp(1.0, 0.2), pp(-0.3, 1.1), pp(0.7, -0.4), pp(0.0, 0.5)];
        let mut rev = pts.to_vec();
        rev.reverse();
        let a = polygon_phase(&pts).unwrap();
        let b = polygon_phase(&rev).unwrap();
        assert!((a + b).abs() < 1e-14);
    }

    #[test]
    fn polygon_needs_three() {
        assert!(polygon_phase(&[pp(0.0, 0.0), pp(1.0, 0.0)]).is_err());
    }

    #[test]
    fn alternating_sum_cases() {
        let x = pp(0.2, -0.7);
        let s = alternating_sum(&[x.clone()]).unwrap();
        assert_eq!(s, x);
        let z = alternating_sum(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(z.coords.norm(), 0.0);
        let s = alternating_sum(&[pp(1.0, 0.0), pp(0.0, 1.0), pp(2.0, 2.0)]).unwrap();
        assert_eq!(s, pp(3.0, 1.0));
    }

    #[test]
    fn chord_action_cases() {
        assert!((chord_action(&pp(0.0, 0.0), &pp(1.0, 1.0)) - 0.5).abs() < 1e-15);
        let x = pp(0.3, 0.9);
        assert_eq!(chord_action(&x, &x), 0.0);
        assert!((chord_action(&pp(0.0, 2.0), &pp(4.0, 2.0)) - 8.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_loop_matches_polygon_phase() {
        let mids = [pp(1.0, 0.0), pp(0.0, 1.0), pp(0.0, 0.0)];
        let cycle = polygon_vertices(&mids).unwrap();
        let lp = chord_loop(&cycle, LoopLabel::Polygon);
        let area = lp.area(TOL_GEOM).unwrap();
        assert!((area - polygon_phase(&mids).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn degenerate_loop_area_zero() {
        let x = pp(0.1, 0.2);
        let lp = chord_loop(&[x.clone(), x.clone(), x], LoopLabel::Polygon);
        assert_eq!(lp.area(TOL_GEOM).unwrap(), 0.0);
    }

    #[test]
    fn open_loop_rejected() {
        let lp = PhaseLoop::new(
            vec![
                Segment::Chord(pp(0.0, 0.0), pp(1.0, 0.0)),
                Segment::Chord(pp(1.0, 0.5), pp(0.0, 0.0)),
            ],
            LoopLabel::Polygon,
        );
        match lp.area(TOL_GEOM) {
            Err(MwkbError::LoopNotClosed { gap, .. }) => assert!((gap - 0.5).abs() < 1e-12),
            other => panic!("expected closure violation, got {other:?}"),
        }
    }

    #[test]
    fn affine_identity_and_translation() {
        let id = AffineMap::identity(1);
        let x = pp(0.7, -0.2);
        assert_eq!(id.apply(&x), x);

        let tr = AffineMap::new(DMatrix::identity(2, 2), pp(1.0, 0.0)).unwrap();
        assert_eq!(tr.apply(&pp(0.0, 0.0)), pp(-1.0, 0.0));
    }

    #[test]
    fn affine_rotation() {
        // rotation by pi/2 is symplectic for n=1
        let r = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let a = AffineMap::new(r.clone(), PhasePoint::zeros(1)).unwrap();
        let y = a.apply(&pp(1.0, 0.0));
        // R^{-1} (1,0) = R^T (1,0) = (0,-1)
        assert!((y.coords[0] - 0.0).abs() < 1e-14);
        assert!((y.coords[1] + 1.0).abs() < 1e-14);
        let back = a.apply_inverse(&y);
        assert!((&back.coords - &pp(1.0, 0.0).coords).norm() < 1e-14);
    }

    #[test]
    fn affine_rejects_non_symplectic() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(
            AffineMap::new(r, PhasePoint::zeros(1)),
            Err(MwkbError::NotSymplectic { .. })
        ));
    }
}
