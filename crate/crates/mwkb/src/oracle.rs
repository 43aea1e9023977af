//! Exact quantum references on position grids: split-step Fourier
//! propagation of wave functions, propagator matrices, Heisenberg evolution
//! of Gaussian-symbol observables, and coherent-state smoothed fields.
//! Restricted to Hamiltonians of the separable form p^2/(2m) + V(q).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::sync::Arc;

use crate::error::{MwkbError, Result};
use crate::grid::SymbolGrid;
use crate::weyl::{wigner_transform, wigner_transform_kernel, WaveFunction};

/// Grid and stepping configuration for the split-step solver.
#[derive(Clone)]
pub struct SplitStepConfig {
    pub q0: f64,
    pub dq: f64,
    pub n: usize,
    pub hbar: f64,
    pub mass: f64,
    pub potential: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Steps per unit time.
    pub steps_per_unit: usize,
}

impl SplitStepConfig {
    pub fn new(
        q0: f64,
        dq: f64,
        n: usize,
        hbar: f64,
        potential: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ) -> Self {
        Self {
            q0,
            dq,
            n,
            hbar,
            mass: 1.0,
            potential,
            steps_per_unit: 4000,
        }
    }

    fn q(&self, j: usize) -> f64 {
        self.q0 + j as f64 * self.dq
    }

    /// FFT momentum for bin j.
    fn momentum(&self, j: usize) -> f64 {
        let n = self.n;
        let f = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
        2.0 * std::f64::consts::PI * self.hbar * f / (n as f64 * self.dq)
    }

    fn steps_for(&self, t: f64) -> usize {
        ((t.abs() * self.steps_per_unit as f64).ceil() as usize).max(1)
    }

    /// Crude phase-per-step bound dt E_max / hbar < 0.1 at grid scale.
    pub fn check_step(&self, t: f64) -> Result<()> {
        let dt = t.abs() / self.steps_for(t) as f64;
        let mut e_max = 0.0f64;
        for j in 0..self.n {
            let v = (self.potential)(self.q(j)).abs();
            e_max = e_max.max(v);
        }
        let p_max = std::f64::consts::PI * self.hbar / self.dq;
        e_max = e_max.max(p_max * p_max / (2.0 * self.mass));
        if dt * e_max / self.hbar >= std::f64::consts::PI {
            return Err(MwkbError::Aliasing {
                hbar: self.hbar,
                reason: format!(
                    "split step too large: dt E_max/hbar = {:.2}",
                    dt * e_max / self.hbar
                ),
            });
        }
        Ok(())
    }
}

/// Strang-split propagation of a wave function by time t (t may be negative).
pub fn propagate(psi0: &WaveFunction, cfg: &SplitStepConfig, t: f64) -> Result<WaveFunction> {
    assert_eq!(psi0.len(), cfg.n, "grid mismatch");
    cfg.check_step(t)?;
    let norm0 = psi0.norm();
    let mut values = psi0.values.clone();
    step_columns(&mut values, cfg, t, 1);
    let out = WaveFunction {
        q0: cfg.q0,
        dq: cfg.dq,
        values,
        hbar: cfg.hbar,
    };
    let drift = (out.norm() - norm0).abs();
    if drift > 1e-8 {
        return Err(MwkbError::NormDrift { drift });
    }
    Ok(out)
}

/// The discrete propagator matrix U(t): split-step applied to every basis
/// column at once. Columns are independent, so the FFT passes batch over
/// the whole matrix.
pub fn propagator_matrix(cfg: &SplitStepConfig, t: f64) -> Result<DMatrix<Complex64>> {
    cfg.check_step(t)?;
    let n = cfg.n;
    // column-major storage: ncols independent wave functions
    let mut cols: Vec<Vec<Complex64>> = (0..n)
        .map(|c| {
            let mut v = vec![Complex64::new(0.0, 0.0); n];
            v[c] = Complex64::new(1.0, 0.0);
            v
        })
        .collect();
    cols.par_iter_mut()
        .for_each(|col| step_columns(col, cfg, t, 1));
    let mut m = DMatrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for r in 0..n {
            m[(r, c)] = col[r];
        }
    }
    Ok(m)
}

fn step_columns(values: &mut [Complex64], cfg: &SplitStepConfig, t: f64, _batch: usize) {
    let n = cfg.n;
    let steps = cfg.steps_for(t);
    let dt = t / steps as f64;
    let half_v: Vec<Complex64> = (0..n)
        .map(|j| {
            Complex64::new(
                0.0,
                -(cfg.potential)(cfg.q(j)) * dt / (2.0 * cfg.hbar),
            )
            .exp()
        })
        .collect();
    let kin: Vec<Complex64> = (0..n)
        .map(|j| {
            let p = cfg.momentum(j);
            Complex64::new(0.0, -p * p * dt / (2.0 * cfg.mass * cfg.hbar)).exp()
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let inv_n = 1.0 / n as f64;
    for _ in 0..steps {
        for (v, h) in values.iter_mut().zip(&half_v) {
            *v *= h;
        }
        fft.process(values);
        for (v, k) in values.iter_mut().zip(&kin) {
            *v *= k;
        }
        ifft.process(values);
        for (v, h) in values.iter_mut().zip(&half_v) {
            *v = *v * h * inv_n;
        }
    }
}

/// Heisenberg-evolved Weyl symbol of a pure state: propagate then Wigner
/// transform.
pub fn exact_rho_symbol(psi0: &WaveFunction, cfg: &SplitStepConfig, t: f64) -> Result<SymbolGrid> {
    let psi_t = propagate(psi0, cfg, t)?;
    let mut g = wigner_transform(&psi_t)?;
    g.meta.t = t;
    g.meta.kind = "rho_oracle".into();
    Ok(g)
}

/// Closed-form Weyl kernel of the Gaussian symbol
/// A(x) = exp(-[(q-qc)^2 + (p-pc)^2] / (2 w^2)):
/// K(a,b) = w/(hbar sqrt(2 pi)) exp(-((a+b)/2-qc)^2/(2w^2))
///          exp(-w^2 (a-b)^2 / (2 hbar^2)) exp(i pc (a-b)/hbar).
pub fn gaussian_symbol_kernel(
    cfg: &SplitStepConfig,
    qc: f64,
    pc: f64,
    width: f64,
) -> DMatrix<Complex64> {
    let n = cfg.n;
    let pref = width / (cfg.hbar * (2.0 * std::f64::consts::PI).sqrt());
    DMatrix::from_fn(n, n, |a, b| {
        let qa = cfg.q(a);
        let qb = cfg.q(b);
        let mid = 0.5 * (qa + qb) - qc;
        let v = qa - qb;
        let env = (-mid * mid / (2.0 * width * width)
            - width * width * v * v / (2.0 * cfg.hbar * cfg.hbar))
            .exp();
        pref * env * Complex64::new(0.0, pc * v / cfg.hbar).exp()
    })
}

/// Evolves a Gaussian-symbol observable through U A0 U^dagger and returns its
/// Weyl symbol (the reference for Heisenberg symbol transport).
pub fn evolve_gaussian_observable(
    cfg: &SplitStepConfig,
    qc: f64,
    pc: f64,
    width: f64,
    t: f64,
) -> Result<SymbolGrid> {
    let k0 = gaussian_symbol_kernel(cfg, qc, pc, width);
    let u = propagator_matrix(cfg, t)?;
    let kt = &u * k0 * u.adjoint();
    let mut g = wigner_transform_kernel(&kt, cfg.q0, cfg.dq, cfg.hbar)?;
    g.meta.t = t;
    g.meta.kind = "observable_oracle".into();
    Ok(g)
}

/// A coherent state centered at (qc, pc):
/// (pi hbar)^{-1/4} exp(-(q-qc)^2/(2 hbar) + i pc (q - qc/2)/hbar).
pub fn coherent_state(cfg: &SplitStepConfig, qc: f64, pc: f64) -> WaveFunction {
    WaveFunction::from_fn(cfg.q0, cfg.dq, cfg.n, cfg.hbar, |q| {
        let amp = (std::f64::consts::PI * cfg.hbar).powf(-0.25)
            * (-(q - qc) * (q - qc) / (2.0 * cfg.hbar)).exp();
        amp * Complex64::new(0.0, pc * (q - 0.5 * qc) / cfg.hbar).exp()
    })
}

/// <z| U(t) |z>: equals the Gaussian-smoothed Weyl symbol of U(t) at z with
/// window 2 exp(-|x-z|^2/hbar) / h. Pointwise evolution-symbol values are not
/// grid-accessible (the kernel does not decay), but this smoothing is, and it
/// preserves the field's sign structure across caustics.
pub fn smoothed_u_oracle(cfg: &SplitStepConfig, z: (f64, f64), t: f64) -> Result<Complex64> {
    let psi = coherent_state(cfg, z.0, z.1);
    let psi_t = propagate(&psi, cfg, t)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..cfg.n {
        acc += psi.values[j].conj() * psi_t.values[j];
    }
    Ok(acc * cfg.dq)
}

/// The same Gaussian smoothing applied to a symbol grid:
/// (2 pi hbar)^{-1} int f(x') 2 exp(-|x'-z|^2/hbar) dx'.
pub fn smooth_symbol_at(grid: &SymbolGrid, z: (f64, f64), hbar: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for iq in 0..grid.axes.nq {
        let q = grid.axes.q(iq);
        for ip in 0..grid.axes.np {
            let p = grid.axes.p(ip);
            let w = 2.0 * (-((q - z.0) * (q - z.0) + (p - z.1) * (p - z.1)) / hbar).exp();
            acc += grid.values[grid.axes.index(iq, ip)] * w;
        }
    }
    acc * grid.axes.dq * grid.axes.dp / (2.0 * std::f64::consts::PI * hbar)
}

/// Energy expectation <psi| p^2/2m + V |psi> on the grid.
pub fn energy_expectation(psi: &WaveFunction, cfg: &SplitStepConfig) -> f64 {
    let n = cfg.n;
    let mut spec = psi.values.clone();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    let mut kinetic = 0.0;
    let mut norm_spec = 0.0;
    for j in 0..n {
        let p = cfg.momentum(j);
        kinetic += p * p / (2.0 * cfg.mass) * spec[j].norm_sqr();
        norm_spec += spec[j].norm_sqr();
    }
    kinetic /= norm_spec;
    let mut potential = 0.0;
    let mut norm = 0.0;
    for j in 0..n {
        potential += (cfg.potential)(cfg.q(j)) * psi.values[j].norm_sqr();
        norm += psi.values[j].norm_sqr();
    }
    kinetic + potential / norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ho_cfg(n: usize, l: f64, hbar: f64) -> SplitStepConfig {
        SplitStepConfig::new(
            -l / 2.0,
            l / n as f64,
            n,
            hbar,
            Arc::new(|q: f64| 0.5 * q * q),
        )
    }

    #[test]
    fn free_gaussian_spreading() {
        let n = 512;
        let l = 40.0;
        let cfg = SplitStepConfig::new(-l / 2.0, l / n as f64, n, 1.0, Arc::new(|_| 0.0));
        let psi0 = WaveFunction::from_fn(cfg.q0, cfg.dq, n, 1.0, |q| {
            Complex64::new(std::f64::consts::PI.powf(-0.25) * (-q * q / 2.0).exp(), 0.0)
        });
        let t = 2.0;
        let psi_t = propagate(&psi0, &cfg, t).unwrap();
        // closed form: psi(t,q) = pi^{-1/4} (1+it)^{-1/2} exp(-q^2/(2(1+it)))
        let mut worst = 0.0f64;
        for j in 0..n {
            let q = cfg.q(j);
            let z = Complex64::new(1.0, t);
            let exact = std::f64::consts::PI.powf(-0.25) / z.sqrt()
                * (-(q * q) / (2.0 * z)).exp();
            worst = worst.max((psi_t.values[j] - exact).norm());
        }
        assert!(worst < 1e-8, "free spreading error {worst}");
    }

    #[test]
    fn zero_time_identity() {
        let cfg = ho_cfg(128, 20.0, 1.0);
        let psi0 = coherent_state(&cfg, 1.0, 0.0);
        let psi_t = propagate(&psi0, &cfg, 0.0).unwrap();
        let worst = psi0
            .values
            .iter()
            .zip(&psi_t.values)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).norm()));
        assert!(worst < 1e-13);
    }

    #[test]
    fn coherent_state_rigid_rotation() {
        let cfg = ho_cfg(512, 24.0, 0.5);
        let psi0 = coherent_state(&cfg, 1.0, 0.0);
        let t = 1.0;
        let w = exact_rho_symbol(&psi0, &cfg, t).unwrap();
        // rho(t,x) = rho0(g(-t|x)); center moves to (cos t, -sin t)
        let mut worst = 0.0f64;
        for iq in 0..w.axes.nq {
            let q = w.axes.q(iq);
            if q.abs() > 3.0 {
                continue;
            }
            for ip in 0..w.axes.np {
                let p = w.axes.p(ip);
                if p.abs() > 3.0 {
                    continue;
                }
                let (c, s) = (t.cos(), t.sin());
                let qb = c * q - s * p;
                let pb = s * q + c * p;
                let exact =
                    2.0 * (-(((qb - 1.0) * (qb - 1.0)) + pb * pb) / cfg.hbar).exp();
                worst = worst.max((w.value_at(iq, ip).re - exact).abs());
            }
        }
        assert!(worst < 1e-6, "rotation error {worst}");
    }

    #[test]
    fn norm_and_energy_conservation() {
        let n = 512;
        let l = 24.0;
        let cfg = SplitStepConfig::new(
            -l / 2.0,
            l / n as f64,
            n,
            0.5,
            Arc::new(|q: f64| 0.5 * q * q + 0.1 * q * q * q * q),
        );
        let psi0 = coherent_state(&cfg, 1.0, 0.3);
        let e0 = energy_expectation(&psi0, &cfg);
        let psi_t = propagate(&psi0, &cfg, 2.0).unwrap();
        assert!((psi_t.norm() - 1.0).abs() < 1e-10);
        let e1 = energy_expectation(&psi_t, &cfg);
        assert!((e1 - e0).abs() / e0.abs() < 1e-6, "energy drift {e0} -> {e1}");
    }

    #[test]
    fn step_halving_consistency() {
        let cfg = ho_cfg(256, 20.0, 0.5);
        let psi0 = coherent_state(&cfg, 0.8, -0.4);
        let a = propagate(&psi0, &cfg, 1.0).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.steps_per_unit *= 2;
        let b = propagate(&psi0, &cfg2, 1.0).unwrap();
        let worst = a
            .values
            .iter()
            .zip(&b.values)
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).norm()));
        assert!(worst < 1e-8, "step-size sensitivity {worst}");
    }

    #[test]
    fn gaussian_observable_kernel_round_trip() {
        let cfg = ho_cfg(256, 16.0, 0.25);
        let k0 = gaussian_symbol_kernel(&cfg, 0.3, -0.2, 1.0);
        let g = wigner_transform_kernel(&k0, cfg.q0, cfg.dq, cfg.hbar).unwrap();
        let mut worst = 0.0f64;
        for iq in 0..g.axes.nq {
            let q = g.axes.q(iq);
            for ip in 0..g.axes.np {
                let p = g.axes.p(ip);
                let exact = (-((q - 0.3) * (q - 0.3) + (p + 0.2) * (p + 0.2)) / 2.0).exp();
                worst = worst.max((g.value_at(iq, ip) - exact).norm());
            }
        }
        assert!(worst < 1e-7, "kernel round trip {worst}");
    }

    #[test]
    fn ho_observable_transport_exact() {
        let cfg = ho_cfg(256, 16.0, 0.25);
        let t = 1.0;
        let g = evolve_gaussian_observable(&cfg, 0.3, -0.2, 1.0, t).unwrap();
        let mut worst = 0.0f64;
        for iq in 0..g.axes.nq {
            let q = g.axes.q(iq);
            if q.abs() > 3.0 {
                continue;
            }
            for ip in 0..g.axes.np {
                let p = g.axes.p(ip);
                if p.abs() > 2.0 {
                    continue;
                }
                let (c, s) = (t.cos(), t.sin());
                let qb = c * q - s * p;
                let pb = s * q + c * p;
                let exact =
                    (-((qb - 0.3) * (qb - 0.3) + (pb + 0.2) * (pb + 0.2)) / 2.0).exp();
                worst = worst.max((g.value_at(iq, ip).re - exact).abs());
            }
        }
        assert!(worst < 1e-6, "transport error {worst}");
    }

    #[test]
    fn smoothed_u_matches_exact_ho_symbol() {
        // <z|U|z> against the smoothing of sec(t/2) exp(-i tan(t/2) r^2/hbar)
        let cfg = ho_cfg(1024, 40.0, 1.0);
        let t = 2.5;
        let axes = crate::grid::GridAxes::centered(10.0, 400);
        let meta = crate::grid::GridMeta {
            t,
            hbar: 1.0,
            kind: "test".into(),
            scenario_hash: String::new(),
        };
        let sec = 1.0 / (t / 2.0).cos();
        let tan = (t / 2.0).tan();
        let exact = SymbolGrid::from_fn(axes, meta, |q, p| {
            sec * Complex64::new(0.0, -tan * (q * q + p * p)).exp()
        });
        for z in [(0.5, 0.0), (1.0, 0.8), (0.0, 1.5)] {
            let a = smoothed_u_oracle(&cfg, z, t).unwrap();
            let b = smooth_symbol_at(&exact, z, 1.0);
            assert!((a - b).norm() < 1e-5, "z={z:?}: {a} vs {b}");
        }
    }
}
