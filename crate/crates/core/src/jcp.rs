//! Joint control of local computing iterations and transmission probability.
//!
//! Total training energy factors as `rounds(phi) * energy_per_round(phi)`
//! over `phi = (tx_prob, local_iters)`: the fitted round-count model times
//! the per-round energy (approximate communication power times transmit time
//! plus compute energy per iteration times iterations). Both factors are
//! positive and convex on the feasible box, so the product is minimized by
//! inner convex approximation: at an anchor point the objective is replaced
//! by the convex surrogate
//!
//! `rounds(phi) * energy(anchor) + rounds(anchor) * energy(phi)`,
//!
//! whose box-constrained minimizer is found by projected gradient descent
//! with backtracking; the outer loop steps toward that minimizer with a
//! slowly decaying step and stops when successive iterates agree. The final
//! iteration count is rounded to the nearest admissible integer (ties to the
//! smaller count, which costs less compute energy) and the probability is
//! re-polished one-dimensionally at that integer. An exhaustive grid search
//! over the same box serves as the verification oracle.

use crate::convergence::{rounds_model, RoundModelConstants};
use crate::energy::{comm_power, PowerExpr};
use crate::error::{Error, Result};

/// Smallest admissible transmission probability. The objective degenerates
/// as `p -> 0` (`ln p` blows up while the energy term vanishes); the clamp
/// sits far below any fitted optimum.
pub const MIN_TX_PROB: f64 = 1e-4;

const SUBPROBLEM_TOL: f64 = 1e-8;
const SUBPROBLEM_MAX_ITERS: usize = 10_000;
const OUTER_MAX_ITERS: usize = 10_000;

/// One point of the decision space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JcpPoint {
    pub tx_prob: f64,
    pub local_iters: f64,
}

/// Problem instance: fitted round-model constants, link constants, compute
/// energy and the feasible box.
#[derive(Debug, Clone, Copy)]
pub struct JcpProblem {
    pub constants: RoundModelConstants,
    /// Post-inversion receive power target.
    pub rho: f64,
    /// Rayleigh gain rate.
    pub rate: f64,
    /// Uplink transmission time per round, seconds.
    pub comm_time: f64,
    /// Compute energy per local iteration, joules.
    pub comp_energy: f64,
    pub max_tx_prob: f64,
    pub min_local_iters: u32,
    pub max_local_iters: u32,
}

impl JcpProblem {
    pub fn validate(&self) -> Result<()> {
        let k = &self.constants;
        if k.a < 0.0 || k.b < 0.0 || k.q < 0.0 {
            return Err(Error::Domain("round-model constants must be non-negative".into()));
        }
        if !(self.rho > 0.0 && self.rate > 0.0) {
            return Err(Error::Domain("rho and rate must be positive".into()));
        }
        if !(self.comm_time > 0.0 && self.comp_energy > 0.0) {
            return Err(Error::Domain(
                "transmission time and compute energy must be positive".into(),
            ));
        }
        if !(self.max_tx_prob > MIN_TX_PROB && self.max_tx_prob < 1.0) {
            return Err(Error::Domain(format!(
                "max transmission probability {} outside ({MIN_TX_PROB}, 1)",
                self.max_tx_prob
            )));
        }
        if self.min_local_iters < 1 || self.min_local_iters > self.max_local_iters {
            return Err(Error::Domain("empty local-iteration range".into()));
        }
        Ok(())
    }

    pub fn contains(&self, phi: &JcpPoint) -> bool {
        phi.tx_prob >= MIN_TX_PROB - 1e-15
            && phi.tx_prob <= self.max_tx_prob + 1e-15
            && phi.local_iters >= self.min_local_iters as f64 - 1e-12
            && phi.local_iters <= self.max_local_iters as f64 + 1e-12
    }

    fn project(&self, phi: JcpPoint) -> JcpPoint {
        JcpPoint {
            tx_prob: phi.tx_prob.clamp(MIN_TX_PROB, self.max_tx_prob),
            local_iters: phi
                .local_iters
                .clamp(self.min_local_iters as f64, self.max_local_iters as f64),
        }
    }

    /// Round-count factor of the objective.
    pub fn predicted_rounds(&self, phi: &JcpPoint) -> f64 {
        rounds_model(phi.local_iters, phi.tx_prob, &self.constants)
    }

    /// Energy-per-round factor: approximate communication power times
    /// transmission time plus compute energy for the local iterations.
    pub fn energy_per_round(&self, phi: &JcpPoint) -> f64 {
        let comm = comm_power(phi.tx_prob, self.rho, self.rate, PowerExpr::Approximate)
            .expect("tx_prob inside (0,1) on the feasible box");
        comm * self.comm_time + phi.local_iters * self.comp_energy
    }

    /// Total-energy objective: product of the two factors.
    pub fn objective(&self, phi: &JcpPoint) -> f64 {
        self.predicted_rounds(phi) * self.energy_per_round(phi)
    }

    /// Gradient of [`JcpProblem::predicted_rounds`].
    pub fn rounds_gradient(&self, phi: &JcpPoint) -> [f64; 2] {
        let k = &self.constants;
        let (p, h) = (phi.tx_prob, phi.local_iters);
        let q = k.q;
        let dp = -k.a * q / (p * p * h)
            - k.b * q / (2.0 * p.powf(1.5) * h.sqrt() * (p + q).sqrt());
        let dh = -k.a * (p + q) / (p * h * h)
            - k.b * (p + q).sqrt() / (2.0 * p.sqrt() * h.powf(1.5));
        [dp, dh]
    }

    /// Gradient of [`JcpProblem::energy_per_round`].
    pub fn energy_gradient(&self, phi: &JcpPoint) -> [f64; 2] {
        let p = phi.tx_prob;
        let u = p.ln();
        let scale = self.rho * self.rate * self.comm_time;
        let dp = scale * (2.0 * p * (1.0 - 1.0 / u).ln() + p / (u * (u - 1.0)));
        [dp, self.comp_energy]
    }

    /// Gradient of the product objective.
    pub fn objective_gradient(&self, phi: &JcpPoint) -> [f64; 2] {
        let r = self.predicted_rounds(phi);
        let e = self.energy_per_round(phi);
        let gr = self.rounds_gradient(phi);
        let ge = self.energy_gradient(phi);
        [gr[0] * e + r * ge[0], gr[1] * e + r * ge[1]]
    }

    /// Closed-form Hessians of the two factors, in `[[pp, ph], [hp, hh]]`
    /// layout. The round-count factor is positive definite on the interior
    /// (for positive constants); the energy factor has curvature only in the
    /// probability.
    pub fn hessians(&self, phi: &JcpPoint) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
        let k = &self.constants;
        let (p, h) = (phi.tx_prob, phi.local_iters);
        let q = k.q;
        let s = (p + q).sqrt();

        let dpp = 2.0 * k.a * q / (p.powi(3) * h)
            + 3.0 * k.b * q / (4.0 * h.sqrt() * p.powf(2.5) * s)
            + k.b * q / (4.0 * h.sqrt() * p.powf(1.5) * s.powi(3));
        let dhh = 2.0 * k.a * (p + q) / (p * h.powi(3))
            + 0.75 * k.b * s / (p.sqrt() * h.powf(2.5));
        let dph = k.a * q / (p * p * h * h)
            + k.b * q / (4.0 * p.powf(1.5) * h.powf(1.5) * s);
        let rounds_hess = [[dpp, dph], [dph, dhh]];

        let u = p.ln();
        let scale = self.rho * self.rate * self.comm_time;
        let epp = scale
            * (2.0 * (1.0 - 1.0 / u).ln() + 3.0 / (u * (u - 1.0))
                - (2.0 * u - 1.0) / (u * u * (u - 1.0) * (u - 1.0)));
        let energy_hess = [[epp, 0.0], [0.0, 0.0]];

        (rounds_hess, energy_hess)
    }

    /// Convex inner approximation anchored at `anchor`:
    /// `rounds(phi) * energy(anchor) + rounds(anchor) * energy(phi)`.
    pub fn surrogate(&self, phi: &JcpPoint, anchor: &JcpPoint) -> f64 {
        self.predicted_rounds(phi) * self.energy_per_round(anchor)
            + self.predicted_rounds(anchor) * self.energy_per_round(phi)
    }

    pub fn surrogate_gradient(&self, phi: &JcpPoint, anchor: &JcpPoint) -> [f64; 2] {
        let e_anchor = self.energy_per_round(anchor);
        let r_anchor = self.predicted_rounds(anchor);
        let gr = self.rounds_gradient(phi);
        let ge = self.energy_gradient(phi);
        [
            gr[0] * e_anchor + r_anchor * ge[0],
            gr[1] * e_anchor + r_anchor * ge[1],
        ]
    }

    /// Norm of the projected gradient step, the first-order optimality
    /// residual on the box.
    fn projected_gradient_norm(&self, phi: &JcpPoint, grad: [f64; 2]) -> f64 {
        let stepped = self.project(JcpPoint {
            tx_prob: phi.tx_prob - grad[0],
            local_iters: phi.local_iters - grad[1],
        });
        let dp = phi.tx_prob - stepped.tx_prob;
        let dh = phi.local_iters - stepped.local_iters;
        (dp * dp + dh * dh).sqrt()
    }

    /// Box-constrained minimizer of the surrogate by projected gradient
    /// descent with Barzilai-Borwein step seeding and Armijo backtracking.
    pub fn solve_surrogate(&self, anchor: &JcpPoint) -> Result<JcpPoint> {
        self.validate()?;
        if !self.contains(anchor) {
            return Err(Error::Domain(format!("anchor {anchor:?} outside the feasible box")));
        }
        let f = |x: &JcpPoint| self.surrogate(x, anchor);
        let g = |x: &JcpPoint| self.surrogate_gradient(x, anchor);

        let mut x = *anchor;
        let mut fx = f(&x);
        let mut gx = g(&x);
        let mut step = 1e-2;
        let mut prev: Option<(JcpPoint, [f64; 2])> = None;
        let mut stagnant = 0u32;
        for _ in 0..SUBPROBLEM_MAX_ITERS {
            if self.projected_gradient_norm(&x, gx) <= SUBPROBLEM_TOL {
                return Ok(x);
            }
            // badly scaled instances bottom out above the absolute tolerance;
            // a long run without measurable descent is machine-precision
            // stationarity of a convex problem
            if stagnant >= 10 {
                return Ok(x);
            }
            // Barzilai-Borwein step from the previous pair, when sane
            if let Some((px, pg)) = prev {
                let sx = [x.tx_prob - px.tx_prob, x.local_iters - px.local_iters];
                let sy = [gx[0] - pg[0], gx[1] - pg[1]];
                let ss = sx[0] * sx[0] + sx[1] * sx[1];
                let sy_dot = sx[0] * sy[0] + sx[1] * sy[1];
                if sy_dot > 1e-300 {
                    step = (ss / sy_dot).clamp(1e-12, 1e12);
                }
            }
            // Armijo backtracking along the projected path
            let mut t = step;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = self.project(JcpPoint {
                    tx_prob: x.tx_prob - t * gx[0],
                    local_iters: x.local_iters - t * gx[1],
                });
                let dir = [cand.tx_prob - x.tx_prob, cand.local_iters - x.local_iters];
                let decrease = gx[0] * dir[0] + gx[1] * dir[1];
                let fc = f(&cand);
                if fc <= fx + 1e-4 * decrease {
                    if fx - fc <= 1e-15 * fx.abs() {
                        stagnant += 1;
                    } else {
                        stagnant = 0;
                    }
                    prev = Some((x, gx));
                    x = cand;
                    fx = fc;
                    gx = g(&x);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // step collapsed: already at numerical stationarity
                return Ok(x);
            }
        }
        Err(Error::SolverStall {
            iterations: SUBPROBLEM_MAX_ITERS,
            residual: self.projected_gradient_norm(&x, gx),
        })
    }

    /// One-dimensional polish of the transmission probability at a fixed
    /// integer iteration count: coarse scan plus golden-section refinement
    /// of the true objective.
    fn polish_tx_prob(&self, local_iters: u32) -> f64 {
        let h = local_iters as f64;
        let obj = |p: f64| {
            self.objective(&JcpPoint {
                tx_prob: p,
                local_iters: h,
            })
        };
        let n = 2000;
        let span = self.max_tx_prob - MIN_TX_PROB;
        let mut best_i = 0usize;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            let p = MIN_TX_PROB + span * i as f64 / n as f64;
            let v = obj(p);
            if v < best {
                best = v;
                best_i = i;
            }
        }
        let lo = MIN_TX_PROB + span * best_i.saturating_sub(1) as f64 / n as f64;
        let hi = MIN_TX_PROB + span * (best_i + 1).min(n) as f64 / n as f64;
        golden_section(&obj, lo, hi, 1e-10)
    }
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 { x1 } else { x2 }
}

/// Result of the control loop.
#[derive(Debug, Clone, serde::Serialize)]
pub struct JcpSolution {
    pub tx_prob: f64,
    pub local_iters: u32,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `(tx_prob, local_iters, objective)` per outer iteration.
    pub trace: Vec<(f64, f64, f64)>,
}

/// Inner-convex-approximation loop: from a feasible start, repeatedly solve
/// the anchored surrogate, step toward its minimizer with the decaying step
/// `gamma <- gamma (1 - decay * gamma)`, and stop once the squared move is
/// at most `move_tol`. The objective is checked to be non-increasing along
/// the iterates (a diagnostic, not an algorithmic assumption). The final
/// iteration count is rounded to the nearest admissible integer, ties to the
/// smaller one, and the probability re-polished at that integer.
pub fn solve_jcp(
    prob: &JcpProblem,
    initial_step: f64,
    decay: f64,
    move_tol: f64,
) -> Result<JcpSolution> {
    prob.validate()?;
    if !(initial_step > 0.0 && initial_step <= 1.0) {
        return Err(Error::Domain(format!("initial step {initial_step} outside (0, 1]")));
    }
    if !(decay > 0.0) || !(move_tol > 0.0) {
        return Err(Error::Domain("decay and tolerance must be positive".into()));
    }

    let mut phi = JcpPoint {
        tx_prob: prob.max_tx_prob,
        local_iters: prob.min_local_iters as f64,
    };
    let mut gamma = initial_step;
    let mut objective = prob.objective(&phi);
    let mut trace = vec![(phi.tx_prob, phi.local_iters, objective)];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..OUTER_MAX_ITERS {
        iterations = iter + 1;
        let target = prob.solve_surrogate(&phi)?;
        let next = prob.project(JcpPoint {
            tx_prob: phi.tx_prob + gamma * (target.tx_prob - phi.tx_prob),
            local_iters: phi.local_iters + gamma * (target.local_iters - phi.local_iters),
        });
        let next_obj = prob.objective(&next);
        if next_obj > objective * (1.0 + 1e-9) + 1e-300 {
            return Err(Error::NonMonotoneObjective {
                iteration: iterations,
                previous: objective,
                current: next_obj,
            });
        }
        let dp = next.tx_prob - phi.tx_prob;
        let dh = next.local_iters - phi.local_iters;
        let moved_sq = dp * dp + dh * dh;
        phi = next;
        objective = next_obj;
        trace.push((phi.tx_prob, phi.local_iters, objective));
        gamma *= 1.0 - decay * gamma;
        if moved_sq <= move_tol {
            converged = true;
            break;
        }
    }

    // integer feasibility: nearest admissible count, ties to the smaller
    let frac = phi.local_iters.fract();
    let rounded = if (frac - 0.5).abs() < 1e-12 {
        phi.local_iters.floor()
    } else {
        phi.local_iters.round()
    }
    .clamp(prob.min_local_iters as f64, prob.max_local_iters as f64);
    let local_iters = rounded as u32;
    let tx_prob = prob.polish_tx_prob(local_iters);
    let final_phi = JcpPoint {
        tx_prob,
        local_iters: local_iters as f64,
    };

    Ok(JcpSolution {
        tx_prob,
        local_iters,
        objective: prob.objective(&final_phi),
        iterations,
        converged,
        trace,
    })
}

/// Exhaustive minimizer of the true objective over the discretized box:
/// probabilities at `prob_step` spacing (always including the upper bound),
/// integer iteration counts. Strict improvement keeps the lowest-index
/// argmin on ties.
pub fn grid_search(prob: &JcpProblem, prob_step: f64) -> Result<JcpPoint> {
    prob.validate()?;
    if !(prob_step > 0.0) {
        return Err(Error::Domain("grid step must be positive".into()));
    }
    // descend from the upper bound so the grid always contains it
    let span = prob.max_tx_prob - MIN_TX_PROB;
    let cells = (span / prob_step).floor() as usize;
    let mut best = JcpPoint {
        tx_prob: prob.max_tx_prob,
        local_iters: prob.min_local_iters as f64,
    };
    let mut best_obj = f64::INFINITY;
    for h in prob.min_local_iters..=prob.max_local_iters {
        for i in 0..=cells {
            let p = (prob.max_tx_prob - i as f64 * prob_step).max(MIN_TX_PROB);
            let phi = JcpPoint {
                tx_prob: p,
                local_iters: h as f64,
            };
            let v = prob.objective(&phi);
            if v < best_obj {
                best_obj = v;
                best = phi;
            }
        }
    }
    Ok(best)
}
