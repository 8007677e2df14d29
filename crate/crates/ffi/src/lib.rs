//! C ABI for the over-the-air federated learning simulator.
//!
//! The surface covers the analysis and control entry points other languages
//! want to drive: the exponential integral and communication power model,
//! power-control probability maps, the quantizer variance constant, the
//! convergence bound and round-count model, the joint controller behind an
//! opaque handle, and whole experiment runs from a configuration file.
//! Every function returns an [`EsoaflStatus`]; results come back through out
//! pointers. The header is generated by cbindgen into `include/esoafl.h`.

use esoafl::channel;
use esoafl::config::ExperimentConfig;
use esoafl::convergence::{self, BoundParams, RoundModelConstants};
use esoafl::energy::{self, PowerExpr};
use esoafl::jcp::{self, JcpProblem};
use esoafl::quantizer::{self, ScaleRegime};
use esoafl::rng::SeedTree;
use esoafl::runner::{self, RunOptions};
use esoafl::Error;
use std::ffi::CStr;
use std::os::raw::c_char;
use std::path::PathBuf;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsoaflStatus {
    Ok = 0,
    /// A pointer argument was null.
    NullPointer = 1,
    /// An argument fell outside its mathematical domain.
    DomainError = 2,
    /// Inputs were structurally invalid (bad spec, bad config, bad UTF-8).
    InvalidArgument = 3,
    /// A solver failed to converge.
    SolverFailure = 4,
    /// The requested run finished without reaching its target.
    NotConverged = 5,
    /// Filesystem failure.
    IoError = 6,
}

fn status_of(err: &Error) -> EsoaflStatus {
    match err {
        Error::Domain(_) | Error::NotApplicable(_) => EsoaflStatus::DomainError,
        Error::SolverStall { .. } | Error::NonMonotoneObjective { .. } | Error::IllPosedFit(_) => {
            EsoaflStatus::SolverFailure
        }
        Error::Io(_) => EsoaflStatus::IoError,
        _ => EsoaflStatus::InvalidArgument,
    }
}

unsafe fn write_out<T>(ptr: *mut T, value: T) -> EsoaflStatus {
    if ptr.is_null() {
        return EsoaflStatus::NullPointer;
    }
    unsafe { ptr.write(value) };
    EsoaflStatus::Ok
}

/// Exponential integral E1(x) for x > 0.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_e1(x: f64, out: *mut f64) -> EsoaflStatus {
    match energy::e1(x) {
        Ok(v) => unsafe { write_out(out, v) },
        Err(e) => status_of(&e),
    }
}

/// Average communication power under threshold power control; `exact != 0`
/// selects the exponential-integral form, otherwise the elementary upper
/// bound used inside the optimizer.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_comm_power(
    tx_prob: f64,
    rho: f64,
    rate: f64,
    exact: i32,
    out: *mut f64,
) -> EsoaflStatus {
    let expr = if exact != 0 {
        PowerExpr::Exact
    } else {
        PowerExpr::Approximate
    };
    match energy::comm_power(tx_prob, rho, rate, expr) {
        Ok(v) => unsafe { write_out(out, v) },
        Err(e) => status_of(&e),
    }
}

/// Transmission probability induced by a channel-gain threshold.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_probability_from_threshold(
    gain_threshold: f64,
    rate: f64,
    out: *mut f64,
) -> EsoaflStatus {
    if !(rate > 0.0) || gain_threshold < 0.0 {
        return EsoaflStatus::DomainError;
    }
    unsafe { write_out(out, channel::probability_from_threshold(gain_threshold, rate)) }
}

/// Channel-gain threshold achieving a transmission probability.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_threshold_from_probability(
    tx_prob: f64,
    rate: f64,
    out: *mut f64,
) -> EsoaflStatus {
    match channel::threshold_from_probability(tx_prob, rate) {
        Ok(v) => unsafe { write_out(out, v) },
        Err(e) => status_of(&e),
    }
}

/// Budget-limited maximum transmission probability
/// `exp(-rate * rho / power_budget)`.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_max_tx_probability(
    rate: f64,
    rho: f64,
    power_budget: f64,
    out: *mut f64,
) -> EsoaflStatus {
    if !(rate > 0.0 && rho > 0.0 && power_budget > 0.0) {
        return EsoaflStatus::DomainError;
    }
    unsafe { write_out(out, (-rate * rho / power_budget).exp()) }
}

/// Monte-Carlo estimate of the quantizer variance constant `q` under the
/// common-scale regime, with its standard error.
///
/// # Safety
/// `out_q` and `out_se` must be valid pointers to doubles.
#[no_mangle]
pub unsafe extern "C" fn esoafl_estimate_quant_constant(
    bits: u8,
    dim: usize,
    clients: usize,
    trials: usize,
    seed: u64,
    out_q: *mut f64,
    out_se: *mut f64,
) -> EsoaflStatus {
    let mut rng = SeedTree::new(seed).rng(&[esoafl::rng::stream::QUANT]);
    match quantizer::estimate_q(bits, ScaleRegime { dim, clients }, trials, &mut rng) {
        Ok((q, se)) => {
            let s = unsafe { write_out(out_q, q) };
            if s != EsoaflStatus::Ok {
                return s;
            }
            unsafe { write_out(out_se, se) }
        }
        Err(e) => status_of(&e),
    }
}

/// Inputs of the convergence bound.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EsoaflBoundParams {
    pub smoothness: f64,
    pub grad_var: f64,
    pub noise_var: f64,
    pub init_gap: f64,
    pub eta: f64,
    pub theta: f64,
    pub local_iters: u32,
    pub rounds: u32,
    pub clients: u32,
    pub tx_prob: f64,
    pub quant_q: f64,
}

impl From<EsoaflBoundParams> for BoundParams {
    fn from(p: EsoaflBoundParams) -> Self {
        BoundParams {
            smoothness: p.smoothness,
            grad_var: p.grad_var,
            noise_var: p.noise_var,
            init_gap: p.init_gap,
            eta: p.eta,
            theta: p.theta,
            local_iters: p.local_iters,
            rounds: p.rounds,
            clients: p.clients,
            tx_prob: p.tx_prob,
            quant_q: p.quant_q,
        }
    }
}

/// Evaluate the convergence bound; fails with `DomainError` when the
/// learning-rate condition is violated.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_convergence_bound(
    params: EsoaflBoundParams,
    out: *mut f64,
) -> EsoaflStatus {
    match convergence::convergence_bound(&params.into()) {
        Ok(v) => unsafe { write_out(out, v) },
        Err(e) => status_of(&e),
    }
}

/// Round-count model `a (p+q)/(p H) + b sqrt((p+q)/(p H)) + c`.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_rounds_model(
    local_iters: f64,
    tx_prob: f64,
    a: f64,
    b: f64,
    c: f64,
    q: f64,
    out: *mut f64,
) -> EsoaflStatus {
    if !(local_iters >= 1.0) || !(tx_prob > 0.0 && tx_prob <= 1.0) {
        return EsoaflStatus::DomainError;
    }
    let v = convergence::rounds_model(local_iters, tx_prob, &RoundModelConstants { a, b, c, q });
    unsafe { write_out(out, v) }
}

/// Opaque joint-controller problem handle.
pub struct EsoaflJcpProblem {
    inner: JcpProblem,
}

/// Solution of the joint controller.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EsoaflJcpSolution {
    pub tx_prob: f64,
    pub local_iters: u32,
    pub objective: f64,
    pub iterations: u64,
    pub converged: bool,
}

/// Build a controller problem. Returns null when the instance is invalid.
#[no_mangle]
pub extern "C" fn esoafl_jcp_problem_new(
    a: f64,
    b: f64,
    c: f64,
    q: f64,
    rho: f64,
    rate: f64,
    comm_time: f64,
    comp_energy: f64,
    max_tx_prob: f64,
    min_local_iters: u32,
    max_local_iters: u32,
) -> *mut EsoaflJcpProblem {
    let inner = JcpProblem {
        constants: RoundModelConstants { a, b, c, q },
        rho,
        rate,
        comm_time,
        comp_energy,
        max_tx_prob,
        min_local_iters,
        max_local_iters,
    };
    if inner.validate().is_err() {
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(EsoaflJcpProblem { inner }))
}

/// Release a controller problem.
///
/// # Safety
/// `problem` must be a pointer from [`esoafl_jcp_problem_new`], not yet
/// freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn esoafl_jcp_problem_free(problem: *mut EsoaflJcpProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Total-energy objective at a point of the decision space.
///
/// # Safety
/// `problem` must be a live handle from [`esoafl_jcp_problem_new`]; `out`
/// must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn esoafl_jcp_objective(
    problem: *const EsoaflJcpProblem,
    tx_prob: f64,
    local_iters: f64,
    out: *mut f64,
) -> EsoaflStatus {
    if problem.is_null() {
        return EsoaflStatus::NullPointer;
    }
    let prob = unsafe { &(*problem).inner };
    let phi = jcp::JcpPoint {
        tx_prob,
        local_iters,
    };
    if !prob.contains(&phi) {
        return EsoaflStatus::DomainError;
    }
    unsafe { write_out(out, prob.objective(&phi)) }
}

/// Run the inner-convex-approximation control loop and report the solution.
///
/// # Safety
/// `problem` must be a live handle from [`esoafl_jcp_problem_new`]; `out`
/// must be a valid pointer to an [`EsoaflJcpSolution`].
#[no_mangle]
pub unsafe extern "C" fn esoafl_jcp_solve(
    problem: *const EsoaflJcpProblem,
    initial_step: f64,
    step_decay: f64,
    move_tol: f64,
    out: *mut EsoaflJcpSolution,
) -> EsoaflStatus {
    if problem.is_null() {
        return EsoaflStatus::NullPointer;
    }
    let prob = unsafe { &(*problem).inner };
    match jcp::solve_jcp(prob, initial_step, step_decay, move_tol) {
        Ok(sol) => unsafe {
            write_out(
                out,
                EsoaflJcpSolution {
                    tx_prob: sol.tx_prob,
                    local_iters: sol.local_iters,
                    objective: sol.objective,
                    iterations: sol.iterations as u64,
                    converged: sol.converged,
                },
            )
        },
        Err(e) => status_of(&e),
    }
}

/// Execute a whole experiment from a TOML configuration file; artifacts land
/// in the configured output directory. Returns `NotConverged` when the task
/// ran but missed its target.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string; it is only read.
#[no_mangle]
pub unsafe extern "C" fn esoafl_run_config(config_path: *const c_char) -> EsoaflStatus {
    if config_path.is_null() {
        return EsoaflStatus::NullPointer;
    }
    let path = match unsafe { CStr::from_ptr(config_path) }.to_str() {
        Ok(s) => PathBuf::from(s),
        Err(_) => return EsoaflStatus::InvalidArgument,
    };
    let cfg = match ExperimentConfig::load(&path) {
        Ok(cfg) => cfg,
        Err(e) => return status_of(&e),
    };
    match runner::run(&cfg, &RunOptions::default()) {
        Ok(report) if report.all_converged => EsoaflStatus::Ok,
        Ok(_) => EsoaflStatus::NotConverged,
        Err(e) => status_of(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e1_through_the_c_surface() {
        let mut out = 0.0;
        let s = unsafe { esoafl_e1(1.0, &mut out) };
        assert_eq!(s, EsoaflStatus::Ok);
        assert!((out - 0.219_383_934_395_520_62).abs() < 1e-12);
        assert_eq!(unsafe { esoafl_e1(-1.0, &mut out) }, EsoaflStatus::DomainError);
        assert_eq!(
            unsafe { esoafl_e1(1.0, std::ptr::null_mut()) },
            EsoaflStatus::NullPointer
        );
    }

    #[test]
    fn jcp_handle_lifecycle() {
        let handle =
            esoafl_jcp_problem_new(60.0, 25.0, 8.0, 0.12, 0.052, 1.0, 0.05, 0.03, 0.77, 1, 50);
        assert!(!handle.is_null());
        let mut sol = EsoaflJcpSolution {
            tx_prob: 0.0,
            local_iters: 0,
            objective: 0.0,
            iterations: 0,
            converged: false,
        };
        let s = unsafe { esoafl_jcp_solve(handle, 1.0, 1e-5, 1e-5, &mut sol) };
        assert_eq!(s, EsoaflStatus::Ok);
        assert!(sol.converged);
        assert!(sol.tx_prob > 0.0 && sol.tx_prob <= 0.77);
        assert!(sol.local_iters >= 1);

        let mut obj = 0.0;
        let s =
            unsafe { esoafl_jcp_objective(handle, sol.tx_prob, sol.local_iters as f64, &mut obj) };
        assert_eq!(s, EsoaflStatus::Ok);
        assert!((obj - sol.objective).abs() < 1e-9 * sol.objective);

        unsafe { esoafl_jcp_problem_free(handle) };

        // invalid instance yields a null handle
        let bad = esoafl_jcp_problem_new(-1.0, 0.0, 0.0, 0.1, 1.0, 1.0, 0.1, 0.1, 0.77, 1, 50);
        assert!(bad.is_null());
    }

    #[test]
    fn bound_and_rounds_model_exposed() {
        let params = EsoaflBoundParams {
            smoothness: 1.0,
            grad_var: 0.5,
            noise_var: 0.05,
            init_gap: 2.0,
            eta: 0.05,
            theta: 1.0,
            local_iters: 5,
            rounds: 100,
            clients: 10,
            tx_prob: 0.5,
            quant_q: 0.1,
        };
        let mut out = 0.0;
        assert_eq!(
            unsafe { esoafl_convergence_bound(params, &mut out) },
            EsoaflStatus::Ok
        );
        assert!(out > 0.0);

        let mut r = 0.0;
        let s = unsafe { esoafl_rounds_model(4.0, 0.5, 10.0, 2.0, 3.0, 0.1, &mut r) };
        assert_eq!(s, EsoaflStatus::Ok);
        let u: f64 = (0.5 + 0.1) / (0.5 * 4.0);
        assert!((r - (10.0 * u + 2.0 * u.sqrt() + 3.0)).abs() < 1e-12);
    }
}
