//! Deterministic discrete-event simulation of W workers with geometric
//! compute times. Strictly single-threaded: the trace is a pure function of
//! the seeds. Communication takes zero simulated time by design, which
//! favors the synchronous variant; payload bytes are accounted separately.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    lmo_seed, mix_seed, worker_index_rng, AlgoMode, AsynMaster, AsynWorker, RankOneUpdate,
    RunResult, TraceRecord, UpdateLog,
};
use crate::error::{Error, Result};
use crate::linalg::{lmo_nuclear, DenseMatrix, DEFAULT_POWER_TOL};
use crate::objectives::Objective;
use crate::schedules::Schedule;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeometricComputeModel {
    /// Staleness parameter: p = 1 means uniform workers, small p means heavy
    /// straggling.
    pub p: f64,
    /// Expected units per stochastic gradient evaluation.
    pub c_grad: f64,
    /// Expected units per 1-SVD.
    pub c_svd: f64,
}

impl Default for GeometricComputeModel {
    fn default() -> Self {
        Self { p: 1.0, c_grad: 1.0, c_svd: 10.0 }
    }
}

impl GeometricComputeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Parameter(format!("p {} outside (0, 1]", self.p)));
        }
        if self.c_grad < 1.0 || self.c_svd < 1.0 {
            return Err(Error::Parameter("compute-unit costs must be >= 1".into()));
        }
        Ok(())
    }

    /// Expected units for a task that evaluates `grad_evals` gradients and
    /// one 1-SVD.
    pub fn task_units(&self, grad_evals: f64) -> f64 {
        grad_evals * self.c_grad + self.c_svd
    }
}

/// Draws k*C for k geometric(p) on {1, 2, ...}; mean C/p, support {C, 2C, ...}.
pub fn sample_compute_time<R: Rng>(
    model: &GeometricComputeModel,
    expected_units: f64,
    rng: &mut R,
) -> Result<f64> {
    if expected_units <= 0.0 {
        return Err(Error::Parameter("expected_units must be positive".into()));
    }
    model.validate()?;
    if model.p == 1.0 {
        return Ok(expected_units);
    }
    // Inversion: u in (0, 1], k = floor(ln u / ln(1-p)) + 1.
    let u = 1.0 - rng.gen::<f64>();
    let k = (u.ln() / (1.0 - model.p).ln()).floor() + 1.0;
    Ok(expected_units * k.max(1.0))
}

fn worker_time_rng(sim_seed: u64, worker_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(sim_seed, 0x7E00 + worker_id as u64))
}

/// Completion event; min-heap order by time, FIFO tie-break by sequence.
struct Event {
    time: f64,
    seq: u64,
    worker: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the earliest event first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Drives the asynchronous master/worker machines under the virtual clock.
/// Each worker computes against its local model, submits, and blocks for the
/// (instantaneous) reply before starting its next task.
#[allow(clippy::too_many_arguments)]
pub fn simulate_asyn(
    problem: &dyn Objective,
    schedule: &Schedule,
    mode: AlgoMode,
    efficient: bool,
    workers: usize,
    model: &GeometricComputeModel,
    algo_seed: u64,
    sim_seed: u64,
    f_ref: f64,
    capture: bool,
    sim_time_cap: Option<f64>,
) -> Result<RunResult> {
    model.validate()?;
    if let AlgoMode::Sfw { t_max: 0 } = mode {
        let mut master =
            AsynMaster::new(problem, schedule.clone(), AlgoMode::Sfw { t_max: 1 }, efficient, workers, algo_seed, f_ref, capture)?;
        master.done = true;
        return Ok(master.into_result());
    }
    let mut master = AsynMaster::new(
        problem,
        schedule.clone(),
        mode,
        efficient,
        workers,
        algo_seed,
        f_ref,
        capture,
    )?;
    let svrf = matches!(mode, AlgoMode::Svrf { .. });
    let mut ws: Vec<AsynWorker> = (0..workers)
        .map(|i| AsynWorker::new(i, master.x0.clone(), problem.theta(), algo_seed, svrf))
        .collect();
    let mut time_rngs: Vec<ChaCha8Rng> =
        (0..workers).map(|i| worker_time_rng(sim_seed, i)).collect();

    let mut queue = BinaryHeap::new();
    let mut pending = Vec::with_capacity(workers);
    let mut seq = 0u64;
    for (i, w) in ws.iter_mut().enumerate() {
        let (msg, units) = w.prepare_submit(problem, schedule, algo_seed, capture)?;
        let dur = sample_compute_time(model, units, &mut time_rngs[i])?;
        pending.push(Some(msg));
        queue.push(Event { time: dur, seq, worker: i });
        seq += 1;
    }

    while let Some(ev) = queue.pop() {
        if let Some(cap) = sim_time_cap {
            if ev.time > cap {
                break;
            }
        }
        let msg = pending[ev.worker].take().expect("event for idle worker");
        let reply = master.on_submit(problem, msg, ev.time, ev.time, None)?;
        ws[ev.worker].apply_reply(&reply, schedule)?;
        if reply.done {
            break;
        }
        let (msg, units) = ws[ev.worker].prepare_submit(problem, schedule, algo_seed, capture)?;
        let dur = sample_compute_time(model, units, &mut time_rngs[ev.worker])?;
        pending[ev.worker] = Some(msg);
        queue.push(Event { time: ev.time + dur, seq, worker: ev.worker });
        seq += 1;
    }
    Ok(master.into_result())
}

/// Synchronous distributed SFW: per round, every worker computes a partial
/// minibatch gradient, the master waits for all of them (round time is the
/// max worker time), aggregates, runs the LMO, and broadcasts the model.
#[allow(clippy::too_many_arguments)]
pub fn simulate_dist(
    problem: &dyn Objective,
    schedule: &Schedule,
    t_max: usize,
    workers: usize,
    model: &GeometricComputeModel,
    algo_seed: u64,
    sim_seed: u64,
    f_ref: f64,
    sim_time_cap: Option<f64>,
) -> Result<RunResult> {
    model.validate()?;
    if workers < 1 {
        return Err(Error::Parameter("need at least one worker".into()));
    }
    let (rows, cols) = problem.dims();
    let theta = problem.theta();
    let n = problem.num_samples();
    let x0 = crate::algorithms::initial_iterate(rows, cols, theta, algo_seed);
    let f0 = problem.loss(&x0);
    let mut x = x0.clone();
    let mut index_rngs: Vec<ChaCha8Rng> =
        (0..workers).map(|i| worker_index_rng(algo_seed, i)).collect();
    let mut time_rngs: Vec<ChaCha8Rng> =
        (0..workers).map(|i| worker_time_rng(sim_seed, i)).collect();
    let mut log = UpdateLog { epochs: vec![Vec::new()] };
    let mut trace = Vec::with_capacity(t_max);
    let mut time = 0.0;
    let mut grad_evals = 0u64;
    let mut bytes_in = 0.0;
    let mut bytes_out = 0.0;
    let payload = (rows * cols) as f64;
    for k in 1..=t_max {
        let m = schedule.batch(k);
        let base_share = m / workers;
        let mut grad = DenseMatrix::zeros(rows, cols);
        let mut round_max = 0.0f64;
        for w in 0..workers {
            let share = if w == 0 { m - base_share * (workers - 1) } else { base_share };
            if share == 0 {
                continue;
            }
            let indices: Vec<usize> =
                (0..share).map(|_| index_rngs[w].gen_range(0..n)).collect();
            let partial = problem.minibatch_gradient(&x, &indices)?;
            grad.axpy(share as f64 / m as f64, &partial)?;
            let dur =
                sample_compute_time(model, share as f64 * model.c_grad, &mut time_rngs[w])?;
            round_max = round_max.max(dur);
        }
        grad_evals += m as u64;
        time += round_max + model.c_svd;
        if let Some(cap) = sim_time_cap {
            if time > cap {
                break;
            }
        }
        let lmo = lmo_nuclear(&grad, theta, DEFAULT_POWER_TOL, lmo_seed(algo_seed, 0, k))?;
        let u: Vec<f64> = lmo.pair.u.iter().map(|z| -theta * z).collect();
        let upd = RankOneUpdate { u, v: lmo.pair.v.clone(), origin_iteration: k - 1 };
        x.convex_rank_one(schedule.eta(k), &upd.u, &upd.v, 1.0);
        log.epochs[0].push(upd);
        bytes_in += workers as f64 * payload;
        bytes_out += workers as f64 * payload;
        let f = problem.loss(&x);
        trace.push(TraceRecord {
            iteration: k,
            accepted_time: time,
            simulated_time: time,
            wall_time: None,
            objective: f,
            relative_error: (f - f_ref) / (f0 - f_ref).max(1e-300),
            delay: 0,
            abandoned_total: 0,
            grad_evals_total: grad_evals,
            linops_total: k as u64,
            bytes_in,
            bytes_out,
        });
    }
    let linops = trace.len() as u64;
    Ok(RunResult {
        trace,
        x0,
        final_x: x,
        log,
        delays: Vec::new(),
        abandoned: 0,
        grad_evals_total: grad_evals,
        linops_total: linops,
        bytes_in,
        bytes_out,
        per_channel_out: Vec::new(),
        captures: Vec::new(),
    })
}

/// Counts of accepted-update delays, sorted by delay value.
pub fn delay_histogram(delays: &[usize]) -> Vec<(usize, usize)> {
    let mut map = std::collections::BTreeMap::new();
    for &d in delays {
        *map.entry(d).or_insert(0usize) += 1;
    }
    map.into_iter().collect()
}

/// First simulated time at which the best-so-far relative error reaches the
/// target.
pub fn time_to_target(trace: &[TraceRecord], target_relative_error: f64) -> Option<f64> {
    let mut best = f64::INFINITY;
    for r in trace {
        best = best.min(r.relative_error);
        if best <= target_relative_error {
            return Some(r.simulated_time);
        }
    }
    None
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupRow {
    pub workers: usize,
    pub time_to_target: Option<f64>,
    pub speedup: Option<f64>,
}

/// Speedup of each worker count against the single-worker baseline. Traces
/// that never reach the target are marked unreachable, not errors.
pub fn speedup_report(
    traces_by_workers: &[(usize, Vec<TraceRecord>)],
    target_relative_error: f64,
) -> Result<Vec<SpeedupRow>> {
    let base = traces_by_workers
        .iter()
        .find(|(w, _)| *w == 1)
        .ok_or_else(|| Error::Parameter("speedup report needs a 1-worker baseline".into()))?;
    let t1 = time_to_target(&base.1, target_relative_error);
    let mut rows = Vec::with_capacity(traces_by_workers.len());
    for (w, trace) in traces_by_workers {
        let tw = time_to_target(trace, target_relative_error);
        let speedup = match (t1, tw) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        rows.push(SpeedupRow { workers: *w, time_to_target: tw, speedup });
    }
    Ok(rows)
}

pub fn write_speedup_csv<W: std::io::Write>(rows: &[SpeedupRow], out: &mut W) -> Result<()> {
    writeln!(out, "workers,time_to_target,speedup")?;
    for r in rows {
        let t = r.time_to_target.map(|v| v.to_string()).unwrap_or_else(|| "unreachable".into());
        let s = r.speedup.map(|v| v.to_string()).unwrap_or_else(|| "unreachable".into());
        writeln!(out, "{},{},{}", r.workers, t, s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{run_sfw, run_svrf};
    use crate::objectives::{generate_matrix_sensing, ProblemConstants};
    use crate::schedules::{sfw_asyn_schedule, sfw_schedule, svrf_asyn_schedule};

    fn constants() -> ProblemConstants {
        ProblemConstants { l: 2.0, g: 4.0, d: 2.0 }
    }

    #[test]
    fn sampler_p1_is_deterministic() {
        let m = GeometricComputeModel { p: 1.0, c_grad: 1.0, c_svd: 10.0 };
        let mut rng = worker_time_rng(0, 0);
        for _ in 0..100 {
            assert_eq!(sample_compute_time(&m, 7.0, &mut rng).unwrap(), 7.0);
        }
    }

    #[test]
    fn sampler_mean_matches_analytic() {
        for p in [0.1, 0.8] {
            let m = GeometricComputeModel { p, c_grad: 1.0, c_svd: 10.0 };
            let mut rng = worker_time_rng(9, 1);
            let n = 100_000;
            let mean: f64 = (0..n)
                .map(|_| sample_compute_time(&m, 1.0, &mut rng).unwrap())
                .sum::<f64>()
                / n as f64;
            let expect = 1.0 / p;
            assert!(
                (mean - expect).abs() < 0.03 * expect,
                "p = {p}: mean {mean} vs {expect}"
            );
        }
    }

    #[test]
    fn sampler_pmf_first_support_point() {
        let m = GeometricComputeModel { p: 0.8, c_grad: 1.0, c_svd: 10.0 };
        let mut rng = worker_time_rng(4, 2);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_compute_time(&m, 2.0, &mut rng).unwrap() == 2.0)
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.8).abs() < 0.02, "P(t = C) = {frac}");
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        let m = GeometricComputeModel { p: 0.0, c_grad: 1.0, c_svd: 10.0 };
        let mut rng = worker_time_rng(0, 0);
        assert!(sample_compute_time(&m, 1.0, &mut rng).is_err());
        let ok = GeometricComputeModel::default();
        assert!(sample_compute_time(&ok, 0.0, &mut rng).is_err());
    }

    #[test]
    fn single_worker_p1_time_is_serial_sum() {
        let p = generate_matrix_sensing(5, 5, 2, 30, 0.1, 3).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 2, Some(20)).unwrap();
        let model = GeometricComputeModel::default();
        let run = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 15 }, true, 1, &model, 7, 1, 0.0, false, None,
        )
        .unwrap();
        let expect: f64 = (1..=15).map(|k| sched.batch(k) as f64 + 10.0).sum();
        let last = run.trace.last().unwrap();
        assert!((last.simulated_time - expect).abs() < 1e-9);
    }

    #[test]
    fn asyn_single_worker_matches_sequential() {
        let p = generate_matrix_sensing(6, 5, 2, 40, 0.1, 5).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 3, Some(25)).unwrap();
        let seq = run_sfw(&p, &sched, 30, 11, 0.0).unwrap();
        let model = GeometricComputeModel { p: 0.3, c_grad: 1.0, c_svd: 10.0 };
        for efficient in [false, true] {
            let sim = simulate_asyn(
                &p, &sched, AlgoMode::Sfw { t_max: 30 }, efficient, 1, &model, 11, 2, 0.0, false,
                None,
            )
            .unwrap();
            assert_eq!(sim.final_x, seq.final_x);
            for (a, b) in sim.trace.iter().zip(&seq.trace) {
                assert_eq!(a.objective, b.objective);
            }
        }
    }

    #[test]
    fn svrf_single_worker_matches_sequential() {
        let p = generate_matrix_sensing(5, 5, 2, 30, 0.1, 6).unwrap();
        let sched = svrf_asyn_schedule(1).unwrap();
        let seq = run_svrf(&p, &sched, 2, 13, 0.0).unwrap();
        let model = GeometricComputeModel { p: 0.5, c_grad: 1.0, c_svd: 10.0 };
        let sim = simulate_asyn(
            &p, &sched, AlgoMode::Svrf { epochs: 2 }, true, 1, &model, 13, 3, 0.0, false, None,
        )
        .unwrap();
        assert_eq!(sim.final_x, seq.final_x);
    }

    #[test]
    fn dist_single_worker_matches_sequential() {
        let p = generate_matrix_sensing(6, 6, 2, 40, 0.1, 7).unwrap();
        let sched = sfw_schedule(&constants(), Some(30)).unwrap();
        let seq = run_sfw(&p, &sched, 25, 17, 0.0).unwrap();
        let model = GeometricComputeModel { p: 0.4, c_grad: 1.0, c_svd: 10.0 };
        let sim = simulate_dist(&p, &sched, 25, 1, &model, 17, 4, 0.0, None).unwrap();
        for (a, b) in sim.trace.iter().zip(&seq.trace) {
            assert_eq!(a.objective, b.objective);
        }
    }

    #[test]
    fn clock_is_monotone_and_runs_deterministic() {
        let p = generate_matrix_sensing(6, 6, 2, 40, 0.1, 8).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 8, Some(25)).unwrap();
        let model = GeometricComputeModel { p: 0.1, c_grad: 1.0, c_svd: 10.0 };
        let a = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 60 }, true, 4, &model, 21, 5, 0.0, false, None,
        )
        .unwrap();
        let b = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 60 }, true, 4, &model, 21, 5, 0.0, false, None,
        )
        .unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        let mut prev = 0.0;
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.simulated_time, rb.simulated_time);
            assert_eq!(ra.objective, rb.objective);
            assert!(ra.simulated_time >= prev);
            prev = ra.simulated_time;
        }
    }

    #[test]
    fn naive_and_efficient_agree_under_simulator() {
        let p = generate_matrix_sensing(6, 6, 2, 40, 0.1, 9).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 8, Some(25)).unwrap();
        let model = GeometricComputeModel { p: 0.1, c_grad: 1.0, c_svd: 10.0 };
        let naive = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 80 }, false, 4, &model, 23, 6, 0.0, false, None,
        )
        .unwrap();
        let eff = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 80 }, true, 4, &model, 23, 6, 0.0, false, None,
        )
        .unwrap();
        assert_eq!(naive.final_x, eff.final_x);
        assert_eq!(naive.delays, eff.delays);
        assert_eq!(naive.abandoned, eff.abandoned);
    }

    #[test]
    fn delay_tolerance_respected_with_stragglers() {
        let p = generate_matrix_sensing(5, 5, 2, 30, 0.1, 10).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 2, Some(20)).unwrap();
        let model = GeometricComputeModel { p: 0.1, c_grad: 1.0, c_svd: 10.0 };
        let run = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 100 }, true, 4, &model, 25, 7, 0.0, false, None,
        )
        .unwrap();
        assert!(run.delays.iter().all(|&d| d <= 2));
        let hist = delay_histogram(&run.delays);
        let total: usize = hist.iter().map(|(_, c)| c).sum();
        assert_eq!(total, 100);
    }

    #[test]
    fn zero_horizon_gives_empty_trace() {
        let p = generate_matrix_sensing(5, 5, 2, 30, 0.1, 11).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 2, Some(20)).unwrap();
        let model = GeometricComputeModel::default();
        let run = simulate_asyn(
            &p, &sched, AlgoMode::Sfw { t_max: 0 }, true, 2, &model, 1, 1, 0.0, false, None,
        )
        .unwrap();
        assert!(run.trace.is_empty());
    }

    #[test]
    fn speedup_report_baseline_and_unreachable() {
        let mk = |times: &[f64], errs: &[f64]| -> Vec<TraceRecord> {
            times
                .iter()
                .zip(errs)
                .enumerate()
                .map(|(i, (&t, &e))| TraceRecord {
                    iteration: i + 1,
                    accepted_time: t,
                    simulated_time: t,
                    wall_time: None,
                    objective: e,
                    relative_error: e,
                    delay: 0,
                    abandoned_total: 0,
                    grad_evals_total: 0,
                    linops_total: 0,
                    bytes_in: 0.0,
                    bytes_out: 0.0,
                })
                .collect()
        };
        let rows = speedup_report(
            &[
                (1, mk(&[10.0, 20.0], &[0.5, 0.01])),
                (2, mk(&[5.0, 10.0], &[0.5, 0.01])),
                (4, mk(&[2.0, 4.0], &[0.5, 0.2])),
            ],
            0.05,
        )
        .unwrap();
        assert_eq!(rows[0].speedup, Some(1.0));
        assert_eq!(rows[1].speedup, Some(2.0));
        assert!(rows[2].speedup.is_none());
        assert!(speedup_report(&[(2, mk(&[1.0], &[0.0]))], 0.5).is_err());
    }
}
