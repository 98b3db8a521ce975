//! Optimizer state machines: sequential FW/SFW and SVRF, plus the
//! master/worker machines for the asynchronous variants.
//!
//! The master and worker are pure state machines driven by a transport: the
//! single-threaded virtual-clock simulator or the threaded live executor.
//! Both drivers produce identical iterates given identical message orderings
//! and seeds.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{lmo_nuclear, nuclear_norm, DenseMatrix, DEFAULT_POWER_TOL};
use crate::objectives::{Objective, ProblemConstants};
use crate::schedules::{Schedule, TAU_INFINITE};

/// Abstract compute-cost units: one per stochastic gradient, ten per 1-SVD.
pub const DEFAULT_C_GRAD: f64 = 1.0;
pub const DEFAULT_C_SVD: f64 = 10.0;

/// Rank-one model update; the unit of worker-to-master communication.
///
/// The LMO's -theta factor is folded into `u`, so replaying
/// `X = (1 - eta_k) X + eta_k u v^T` applies the update verbatim.
#[derive(Debug, Clone)]
pub struct RankOneUpdate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Worker's local iteration t_w when the update was computed.
    pub origin_iteration: usize,
}

/// Append-only per-epoch log of accepted updates at the master. SFW uses a
/// single epoch.
#[derive(Debug, Clone, Default)]
pub struct UpdateLog {
    pub epochs: Vec<Vec<RankOneUpdate>>,
}

impl UpdateLog {
    pub fn total_len(&self) -> usize {
        self.epochs.iter().map(|e| e.len()).sum()
    }
}

/// One row of the run trace.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iteration: usize,
    pub accepted_time: f64,
    pub simulated_time: f64,
    pub wall_time: Option<f64>,
    pub objective: f64,
    pub relative_error: f64,
    pub delay: usize,
    pub abandoned_total: u64,
    pub grad_evals_total: u64,
    pub linops_total: u64,
    pub bytes_in: f64,
    pub bytes_out: f64,
}

/// Writes the stable CSV schema; `include_wall` adds the live executor's
/// wall_time column.
pub fn write_trace_csv<W: std::io::Write>(
    records: &[TraceRecord],
    include_wall: bool,
    out: &mut W,
) -> Result<()> {
    write!(
        out,
        "iteration,accepted_time,simulated_time,objective,relative_error,delay,abandoned_total,grad_evals_total,linops_total,bytes_in,bytes_out"
    )?;
    if include_wall {
        write!(out, ",wall_time")?;
    }
    writeln!(out)?;
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.accepted_time,
            r.simulated_time,
            r.objective,
            r.relative_error,
            r.delay,
            r.abandoned_total,
            r.grad_evals_total,
            r.linops_total,
            r.bytes_in,
            r.bytes_out
        )?;
        if include_wall {
            write!(out, ",{}", r.wall_time.unwrap_or(0.0))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-acceptance diagnostic snapshot for the inexactness probe.
#[derive(Debug, Clone)]
pub struct Capture {
    /// Acceptance iteration (within the epoch for SVRF).
    pub k: usize,
    pub t_w: usize,
    pub batch: usize,
    /// Master iterate before the update was applied.
    pub x_prev: DenseMatrix,
    /// The (possibly stale, minibatch) gradient the update was computed from.
    pub grad_used: DenseMatrix,
}

/// Everything a run produces beyond the trace.
pub struct RunResult {
    pub trace: Vec<TraceRecord>,
    pub x0: DenseMatrix,
    pub final_x: DenseMatrix,
    pub log: UpdateLog,
    pub delays: Vec<usize>,
    pub abandoned: u64,
    pub grad_evals_total: u64,
    pub linops_total: u64,
    pub bytes_in: f64,
    pub bytes_out: f64,
    pub per_channel_out: Vec<f64>,
    pub captures: Vec<Capture>,
}

/// splitmix64 finalizer; used to derive independent seed streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Power-iteration start seed for the LMO targeting iteration `k` of `epoch`.
/// Derived from the target iteration (not the worker) so every variant that
/// computes "the update for iteration k" draws the same start vector.
pub fn lmo_seed(algo_seed: u64, epoch: usize, k: usize) -> u64 {
    mix_seed(mix_seed(algo_seed, 0x1507 + epoch as u64), k as u64)
}

/// Per-worker index-sampling stream; adding workers never perturbs existing
/// streams.
pub fn worker_index_rng(algo_seed: u64, worker_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(algo_seed, 0xD0 + worker_id as u64))
}

/// Seeded rank-one feasible start: theta * u0 v0^T with unit u0, v0.
pub fn initial_iterate(rows: usize, cols: usize, theta: f64, algo_seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(algo_seed, 0xA11CE));
    let mut u: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() - 0.5).collect();
    let nu = crate::linalg::norm2(&u).max(f64::MIN_POSITIVE);
    let nv = crate::linalg::norm2(&v).max(f64::MIN_POSITIVE);
    u.iter_mut().for_each(|x| *x /= nu);
    v.iter_mut().for_each(|x| *x /= nv);
    DenseMatrix::outer(&u, &v, theta)
}

/// Reference value used for relative errors; falls back to 0 when the
/// problem supplies none (the harness can override with a long-run value).
pub fn resolve_f_ref(problem: &dyn Objective) -> f64 {
    problem.reference_value().unwrap_or(0.0)
}

fn relative_error(f: f64, f0: f64, f_ref: f64) -> f64 {
    (f - f_ref) / (f0 - f_ref).max(1e-300)
}

/// One Frank-Wolfe step: LMO on `grad` then the convex combination
/// X' = (1 - eta) X + eta U with U = -theta u v^T.
pub fn fw_step(
    x: &DenseMatrix,
    grad: &DenseMatrix,
    eta: f64,
    theta: f64,
    seed: u64,
) -> Result<DenseMatrix> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Parameter(format!("eta {eta} outside (0, 1]")));
    }
    if nuclear_norm(x)? > theta + 1e-8 {
        return Err(Error::Infeasible("fw_step input outside the nuclear ball".into()));
    }
    let lmo = lmo_nuclear(grad, theta, DEFAULT_POWER_TOL, seed)?;
    let mut next = x.clone();
    next.convex_rank_one(eta, &lmo.pair.u, &lmo.pair.v, -theta);
    Ok(next)
}

/// Applies log entries `from+1..=to` to `x0` with the schedule's step sizes.
pub fn replay_updates(
    x0: &DenseMatrix,
    entries: &[RankOneUpdate],
    schedule: &Schedule,
    from: usize,
    to: usize,
) -> Result<DenseMatrix> {
    if from > to || to > entries.len() {
        return Err(Error::Parameter(format!(
            "replay range {from}..{to} out of bounds for log of length {}",
            entries.len()
        )));
    }
    let mut x = x0.clone();
    for (offset, e) in entries[from..to].iter().enumerate() {
        let k = from + offset + 1;
        x.convex_rank_one(schedule.eta(k), &e.u, &e.v, 1.0);
    }
    Ok(x)
}

fn sample_indices<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.gen_range(0..n)).collect()
}

/// Sequential SFW (FW when the batch covers the full dataset).
pub fn run_sfw(
    problem: &dyn Objective,
    schedule: &Schedule,
    t_max: usize,
    algo_seed: u64,
    f_ref: f64,
) -> Result<RunResult> {
    if t_max < 1 {
        return Err(Error::Parameter("T must be at least 1".into()));
    }
    let (rows, cols) = problem.dims();
    let theta = problem.theta();
    let x0 = initial_iterate(rows, cols, theta, algo_seed);
    let f0 = problem.loss(&x0);
    let mut x = x0.clone();
    let mut rng = worker_index_rng(algo_seed, 0);
    let n = problem.num_samples();
    let mut log = UpdateLog { epochs: vec![Vec::new()] };
    let mut trace = Vec::with_capacity(t_max);
    let mut grad_evals = 0u64;
    let mut time = 0.0;
    for k in 1..=t_max {
        let m = schedule.batch(k);
        let indices = sample_indices(&mut rng, n, m);
        let grad = problem.minibatch_gradient(&x, &indices)?;
        grad_evals += m as u64;
        time += m as f64 * DEFAULT_C_GRAD + DEFAULT_C_SVD;
        let lmo = lmo_nuclear(&grad, theta, DEFAULT_POWER_TOL, lmo_seed(algo_seed, 0, k))?;
        let u: Vec<f64> = lmo.pair.u.iter().map(|z| -theta * z).collect();
        let upd = RankOneUpdate { u, v: lmo.pair.v.clone(), origin_iteration: k - 1 };
        x.convex_rank_one(schedule.eta(k), &upd.u, &upd.v, 1.0);
        log.epochs[0].push(upd);
        let f = problem.loss(&x);
        trace.push(TraceRecord {
            iteration: k,
            accepted_time: time,
            simulated_time: time,
            wall_time: None,
            objective: f,
            relative_error: relative_error(f, f0, f_ref),
            delay: 0,
            abandoned_total: 0,
            grad_evals_total: grad_evals,
            linops_total: k as u64,
            bytes_in: 0.0,
            bytes_out: 0.0,
        });
    }
    Ok(RunResult {
        trace,
        x0,
        final_x: x,
        log,
        delays: Vec::new(),
        abandoned: 0,
        grad_evals_total: grad_evals,
        linops_total: t_max as u64,
        bytes_in: 0.0,
        bytes_out: 0.0,
        per_channel_out: Vec::new(),
        captures: Vec::new(),
    })
}

/// Deterministic Frank-Wolfe: full gradient every iteration.
pub fn run_fw(
    problem: &dyn Objective,
    schedule: &Schedule,
    t_max: usize,
    algo_seed: u64,
    f_ref: f64,
) -> Result<RunResult> {
    if t_max < 1 {
        return Err(Error::Parameter("T must be at least 1".into()));
    }
    let (rows, cols) = problem.dims();
    let theta = problem.theta();
    let x0 = initial_iterate(rows, cols, theta, algo_seed);
    let f0 = problem.loss(&x0);
    let mut x = x0.clone();
    let n = problem.num_samples();
    let mut log = UpdateLog { epochs: vec![Vec::new()] };
    let mut trace = Vec::with_capacity(t_max);
    let mut time = 0.0;
    for k in 1..=t_max {
        let grad = problem.full_gradient(&x)?;
        time += n as f64 * DEFAULT_C_GRAD + DEFAULT_C_SVD;
        let lmo = lmo_nuclear(&grad, theta, DEFAULT_POWER_TOL, lmo_seed(algo_seed, 0, k))?;
        let u: Vec<f64> = lmo.pair.u.iter().map(|z| -theta * z).collect();
        let upd = RankOneUpdate { u, v: lmo.pair.v.clone(), origin_iteration: k - 1 };
        x.convex_rank_one(schedule.eta(k), &upd.u, &upd.v, 1.0);
        log.epochs[0].push(upd);
        let f = problem.loss(&x);
        trace.push(TraceRecord {
            iteration: k,
            accepted_time: time,
            simulated_time: time,
            wall_time: None,
            objective: f,
            relative_error: relative_error(f, f0, f_ref),
            delay: 0,
            abandoned_total: 0,
            grad_evals_total: (n * k) as u64,
            linops_total: k as u64,
            bytes_in: 0.0,
            bytes_out: 0.0,
        });
    }
    Ok(RunResult {
        trace,
        x0,
        final_x: x,
        log,
        delays: Vec::new(),
        abandoned: 0,
        grad_evals_total: (n * t_max) as u64,
        linops_total: t_max as u64,
        bytes_in: 0.0,
        bytes_out: 0.0,
        per_channel_out: Vec::new(),
        captures: Vec::new(),
    })
}

/// Sequential SVRF: per epoch, snapshot W and its full gradient, then run
/// the epoch's inner FW steps with variance-reduced minibatch gradients.
pub fn run_svrf(
    problem: &dyn Objective,
    schedule: &Schedule,
    epochs: usize,
    algo_seed: u64,
    f_ref: f64,
) -> Result<RunResult> {
    if epochs < 1 {
        return Err(Error::Parameter("epochs must be at least 1".into()));
    }
    let (rows, cols) = problem.dims();
    let theta = problem.theta();
    let x0 = initial_iterate(rows, cols, theta, algo_seed);
    let f0 = problem.loss(&x0);
    let mut x = x0.clone();
    let mut rng = worker_index_rng(algo_seed, 0);
    let n = problem.num_samples();
    let mut log = UpdateLog::default();
    let mut trace = Vec::new();
    let mut grad_evals = 0u64;
    let mut linops = 0u64;
    let mut time = 0.0;
    let mut iteration = 0usize;
    for t in 0..epochs {
        let w = x.clone();
        let full = problem.full_gradient(&w)?;
        grad_evals += n as u64;
        time += n as f64 * DEFAULT_C_GRAD;
        log.epochs.push(Vec::new());
        let n_t = schedule.svrf_epoch_len(t)?;
        for k in 1..=n_t {
            let m = schedule.batch(k);
            let indices = sample_indices(&mut rng, n, m);
            let mut grad = problem.minibatch_gradient(&x, &indices)?;
            grad.axpy(-1.0, &problem.minibatch_gradient(&w, &indices)?)?;
            grad.axpy(1.0, &full)?;
            grad_evals += 2 * m as u64;
            time += 2.0 * m as f64 * DEFAULT_C_GRAD + DEFAULT_C_SVD;
            let lmo = lmo_nuclear(&grad, theta, DEFAULT_POWER_TOL, lmo_seed(algo_seed, t, k))?;
            linops += 1;
            let u: Vec<f64> = lmo.pair.u.iter().map(|z| -theta * z).collect();
            let upd = RankOneUpdate { u, v: lmo.pair.v.clone(), origin_iteration: k - 1 };
            x.convex_rank_one(schedule.eta(k), &upd.u, &upd.v, 1.0);
            log.epochs[t].push(upd);
            iteration += 1;
            let f = problem.loss(&x);
            trace.push(TraceRecord {
                iteration,
                accepted_time: time,
                simulated_time: time,
                wall_time: None,
                objective: f,
                relative_error: relative_error(f, f0, f_ref),
                delay: 0,
                abandoned_total: 0,
                grad_evals_total: grad_evals,
                linops_total: linops,
                bytes_in: 0.0,
                bytes_out: 0.0,
            });
        }
    }
    Ok(RunResult {
        trace,
        x0,
        final_x: x,
        log,
        delays: Vec::new(),
        abandoned: 0,
        grad_evals_total: grad_evals,
        linops_total: linops,
        bytes_in: 0.0,
        bytes_out: 0.0,
        per_channel_out: Vec::new(),
        captures: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Asynchronous master/worker state machines.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgoMode {
    Sfw { t_max: usize },
    Svrf { epochs: usize },
}

/// Worker -> master message.
#[derive(Debug, Clone)]
pub struct SubmitMsg {
    pub worker_id: usize,
    pub epoch: usize,
    pub update: RankOneUpdate,
    /// Gradient evaluations spent producing this submit (wasted work from a
    /// later abandonment still counts).
    pub grad_evals: u64,
    pub batch_used: usize,
    /// Present only when the run captures diagnostics.
    pub grad_for_capture: Option<DenseMatrix>,
}

/// Catch-up segment: entries of `epoch` applying at iterations
/// from_t+1..from_t+len.
#[derive(Debug, Clone)]
pub struct CatchUpSegment {
    pub epoch: usize,
    pub from_t: usize,
    pub entries: Vec<RankOneUpdate>,
}

#[derive(Debug, Clone)]
pub enum ReplyPayload {
    /// Naive variants ship the dense model (and snapshot on epoch change).
    Dense { x: DenseMatrix, w: Option<DenseMatrix> },
    /// Communication-efficient variants ship the rank-one catch-up log.
    Log { segments: Vec<CatchUpSegment> },
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub t_m: usize,
    pub epoch: usize,
    pub accepted: bool,
    pub done: bool,
    pub payload: ReplyPayload,
}

pub struct AsynMaster {
    pub mode: AlgoMode,
    pub efficient: bool,
    pub schedule: Schedule,
    pub theta: f64,
    pub x: DenseMatrix,
    pub x0: DenseMatrix,
    /// Inner iteration within the current epoch (global for SFW).
    pub t_m: usize,
    pub epoch: usize,
    pub log: UpdateLog,
    /// X at the start of the current epoch (SVRF snapshot).
    pub snapshot: DenseMatrix,
    pub accepted_total: usize,
    pub abandoned: u64,
    pub grad_evals_total: u64,
    pub linops_total: u64,
    pub bytes_in: f64,
    pub bytes_out: f64,
    pub per_channel_out: Vec<f64>,
    pub delays: Vec<usize>,
    pub trace: Vec<TraceRecord>,
    pub captures: Vec<Capture>,
    pub capture: bool,
    pub done: bool,
    f0: f64,
    f_ref: f64,
    dims: (usize, usize),
}

impl AsynMaster {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: &dyn Objective,
        schedule: Schedule,
        mode: AlgoMode,
        efficient: bool,
        workers: usize,
        algo_seed: u64,
        f_ref: f64,
        capture: bool,
    ) -> Result<Self> {
        if workers < 1 {
            return Err(Error::Parameter("need at least one worker".into()));
        }
        if let AlgoMode::Svrf { .. } = mode {
            if !schedule.has_svrf_epochs {
                return Err(Error::Parameter("SVRF mode needs an SVRF schedule".into()));
            }
        }
        let (rows, cols) = problem.dims();
        let theta = problem.theta();
        let x0 = initial_iterate(rows, cols, theta, algo_seed);
        let f0 = problem.loss(&x0);
        Ok(Self {
            mode,
            efficient,
            schedule,
            theta,
            x: x0.clone(),
            snapshot: x0.clone(),
            x0,
            t_m: 0,
            epoch: 0,
            log: UpdateLog { epochs: vec![Vec::new()] },
            accepted_total: 0,
            abandoned: 0,
            grad_evals_total: 0,
            linops_total: 0,
            bytes_in: 0.0,
            bytes_out: 0.0,
            per_channel_out: vec![0.0; workers],
            delays: Vec::new(),
            trace: Vec::new(),
            captures: Vec::new(),
            capture,
            done: false,
            f0,
            f_ref,
            dims: (rows, cols),
        })
    }

    fn epoch_len(&self) -> Result<usize> {
        match self.mode {
            AlgoMode::Sfw { t_max } => Ok(t_max),
            AlgoMode::Svrf { .. } => self.schedule.svrf_epoch_len(self.epoch),
        }
    }

    fn build_payload(&self, worker_epoch: usize, worker_t: usize) -> ReplyPayload {
        if !self.efficient {
            let w = if worker_epoch != self.epoch { Some(self.snapshot.clone()) } else { None };
            return ReplyPayload::Dense { x: self.x.clone(), w };
        }
        let mut segments = Vec::new();
        if worker_epoch == self.epoch {
            segments.push(CatchUpSegment {
                epoch: self.epoch,
                from_t: worker_t,
                entries: self.log.epochs[self.epoch][worker_t..self.t_m].to_vec(),
            });
        } else {
            segments.push(CatchUpSegment {
                epoch: worker_epoch,
                from_t: worker_t,
                entries: self.log.epochs[worker_epoch][worker_t..].to_vec(),
            });
            for e in worker_epoch + 1..self.epoch {
                segments.push(CatchUpSegment {
                    epoch: e,
                    from_t: 0,
                    entries: self.log.epochs[e].clone(),
                });
            }
            segments.push(CatchUpSegment {
                epoch: self.epoch,
                from_t: 0,
                entries: self.log.epochs[self.epoch][..self.t_m].to_vec(),
            });
        }
        ReplyPayload::Log { segments }
    }

    fn payload_out_units(&self, payload: &ReplyPayload) -> f64 {
        let (d1, d2) = self.dims;
        match payload {
            ReplyPayload::Dense { w, .. } => {
                (d1 * d2) as f64 * if w.is_some() { 2.0 } else { 1.0 }
            }
            ReplyPayload::Log { segments } => {
                let n: usize = segments.iter().map(|s| s.entries.len()).sum();
                (n * (d1 + d2)) as f64
            }
        }
    }

    /// Handles one worker submission; serialized acceptance: the caller (the
    /// transport) orders concurrent arrivals.
    pub fn on_submit(
        &mut self,
        problem: &dyn Objective,
        msg: SubmitMsg,
        accepted_time: f64,
        simulated_time: f64,
        wall_time: Option<f64>,
    ) -> Result<Reply> {
        if self.done {
            return Ok(Reply {
                t_m: self.t_m,
                epoch: self.epoch,
                accepted: false,
                done: true,
                payload: ReplyPayload::Log { segments: Vec::new() },
            });
        }
        let (d1, d2) = self.dims;
        self.bytes_in += (d1 + d2 + 1) as f64;
        self.grad_evals_total += msg.grad_evals;
        self.linops_total += 1;
        let worker_t = msg.update.origin_iteration;
        let worker_epoch = msg.epoch;

        let stale_epoch = worker_epoch != self.epoch;
        let delay = if stale_epoch { usize::MAX } else { self.t_m - worker_t };
        let accept = !stale_epoch && (self.schedule.tau == TAU_INFINITE || delay <= self.schedule.tau);

        if accept {
            let k = self.t_m + 1;
            if self.capture {
                self.captures.push(Capture {
                    k,
                    t_w: worker_t,
                    batch: msg.batch_used,
                    x_prev: self.x.clone(),
                    grad_used: msg
                        .grad_for_capture
                        .clone()
                        .unwrap_or_else(|| DenseMatrix::zeros(d1, d2)),
                });
            }
            self.x
                .convex_rank_one(self.schedule.eta(k), &msg.update.u, &msg.update.v, 1.0);
            self.log.epochs[self.epoch].push(msg.update);
            self.t_m = k;
            self.accepted_total += 1;
            self.delays.push(delay);
            let f = problem.loss(&self.x);
            self.trace.push(TraceRecord {
                iteration: self.accepted_total,
                accepted_time,
                simulated_time,
                wall_time,
                objective: f,
                relative_error: relative_error(f, self.f0, self.f_ref),
                delay,
                abandoned_total: self.abandoned,
                grad_evals_total: self.grad_evals_total,
                linops_total: self.linops_total,
                bytes_in: self.bytes_in,
                bytes_out: self.bytes_out,
            });
            // Epoch / termination bookkeeping.
            match self.mode {
                AlgoMode::Sfw { t_max } => {
                    if self.accepted_total >= t_max {
                        self.done = true;
                    }
                }
                AlgoMode::Svrf { epochs } => {
                    if self.t_m >= self.epoch_len()? {
                        self.epoch += 1;
                        self.t_m = 0;
                        self.snapshot = self.x.clone();
                        self.log.epochs.push(Vec::new());
                        if self.epoch >= epochs {
                            self.done = true;
                        }
                    }
                }
            }
        } else {
            self.abandoned += 1;
        }

        let payload = self.build_payload(worker_epoch, worker_t);
        let out = self.payload_out_units(&payload);
        self.bytes_out += out;
        self.per_channel_out[msg.worker_id] += out;
        Ok(Reply {
            t_m: self.t_m,
            epoch: self.epoch,
            accepted: accept,
            done: self.done,
            payload,
        })
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            trace: self.trace,
            x0: self.x0,
            final_x: self.x,
            log: self.log,
            delays: self.delays,
            abandoned: self.abandoned,
            grad_evals_total: self.grad_evals_total,
            linops_total: self.linops_total,
            bytes_in: self.bytes_in,
            bytes_out: self.bytes_out,
            per_channel_out: self.per_channel_out,
            captures: self.captures,
        }
    }
}

pub struct AsynWorker {
    pub id: usize,
    pub epoch: usize,
    pub t_w: usize,
    pub x_local: DenseMatrix,
    /// SVRF snapshot W for the worker's current epoch, with its full
    /// gradient computed lazily (the recomputation cost lands on the next
    /// submit's counters).
    pub w_snapshot: Option<DenseMatrix>,
    w_full_grad: Option<DenseMatrix>,
    index_rng: ChaCha8Rng,
    theta: f64,
    svrf: bool,
}

impl AsynWorker {
    pub fn new(id: usize, x0: DenseMatrix, theta: f64, algo_seed: u64, svrf: bool) -> Self {
        Self {
            id,
            epoch: 0,
            t_w: 0,
            w_snapshot: if svrf { Some(x0.clone()) } else { None },
            w_full_grad: None,
            x_local: x0,
            index_rng: worker_index_rng(algo_seed, id),
            theta,
            svrf,
        }
    }

    /// Computes one update against the local model. Returns the message and
    /// the expected compute units for the task (for the timing model).
    pub fn prepare_submit(
        &mut self,
        problem: &dyn Objective,
        schedule: &Schedule,
        algo_seed: u64,
        capture: bool,
    ) -> Result<(SubmitMsg, f64)> {
        let k = self.t_w + 1;
        let m = schedule.batch(k);
        let n = problem.num_samples();
        let indices = sample_indices(&mut self.index_rng, n, m);
        let grad_evals;
        let grad = if self.svrf {
            let mut snapshot_evals = 0u64;
            if self.w_full_grad.is_none() {
                let w = self.w_snapshot.as_ref().expect("svrf worker has a snapshot");
                self.w_full_grad = Some(problem.full_gradient(w)?);
                snapshot_evals = n as u64;
            }
            let w = self.w_snapshot.as_ref().unwrap();
            let mut g = problem.minibatch_gradient(&self.x_local, &indices)?;
            g.axpy(-1.0, &problem.minibatch_gradient(w, &indices)?)?;
            g.axpy(1.0, self.w_full_grad.as_ref().unwrap())?;
            grad_evals = 2 * m as u64 + snapshot_evals;
            g
        } else {
            grad_evals = m as u64;
            problem.minibatch_gradient(&self.x_local, &indices)?
        };
        let lmo = lmo_nuclear(
            &grad,
            self.theta,
            DEFAULT_POWER_TOL,
            lmo_seed(algo_seed, self.epoch, k),
        )?;
        let u: Vec<f64> = lmo.pair.u.iter().map(|z| -self.theta * z).collect();
        let units = grad_evals as f64 * DEFAULT_C_GRAD + DEFAULT_C_SVD;
        Ok((
            SubmitMsg {
                worker_id: self.id,
                epoch: self.epoch,
                update: RankOneUpdate { u, v: lmo.pair.v.clone(), origin_iteration: self.t_w },
                grad_evals,
                batch_used: m,
                grad_for_capture: if capture { Some(grad) } else { None },
            },
            units,
        ))
    }

    /// Synchronizes the local model to the master's reply.
    pub fn apply_reply(&mut self, reply: &Reply, schedule: &Schedule) -> Result<()> {
        match &reply.payload {
            ReplyPayload::Dense { x, w } => {
                self.x_local = x.clone();
                if let Some(w) = w {
                    self.w_snapshot = Some(w.clone());
                    self.w_full_grad = None;
                }
            }
            ReplyPayload::Log { segments } => {
                for seg in segments {
                    if seg.epoch != self.epoch {
                        // Crossing an epoch boundary: the local model at this
                        // point is exactly the boundary iterate.
                        self.epoch = seg.epoch;
                        if self.svrf {
                            self.w_snapshot = Some(self.x_local.clone());
                            self.w_full_grad = None;
                        }
                    }
                    for (offset, e) in seg.entries.iter().enumerate() {
                        let k = seg.from_t + offset + 1;
                        self.x_local.convex_rank_one(schedule.eta(k), &e.u, &e.v, 1.0);
                    }
                }
            }
        }
        self.epoch = reply.epoch;
        self.t_w = reply.t_m;
        Ok(())
    }
}

/// Empirical gradient inexactness vs the appendix lemma's bound,
/// G D / sqrt(m_{k-tau}) + L tau eta_{k-tau} D^2, with indices clamped at 1.
/// Returns (empirical, bound) per captured acceptance.
pub fn gradient_inexactness_probe(
    problem: &dyn Objective,
    captures: &[Capture],
    schedule: &Schedule,
    constants: &ProblemConstants,
) -> Result<Vec<(f64, f64)>> {
    let tau = if schedule.tau == TAU_INFINITE { 0 } else { schedule.tau };
    let mut out = Vec::with_capacity(captures.len());
    for c in captures {
        let full = problem.full_gradient(&c.x_prev)?;
        let mut diff = full;
        diff.axpy(-1.0, &c.grad_used)?;
        let emp = diff.frobenius_norm() * constants.d;
        let idx = c.k.saturating_sub(tau).max(1);
        let bound = constants.g * constants.d / (schedule.batch(idx) as f64).sqrt()
            + constants.l * tau as f64 * schedule.eta(idx) * constants.d * constants.d;
        out.push((emp, bound));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_inner;
    use crate::objectives::generate_matrix_sensing;
    use crate::schedules::{sfw_asyn_schedule, sfw_schedule, svrf_asyn_schedule};

    fn constants() -> ProblemConstants {
        ProblemConstants { l: 2.0, g: 4.0, d: 2.0 }
    }

    #[test]
    fn fw_step_full_step_replaces_iterate() {
        let x = DenseMatrix::zeros(3, 3);
        let grad = DenseMatrix::from_diag(3, 3, &[5.0, 1.0, 0.5]);
        let next = fw_step(&x, &grad, 1.0, 1.0, 0).unwrap();
        // eta = 1 -> result is exactly U = -e1 e1^T.
        let mut expect = DenseMatrix::zeros(3, 3);
        expect.set(0, 0, -1.0);
        let mut diff = next.clone();
        diff.axpy(-1.0, &expect).unwrap();
        // Eigenvector accuracy is linear in the power-iteration tolerance
        // (sigma accuracy is quadratic), so allow for that here.
        assert!(diff.frobenius_norm() < 1e-4);
    }

    #[test]
    fn fw_step_rejects_bad_eta_and_infeasible_input() {
        let x = DenseMatrix::zeros(2, 2);
        let grad = DenseMatrix::identity(2);
        assert!(fw_step(&x, &grad, 0.0, 1.0, 0).is_err());
        assert!(fw_step(&x, &grad, 1.1, 1.0, 0).is_err());
        let far = DenseMatrix::from_diag(2, 2, &[5.0, 5.0]);
        assert!(matches!(fw_step(&far, &grad, 0.5, 1.0, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn fw_step_half_step_hand_computation() {
        // grad = diag(1, 0), theta = 1, X = 0, eta = 0.5 -> X' = -0.5 e1 e1^T.
        let x = DenseMatrix::zeros(2, 2);
        let grad = DenseMatrix::from_diag(2, 2, &[1.0, 0.0]);
        let next = fw_step(&x, &grad, 0.5, 1.0, 1).unwrap();
        assert!((next.get(0, 0) + 0.5).abs() < 1e-9);
        assert!(next.get(1, 1).abs() < 1e-9);
        assert!(next.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn replay_trivial_and_single_entry() {
        let sched = sfw_schedule(&constants(), Some(10)).unwrap();
        let x0 = initial_iterate(3, 3, 1.0, 5);
        assert_eq!(replay_updates(&x0, &[], &sched, 0, 0).unwrap(), x0);
        let upd = RankOneUpdate { u: vec![-1.0, 0.0, 0.0], v: vec![1.0, 0.0, 0.0], origin_iteration: 0 };
        // eta(1) = 1: result is exactly the rank-one matrix.
        let r = replay_updates(&x0, std::slice::from_ref(&upd), &sched, 0, 1).unwrap();
        assert!((r.get(0, 0) + 1.0).abs() < 1e-12);
        assert!(r.get(1, 1).abs() < 1e-12);
        assert!(replay_updates(&x0, &[upd], &sched, 0, 2).is_err());
    }

    #[test]
    fn sfw_deterministic_and_feasible() {
        let p = generate_matrix_sensing(6, 5, 2, 40, 0.05, 3).unwrap();
        let sched = sfw_schedule(&constants(), Some(30)).unwrap();
        let a = run_sfw(&p, &sched, 25, 9, 0.0).unwrap();
        let b = run_sfw(&p, &sched, 25, 9, 0.0).unwrap();
        assert_eq!(a.final_x, b.final_x);
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.objective, rb.objective);
        }
        for rec in a.trace.iter().step_by(5) {
            let _ = rec;
        }
        assert!(nuclear_norm(&a.final_x).unwrap() <= 1.0 + 1e-6);
    }

    #[test]
    fn sfw_full_batch_is_deterministic_fw() {
        // batch(k) = N for all k: the sampled multiset is irrelevant only if
        // the gradient equals the full gradient; sampling with replacement
        // does not give that, so instead compare against a second run with a
        // different algo seed but full-coverage deterministic gradient via
        // an explicit FW loop sharing LMO seeds.
        let p = generate_matrix_sensing(5, 5, 1, 8, 0.0, 11).unwrap();
        let sched = Schedule {
            batch_rule: crate::schedules::BatchRule::Constant { size: 8, c: 1.0 },
            tau: TAU_INFINITE,
            batch_cap: None,
            has_svrf_epochs: false,
        };
        let seed = 13u64;
        let run = run_sfw(&p, &sched, 10, seed, 0.0).unwrap();
        // Manual FW with the gradients SFW actually sampled.
        let mut x = initial_iterate(5, 5, 1.0, seed);
        let mut rng = worker_index_rng(seed, 0);
        for k in 1..=10 {
            let idx = sample_indices(&mut rng, 8, 8);
            let grad = p.minibatch_gradient(&x, &idx).unwrap();
            x = fw_step(&x, &grad, sched.eta(k), 1.0, lmo_seed(seed, 0, k)).unwrap();
        }
        let mut diff = x.clone();
        diff.axpy(-1.0, &run.final_x).unwrap();
        assert!(diff.frobenius_norm() < 1e-12);
    }

    #[test]
    fn replay_matches_maintained_iterate_over_long_run() {
        let p = generate_matrix_sensing(8, 6, 2, 60, 0.1, 21).unwrap();
        let sched = sfw_schedule(&constants(), Some(40)).unwrap();
        let run = run_sfw(&p, &sched, 200, 22, 0.0).unwrap();
        let replayed =
            replay_updates(&run.x0, &run.log.epochs[0], &sched, 0, 200).unwrap();
        let mut diff = replayed;
        diff.axpy(-1.0, &run.final_x).unwrap();
        assert!(diff.entries().iter().all(|e| e.abs() < 1e-10));
    }

    /// Minimal untimed driver: round-robin workers, each blocking on its
    /// reply. Used for equivalence tests without the simulator.
    fn drive_asyn(
        p: &dyn Objective,
        sched: &Schedule,
        mode: AlgoMode,
        efficient: bool,
        workers: usize,
        algo_seed: u64,
        capture: bool,
    ) -> RunResult {
        let mut master =
            AsynMaster::new(p, sched.clone(), mode, efficient, workers, algo_seed, 0.0, capture)
                .unwrap();
        let svrf = matches!(mode, AlgoMode::Svrf { .. });
        let mut ws: Vec<AsynWorker> = (0..workers)
            .map(|i| AsynWorker::new(i, master.x0.clone(), p.theta(), algo_seed, svrf))
            .collect();
        let mut clock = 0.0;
        'outer: loop {
            for w in ws.iter_mut() {
                let (msg, units) = w.prepare_submit(p, sched, algo_seed, capture).unwrap();
                clock += units;
                let reply = master.on_submit(p, msg, clock, clock, None).unwrap();
                w.apply_reply(&reply, sched).unwrap();
                if reply.done {
                    break 'outer;
                }
            }
        }
        master.into_result()
    }

    #[test]
    fn single_worker_asyn_equals_sequential_sfw() {
        let p = generate_matrix_sensing(6, 6, 2, 50, 0.1, 31).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 2, Some(30)).unwrap();
        let seq = run_sfw(&p, &sched, 40, 7, 0.0).unwrap();
        for efficient in [false, true] {
            let asy = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: 40 }, efficient, 1, 7, false);
            assert_eq!(asy.final_x, seq.final_x, "efficient = {efficient}");
            assert_eq!(asy.abandoned, 0);
            for (a, b) in asy.trace.iter().zip(&seq.trace) {
                assert_eq!(a.objective, b.objective);
                assert_eq!(a.grad_evals_total, b.grad_evals_total);
            }
        }
    }

    #[test]
    fn single_worker_asyn_equals_sequential_svrf() {
        let p = generate_matrix_sensing(6, 6, 2, 50, 0.1, 41).unwrap();
        let sched = svrf_asyn_schedule(1).unwrap();
        let seq = run_svrf(&p, &sched, 2, 17, 0.0).unwrap();
        for efficient in [false, true] {
            let asy = drive_asyn(&p, &sched, AlgoMode::Svrf { epochs: 2 }, efficient, 1, 17, false);
            assert_eq!(asy.final_x, seq.final_x, "efficient = {efficient}");
            for (a, b) in asy.trace.iter().zip(&seq.trace) {
                assert_eq!(a.objective, b.objective);
                assert_eq!(a.grad_evals_total, b.grad_evals_total);
            }
        }
    }

    #[test]
    fn naive_and_efficient_match_with_multiple_workers() {
        let p = generate_matrix_sensing(6, 6, 2, 50, 0.1, 51).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 4, Some(30)).unwrap();
        let naive = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: 60 }, false, 3, 5, false);
        let eff = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: 60 }, true, 3, 5, false);
        assert_eq!(naive.final_x, eff.final_x);
        assert_eq!(naive.abandoned, eff.abandoned);
        // Efficient variant ships strictly less than the dense broadcast.
        assert!(eff.bytes_out < naive.bytes_out);
    }

    #[test]
    fn delay_bound_enforced_and_abandonment_counted() {
        let p = generate_matrix_sensing(5, 5, 1, 30, 0.1, 61).unwrap();
        // tau = 1 with 4 round-robin workers forces abandonment.
        let sched = sfw_asyn_schedule(&constants(), 1, Some(20)).unwrap();
        let run = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: 50 }, true, 4, 3, false);
        assert!(run.abandoned > 0);
        assert!(run.delays.iter().all(|&d| d <= 1));
        assert!(nuclear_norm(&run.final_x).unwrap() <= 1.0 + 1e-6);
        // tau = infinity: nothing abandoned.
        let free = sfw_asyn_schedule(&constants(), 1, Some(20)).map(|mut s| {
            s.tau = TAU_INFINITE;
            s
        }).unwrap();
        let run2 = drive_asyn(&p, &free, AlgoMode::Sfw { t_max: 50 }, true, 4, 3, false);
        assert_eq!(run2.abandoned, 0);
    }

    #[test]
    fn per_channel_outbound_bounded_by_t() {
        let p = generate_matrix_sensing(7, 5, 2, 40, 0.1, 71).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 3, Some(25)).unwrap();
        let t = 80;
        let run = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: t }, true, 4, 9, false);
        let bound = (t * (7 + 5)) as f64;
        for (w, &units) in run.per_channel_out.iter().enumerate() {
            assert!(units <= bound + 1e-9, "channel {w}: {units} > {bound}");
        }
    }

    #[test]
    fn accepted_updates_satisfy_log_invariant() {
        let p = generate_matrix_sensing(5, 5, 2, 40, 0.1, 81).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 2, Some(25)).unwrap();
        let run = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: 60 }, true, 3, 11, false);
        for (i, e) in run.log.epochs[0].iter().enumerate() {
            // Entry i (0-based) was accepted at master count i; staleness
            // i - t_w must respect tau.
            assert!(i >= e.origin_iteration);
            assert!(i - e.origin_iteration <= 2);
        }
        // Replay fidelity on the asynchronous log.
        let replayed = replay_updates(&run.x0, &run.log.epochs[0], &sched, 0, 60).unwrap();
        let mut diff = replayed;
        diff.axpy(-1.0, &run.final_x).unwrap();
        assert!(diff.entries().iter().all(|e| e.abs() < 1e-10));
    }

    #[test]
    fn best_so_far_objective_nonincreasing_property() {
        let p = generate_matrix_sensing(6, 6, 2, 60, 0.0, 91).unwrap();
        let sched = sfw_schedule(&constants(), Some(40)).unwrap();
        let run = run_sfw(&p, &sched, 100, 3, 0.0).unwrap();
        let mut best = f64::INFINITY;
        for r in &run.trace {
            best = best.min(r.objective);
            assert!(best <= r.objective + 1e-15);
        }
        // The run should make real progress on a noiseless problem.
        assert!(best < run.trace[0].objective);
    }

    #[test]
    fn inexactness_probe_zero_for_full_batch_sequential() {
        let p = generate_matrix_sensing(5, 5, 1, 12, 0.0, 95).unwrap();
        let sched = Schedule {
            batch_rule: crate::schedules::BatchRule::Constant { size: 12, c: 1.0 },
            tau: 0,
            batch_cap: None,
            has_svrf_epochs: false,
        };
        // Single worker, tau irrelevant (0 after clamp), full batch... the
        // minibatch samples with replacement so this is not the full
        // gradient; probe exactness instead on captures built by hand.
        let x = initial_iterate(5, 5, 1.0, 1);
        let grad = p.full_gradient(&x).unwrap();
        let caps = vec![Capture { k: 3, t_w: 2, batch: 12, x_prev: x, grad_used: grad }];
        let c = ProblemConstants { l: 1.0, g: 1.0, d: 2.0 };
        let series = gradient_inexactness_probe(&p, &caps, &sched, &c).unwrap();
        assert_eq!(series.len(), 1);
        assert!(series[0].0 < 1e-12);
        assert!(series[0].1 > 0.0);
    }

    #[test]
    fn lmo_direction_improves_linearization() {
        // Sanity: each accepted update direction has nonpositive inner
        // product with the gradient it was computed from.
        let p = generate_matrix_sensing(6, 6, 2, 40, 0.1, 97).unwrap();
        let sched = sfw_asyn_schedule(&constants(), 2, Some(20)).unwrap();
        let run = drive_asyn(&p, &sched, AlgoMode::Sfw { t_max: 30 }, true, 2, 13, true);
        for cap in &run.captures {
            let dir = DenseMatrix::outer(
                &run.log.epochs[0][cap.k - 1].u,
                &run.log.epochs[0][cap.k - 1].v,
                1.0,
            );
            let val = frobenius_inner(&cap.grad_used, &dir).unwrap();
            assert!(val <= 1e-9, "ascent direction accepted: {val}");
        }
    }
}
