//! Real concurrent in-process master/worker runtime.
//!
//! Same state machines as the simulator, driven by threads and channels
//! instead of a virtual clock: one master loop, W worker loops, message
//! passing only (Submit up, catch-up/model replies down, a `done` flag as
//! the stop signal). The master is the single writer of its state; workers
//! never observe each other. Wall-clock times are reported but should never
//! be asserted on — correctness checks use log-derived properties only.

use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{mix_seed, AlgoMode, AsynMaster, AsynWorker, Reply, RunResult, SubmitMsg};
use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::schedules::Schedule;

/// Straggler emulation: sleep k * unit_micros with k geometric(p) before
/// each task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InjectedDelayModel {
    pub p: f64,
    pub unit_micros: u64,
}

impl InjectedDelayModel {
    fn sample_micros<R: Rng>(&self, rng: &mut R) -> Result<u64> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Parameter(format!("delay p {} outside (0, 1]", self.p)));
        }
        if self.p == 1.0 {
            return Ok(self.unit_micros);
        }
        let u = 1.0 - rng.gen::<f64>();
        let k = (u.ln() / (1.0 - self.p).ln()).floor() + 1.0;
        Ok((self.unit_micros as f64 * k.max(1.0)) as u64)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LiveOptions {
    pub injected_delay: Option<InjectedDelayModel>,
    /// Stop accepting once this much wall time has elapsed; the partial
    /// trace is still flushed.
    pub wall_budget: Option<Duration>,
    pub capture: bool,
}

/// Runs the asynchronous algorithms on real threads. Returns the same
/// artifacts as the simulator with wall_time populated.
#[allow(clippy::too_many_arguments)]
pub fn run_live(
    problem: &dyn Objective,
    schedule: &Schedule,
    mode: AlgoMode,
    efficient: bool,
    workers: usize,
    algo_seed: u64,
    f_ref: f64,
    options: &LiveOptions,
) -> Result<RunResult> {
    if workers < 1 {
        return Err(Error::Parameter("need at least one worker".into()));
    }
    let mut master = AsynMaster::new(
        problem,
        schedule.clone(),
        mode,
        efficient,
        workers,
        algo_seed,
        f_ref,
        options.capture,
    )?;
    let svrf = matches!(mode, AlgoMode::Svrf { .. });
    let x0 = master.x0.clone();
    let theta = problem.theta();

    let (inbox_tx, inbox_rx) = mpsc::channel::<SubmitMsg>();
    let mut reply_txs: Vec<Option<mpsc::Sender<Reply>>> = Vec::with_capacity(workers);
    let mut worker_ends = Vec::with_capacity(workers);
    for _ in 0..workers {
        let (tx, rx) = mpsc::channel::<Reply>();
        reply_txs.push(Some(tx));
        worker_ends.push(rx);
    }

    let start = Instant::now();
    std::thread::scope(|scope| -> Result<()> {
        for (id, reply_rx) in worker_ends.into_iter().enumerate() {
            let tx = inbox_tx.clone();
            let x0 = x0.clone();
            let delay = options.injected_delay;
            let capture = options.capture;
            scope.spawn(move || {
                let mut w = AsynWorker::new(id, x0, theta, algo_seed, svrf);
                let mut delay_rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(algo_seed, 0x51EE9 + id as u64));
                loop {
                    if let Some(model) = delay {
                        match model.sample_micros(&mut delay_rng) {
                            Ok(us) => std::thread::sleep(Duration::from_micros(us)),
                            Err(_) => break,
                        }
                    }
                    let msg = match w.prepare_submit(problem, schedule, algo_seed, capture) {
                        Ok((msg, _units)) => msg,
                        Err(_) => break,
                    };
                    if tx.send(msg).is_err() {
                        break; // master gone: clean shutdown
                    }
                    match reply_rx.recv() {
                        Ok(reply) => {
                            if w.apply_reply(&reply, schedule).is_err() || reply.done {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                }
            });
        }
        drop(inbox_tx);

        let mut active = workers;
        while active > 0 {
            let msg = match inbox_rx.recv() {
                Ok(m) => m,
                // All workers gone (e.g. a panic closed the channel): flush
                // whatever was accepted so far.
                Err(_) => break,
            };
            let wall = start.elapsed().as_secs_f64();
            if let Some(budget) = options.wall_budget {
                if start.elapsed() > budget {
                    master.done = true;
                }
            }
            let worker_id = msg.worker_id;
            let reply = master.on_submit(problem, msg, wall, wall, Some(wall))?;
            let done = reply.done;
            if let Some(tx) = &reply_txs[worker_id] {
                if tx.send(reply).is_err() || done {
                    reply_txs[worker_id] = None;
                    active -= 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(master.into_result())
}
