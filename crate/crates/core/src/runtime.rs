//! In-process coupling fabric between a coordinator role and agent
//! roles: immutable typed payloads fanned out per round, concurrent
//! agent computations on a bounded worker pool, a barrier collecting
//! reports in deterministic agent order, and per-event wall-clock
//! profiling.
//!
//! Results are bit-identical across worker counts: each agent's
//! computation depends only on its own state and the broadcast payload,
//! and reports are collected by agent index, never by completion order.

use rayon::prelude::*;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

/// Message content exchanged between the coordinator and agents.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Coordinator → agents: price series and last system imbalance.
    PriceBroadcast {
        prices: Vec<f64>,
        imbalance: Vec<f64>,
    },
    /// Agent → coordinator: a dispatch timeseries.
    DispatchReport { series: Vec<f64> },
    /// Agent → coordinator: price–quantity bid blocks for one hour.
    BidSubmission { blocks: Vec<(f64, f64)> },
    /// Coordinator → agents: clearing price and per-agent cleared net
    /// quantity (indexed like the agent list).
    ClearingNotice { price: f64, accepted: Vec<f64> },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::PriceBroadcast { .. } => "price_broadcast",
            Payload::DispatchReport { .. } => "dispatch_report",
            Payload::BidSubmission { .. } => "bid_submission",
            Payload::ClearingNotice { .. } => "clearing_notice",
        }
    }

    /// Serialized size estimate (8 bytes per scalar).
    pub fn size_bytes(&self) -> usize {
        match self {
            Payload::PriceBroadcast { prices, imbalance } => 8 * (prices.len() + imbalance.len()),
            Payload::DispatchReport { series } => 8 * series.len(),
            Payload::BidSubmission { blocks } => 16 * blocks.len(),
            Payload::ClearingNotice { accepted, .. } => 8 * (1 + accepted.len()),
        }
    }
}

/// An immutable message as seen by an agent during a round.
#[derive(Debug)]
pub struct Envelope<'a> {
    pub sender: &'a str,
    pub round: u64,
    pub payload: &'a Payload,
}

/// Anything that can participate in an exchange round.
pub trait CoupledAgent {
    fn agent_id(&self) -> &str;
}

/// Failure raised inside one agent's computation.
#[derive(Debug, Clone)]
pub struct AgentFailure(pub String);

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("round {round} aborted: agent `{agent}` failed: {message}")]
    AgentFailed {
        round: u64,
        agent: String,
        message: String,
    },
}

/// One timed event in a run: a broadcast, an agent computation, or a
/// coordinator phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub round: u64,
    pub agent: String,
    pub phase: String,
    pub start_us: u64,
    pub end_us: u64,
    pub bytes_in: usize,
    pub bytes_out: usize,
}

impl TraceEvent {
    pub fn duration_us(&self) -> u64 {
        self.end_us.saturating_sub(self.start_us)
    }
}

/// Complete event log of a coordinated run.
#[derive(Debug, Clone, Default)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "round",
            "agent",
            "phase",
            "start_us",
            "end_us",
            "bytes_in",
            "bytes_out",
        ])?;
        for e in &self.events {
            w.write_record([
                e.round.to_string(),
                e.agent.clone(),
                e.phase.clone(),
                e.start_us.to_string(),
                e.end_us.to_string(),
                e.bytes_in.to_string(),
                e.bytes_out.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

const COORDINATOR: &str = "coordinator";

/// Coordinator-side runtime owning the worker pool and the event log.
pub struct Runtime {
    pool: rayon::ThreadPool,
    threads: usize,
    epoch: Instant,
    round: AtomicU64,
    trace: Mutex<Vec<TraceEvent>>,
}

impl Runtime {
    /// `threads == None` uses the available hardware parallelism.
    pub fn new(threads: Option<usize>) -> Self {
        let threads =
            threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool construction");
        Self {
            pool,
            threads,
            epoch: Instant::now(),
            round: AtomicU64::new(0),
            trace: Mutex::new(Vec::new()),
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    /// Fans an identical immutable payload out to every agent, runs the
    /// agents' computations concurrently, and returns their reports in
    /// agent order regardless of completion order. A failing agent
    /// aborts the round with its id attached.
    pub fn execute_round<A, R, F>(
        &self,
        phase: &str,
        payload: Payload,
        agents: &mut [A],
        work: F,
    ) -> Result<Vec<R>, RoundError>
    where
        A: CoupledAgent + Send,
        R: Send,
        F: Fn(&mut A, &Envelope<'_>) -> Result<(R, Payload), AgentFailure> + Sync,
    {
        let round = self.round.fetch_add(1, Ordering::SeqCst) + 1;
        let bytes_in = payload.size_bytes();
        let fanout = self.now_us();
        self.trace.lock().unwrap().push(TraceEvent {
            round,
            agent: COORDINATOR.to_string(),
            phase: format!("{phase}.broadcast"),
            start_us: fanout,
            end_us: fanout,
            bytes_in: 0,
            bytes_out: bytes_in,
        });

        let epoch = self.epoch;
        let outcomes: Vec<(Result<R, AgentFailure>, TraceEvent)> = self.pool.install(|| {
            agents
                .par_iter_mut()
                .map(|agent| {
                    let id = agent.agent_id().to_string();
                    let start = epoch.elapsed().as_micros() as u64;
                    let envelope = Envelope {
                        sender: COORDINATOR,
                        round,
                        payload: &payload,
                    };
                    let outcome = work(agent, &envelope);
                    let end = epoch.elapsed().as_micros() as u64;
                    let (result, bytes_out) = match outcome {
                        Ok((r, reply)) => (Ok(r), reply.size_bytes()),
                        Err(e) => (Err(e), 0),
                    };
                    let event = TraceEvent {
                        round,
                        agent: id,
                        phase: phase.to_string(),
                        start_us: start,
                        end_us: end,
                        bytes_in,
                        bytes_out,
                    };
                    (result, event)
                })
                .collect()
        });

        let mut reports = Vec::with_capacity(outcomes.len());
        let mut events = Vec::with_capacity(outcomes.len());
        let mut failure: Option<RoundError> = None;
        for (result, event) in outcomes {
            match result {
                Ok(r) if failure.is_none() => reports.push(r),
                Ok(_) => {}
                Err(AgentFailure(message)) => {
                    if failure.is_none() {
                        failure = Some(RoundError::AgentFailed {
                            round,
                            agent: event.agent.clone(),
                            message,
                        });
                    }
                }
            }
            events.push(event);
        }
        self.trace.lock().unwrap().extend(events);
        match failure {
            Some(e) => Err(e),
            None => Ok(reports),
        }
    }

    /// Times a coordinator-side phase (e.g. market clearing) and logs it.
    pub fn coordinator_phase<T>(&self, phase: &str, bytes: usize, f: impl FnOnce() -> T) -> T {
        let round = self.round.fetch_add(1, Ordering::SeqCst) + 1;
        let start = self.now_us();
        let out = f();
        let end = self.now_us();
        self.trace.lock().unwrap().push(TraceEvent {
            round,
            agent: COORDINATOR.to_string(),
            phase: phase.to_string(),
            start_us: start,
            end_us: end,
            bytes_in: bytes,
            bytes_out: 0,
        });
        out
    }

    /// Drains the accumulated event log.
    pub fn take_trace(&self) -> EventTrace {
        EventTrace {
            events: std::mem::take(&mut *self.trace.lock().unwrap()),
        }
    }
}

/// Per-round digest of an [`EventTrace`].
#[derive(Debug, Clone)]
pub struct RoundProfile {
    pub round: u64,
    pub phase: String,
    /// Barrier-to-barrier wall time of the round.
    pub wall_us: u64,
    /// Sum of agent busy time inside the round.
    pub busy_us: u64,
    pub slowest_agent: String,
    pub slowest_us: u64,
}

/// Aggregate profiling summary (critical path and busy/idle breakdown).
#[derive(Debug, Clone)]
pub struct ProfileSummary {
    pub rounds: Vec<RoundProfile>,
    /// Sum of per-round wall times: the coordinated critical path.
    pub total_wall_us: u64,
    pub total_busy_us: u64,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot profile an empty trace")]
    EmptyTrace,
}

/// Reduces a trace to per-round critical paths and the slowest agents.
pub fn profile_report(trace: &EventTrace) -> Result<ProfileSummary, ProfileError> {
    if trace.events.is_empty() {
        return Err(ProfileError::EmptyTrace);
    }
    let mut rounds: Vec<RoundProfile> = Vec::new();
    for e in &trace.events {
        match rounds.last_mut() {
            Some(r) if r.round == e.round => {
                r.wall_us = r
                    .wall_us
                    .max(e.end_us.saturating_sub(round_start(trace, e.round)));
                r.busy_us += e.duration_us();
                if e.duration_us() >= r.slowest_us {
                    r.slowest_us = e.duration_us();
                    r.slowest_agent = e.agent.clone();
                }
            }
            _ => rounds.push(RoundProfile {
                round: e.round,
                phase: e.phase.clone(),
                wall_us: e.duration_us(),
                busy_us: e.duration_us(),
                slowest_agent: e.agent.clone(),
                slowest_us: e.duration_us(),
            }),
        }
    }
    let total_wall_us = rounds.iter().map(|r| r.wall_us).sum();
    let total_busy_us = rounds.iter().map(|r| r.busy_us).sum();
    Ok(ProfileSummary {
        rounds,
        total_wall_us,
        total_busy_us,
    })
}

fn round_start(trace: &EventTrace, round: u64) -> u64 {
    trace
        .events
        .iter()
        .filter(|e| e.round == round)
        .map(|e| e.start_us)
        .min()
        .unwrap_or(0)
}

impl ProfileSummary {
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "round",
            "phase",
            "wall_us",
            "busy_us",
            "slowest_agent",
            "slowest_us",
        ])?;
        for r in &self.rounds {
            w.write_record([
                r.round.to_string(),
                r.phase.clone(),
                r.wall_us.to_string(),
                r.busy_us.to_string(),
                r.slowest_agent.clone(),
                r.slowest_us.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
