//! Master/worker simulation of distributed inference.
//!
//! The master scatters partitions, workers run one block per step and
//! exchange peer data between blocks, and the master gathers the outputs.
//! Two schedulers drive the same state machines: a deterministic event
//! loop (optionally with seeded random delivery order) and one OS thread
//! per worker. Both produce identical outputs, ledgers and timelines.

mod ledger;
mod message;
mod network;
mod worker;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use ledger::{CommLedger, LedgerEntry, LedgerKey};
pub use message::{Destination, DeviceId, Message, MessageKind, HEADER_BYTES};
pub use network::NetworkModel;
pub use worker::{aggregate, Master, StepOutcome, Worker};

use crate::attention::attention_reference;
use crate::error::{Error, Result};
use crate::flops;
use crate::model::{TransformerConfig, WeightSet};
use crate::partition::{make_partition_plan, PartitionId};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    /// Unpartitioned inference on one device.
    Single,
    /// Position-wise partitioning exchanging full partitions.
    Voltage,
    /// Position-wise partitioning exchanging segment means.
    Prism,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Single, Strategy::Voltage, Strategy::Prism];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::Voltage => "voltage",
            Strategy::Prism => "prism",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExchangeMode {
    /// One message per peer.
    #[default]
    Unicast,
    /// One message reaching every peer.
    Broadcast,
}

impl fmt::Display for ExchangeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExchangeMode::Unicast => "unicast",
            ExchangeMode::Broadcast => "broadcast",
        })
    }
}

impl FromStr for ExchangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unicast" => Ok(ExchangeMode::Unicast),
            "broadcast" => Ok(ExchangeMode::Broadcast),
            _ => Err(Error::Config(format!("unknown exchange mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduler {
    /// Deterministic event loop; all in-flight messages delivered each round.
    Fifo,
    /// Event loop that delivers a random subset of in-flight messages each
    /// round and polls workers in random order.
    Shuffled { seed: u64 },
    /// One thread per worker, channels for links.
    Threaded,
}

/// Fault injection for protocol tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Silently drop every message `from` sends for `block`.
    Drop { from: DeviceId, block: usize },
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mode: ExchangeMode,
    pub scheduler: Scheduler,
    pub network: NetworkModel,
    pub device_flops_per_s: f64,
    /// Event loop: consecutive rounds with no delivery and no progress
    /// before reporting a stall.
    pub step_budget: usize,
    /// Threaded: how long a blocked worker waits before reporting a stall.
    pub stall_timeout: Duration,
    pub trace: bool,
    pub fault: Option<Fault>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: ExchangeMode::Unicast,
            scheduler: Scheduler::Fifo,
            network: NetworkModel::default(),
            device_flops_per_s: 1e12,
            step_budget: 8,
            stall_timeout: Duration::from_secs(30),
            trace: false,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceBlockCost {
    pub device: DeviceId,
    pub flops: u64,
    pub compute_s: f64,
    /// Time to push what this device sent at the end of the block.
    pub comm_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpan {
    pub block: usize,
    pub devices: Vec<DeviceBlockCost>,
    /// Slowest device: the next block cannot start before it is done.
    pub span_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    /// Master scatter over its single link.
    pub distribution_s: f64,
    pub blocks: Vec<BlockSpan>,
    pub total_s: f64,
}

impl Timeline {
    /// Total FLOPs charged by `device` across all blocks.
    pub fn device_flops(&self, device: DeviceId) -> u64 {
        self.blocks
            .iter()
            .flat_map(|b| &b.devices)
            .filter(|d| d.device == device)
            .map(|d| d.flops)
            .sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.blocks.iter().flat_map(|b| &b.devices).map(|d| d.flops).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub output: Matrix<T>,
    pub ledger: CommLedger,
    pub timeline: Timeline,
    /// Header of every message sent, ordered by `(block, sender, seq)`.
    pub trace: Vec<String>,
}

/// Records produced while running, independent of scheduling order.
struct Log<T> {
    ledger: CommLedger,
    flops: Vec<(DeviceId, usize, u64)>,
    trace: Vec<(usize, DeviceId, u64, String)>,
    trace_on: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Log<T> {
    fn new(opts: &RunOptions) -> Self {
        Self {
            ledger: CommLedger::new(opts.mode, opts.network.bytes_per_scalar),
            flops: Vec::new(),
            trace: Vec::new(),
            trace_on: opts.trace,
            _marker: std::marker::PhantomData,
        }
    }

    fn sent(&mut self, msg: &Message<T>) {
        self.ledger.record(msg);
        if self.trace_on {
            self.trace.push((msg.block, msg.from, msg.seq, msg.trace_line()));
        }
    }

    fn merge(&mut self, other: Log<T>) {
        self.ledger.merge(&other.ledger);
        self.flops.extend(other.flops);
        self.trace.extend(other.trace);
    }
}

fn dropped<T>(fault: Option<Fault>, msg: &Message<T>) -> bool {
    matches!(fault, Some(Fault::Drop { from, block }) if msg.from == from && msg.block == block)
}

/// Runs `strategy` on input `x` and returns the aggregated output with its
/// communication ledger and modeled timeline.
pub fn run_distributed<T: Scalar>(
    x: &Matrix<T>,
    weights: &WeightSet<T>,
    config: &TransformerConfig,
    strategy: Strategy,
    opts: &RunOptions,
) -> Result<RunOutput<T>> {
    config.validate()?;
    weights.check_config(config)?;
    opts.network.validate()?;
    if !(opts.device_flops_per_s > 0.0) {
        return Err(Error::Config("device throughput must be positive".into()));
    }
    if x.shape() != (config.n_tokens, config.embed_dim) {
        return Err(Error::Shape {
            op: "run_distributed",
            left: x.shape(),
            right: (config.n_tokens, config.embed_dim),
        });
    }
    if strategy == Strategy::Single {
        return run_single(x, weights, config, opts);
    }
    if config.n_partitions < 2 {
        return Err(Error::Config(format!(
            "{strategy} needs at least 2 partitions, got {}",
            config.n_partitions
        )));
    }
    let plan = make_partition_plan(config.n_tokens, config.n_partitions)?;
    if strategy == Strategy::Prism {
        let smallest = plan.sizes().into_iter().min().unwrap_or(0);
        if config.landmarks == 0 || config.landmarks > smallest {
            return Err(Error::InvalidLandmarkCount {
                landmarks: config.landmarks,
                rows: smallest,
            });
        }
    }
    let mut master = Master::new(plan.clone(), strategy, config)?;
    let workers = plan
        .ids()
        .map(|p| Worker::new(p, strategy, opts.mode, config, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut log = Log::new(opts);
    let initial = master.distribute(x)?;
    for m in &initial {
        log.sent(m);
    }
    match opts.scheduler {
        Scheduler::Fifo => event_loop(&mut master, workers, initial, &mut log, opts, None)?,
        Scheduler::Shuffled { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            event_loop(&mut master, workers, initial, &mut log, opts, Some(&mut rng))?
        }
        Scheduler::Threaded => threaded(&mut master, workers, initial, &mut log, opts)?,
    }
    let output = master.finish()?;
    let timeline = build_timeline(&log, config.n_blocks, opts);
    let mut trace = log.trace;
    trace.sort_by_key(|a| (a.0, a.1, a.2));
    Ok(RunOutput {
        output,
        ledger: log.ledger,
        timeline,
        trace: trace.into_iter().map(|t| t.3).collect(),
    })
}

fn run_single<T: Scalar>(
    x: &Matrix<T>,
    weights: &WeightSet<T>,
    config: &TransformerConfig,
    opts: &RunOptions,
) -> Result<RunOutput<T>> {
    let device = DeviceId::worker(PartitionId::new(1)?);
    let causal = config.kind.is_causal();
    let eps = weights.ln_eps;
    let mut log = Log::<T>::new(opts);
    let mut h = x.clone();
    let last = weights.blocks.len() - 1;
    for (b, block) in weights.blocks.iter().enumerate() {
        let (next, n) = flops::measure(|| -> Result<Matrix<T>> {
            let normed = block.ln1(&h, eps)?;
            let heads = block
                .heads
                .iter()
                .map(|hw| attention_reference(&normed, hw, causal))
                .collect::<Result<Vec<_>>>()?;
            let out = block.finish(&h, &heads, eps)?;
            if b == last {
                weights.final_norm(&out)
            } else {
                Ok(out)
            }
        });
        h = next?;
        log.flops.push((device, b, n));
    }
    let timeline = build_timeline(&log, config.n_blocks, opts);
    Ok(RunOutput {
        output: h,
        ledger: log.ledger,
        timeline,
        trace: Vec::new(),
    })
}

fn route<T: Scalar>(
    msg: Message<T>,
    n_workers: usize,
    mut to_worker: impl FnMut(usize, Message<T>) -> Result<()>,
    mut to_master: impl FnMut(Message<T>) -> Result<()>,
) -> Result<()> {
    match msg.to {
        Destination::Device(d) if d.is_master() => to_master(msg),
        Destination::Device(d) => {
            let idx = d.0 as usize;
            if idx == 0 || idx > n_workers {
                return Err(Error::Protocol(format!("no such device {d}")));
            }
            to_worker(idx - 1, msg)
        }
        Destination::Broadcast => {
            let src = msg.from.0 as usize;
            for w in (0..n_workers).filter(|&w| w + 1 != src) {
                to_worker(w, msg.clone())?;
            }
            Ok(())
        }
    }
}

fn event_loop<T: Scalar>(
    master: &mut Master<T>,
    mut workers: Vec<Worker<'_, T>>,
    initial: Vec<Message<T>>,
    log: &mut Log<T>,
    opts: &RunOptions,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<()> {
    let n = workers.len();
    let mut in_flight = initial;
    let mut inboxes: Vec<Vec<Message<T>>> = (0..n).map(|_| Vec::new()).collect();
    let mut idle = 0usize;
    let mut rounds = 0usize;
    let mut blocked: Vec<String> = Vec::new();
    loop {
        rounds += 1;
        let deliver: Vec<Message<T>> = match rng.as_deref_mut() {
            Some(r) if !in_flight.is_empty() => {
                in_flight.shuffle(r);
                let k = r.gen_range(1..=in_flight.len());
                in_flight.drain(..k).collect()
            }
            _ => std::mem::take(&mut in_flight),
        };
        let delivered = !deliver.is_empty();
        for msg in deliver {
            if dropped(opts.fault, &msg) {
                continue;
            }
            route(
                msg,
                n,
                |w, m| {
                    inboxes[w].push(m);
                    Ok(())
                },
                |m| master.receive(m),
            )?;
        }
        if master.is_complete() {
            return Ok(());
        }
        let mut order: Vec<usize> = (0..n).collect();
        if let Some(r) = rng.as_deref_mut() {
            order.shuffle(r);
        }
        let mut progressed = false;
        blocked.clear();
        for w in order {
            let device = workers[w].device();
            match workers[w].step(std::mem::take(&mut inboxes[w]))? {
                StepOutcome::Advanced {
                    block,
                    flops,
                    outgoing,
                } => {
                    progressed = true;
                    log.flops.push((device, block, flops));
                    for m in &outgoing {
                        log.sent(m);
                    }
                    in_flight.extend(outgoing);
                }
                StepOutcome::Blocked { block, missing } => {
                    let missing: Vec<String> = missing.iter().map(|d| d.to_string()).collect();
                    blocked.push(format!(
                        "{device} waits at block {block} for [{}]",
                        missing.join(", ")
                    ));
                }
                StepOutcome::Finished => {}
            }
        }
        if progressed || delivered || !in_flight.is_empty() {
            idle = 0;
        } else {
            idle += 1;
            if idle >= opts.step_budget.max(1) {
                return Err(Error::Stall {
                    steps: rounds,
                    diagnostic: blocked.join("; "),
                });
            }
        }
    }
}

fn threaded<T: Scalar>(
    master: &mut Master<T>,
    workers: Vec<Worker<'_, T>>,
    initial: Vec<Message<T>>,
    log: &mut Log<T>,
    opts: &RunOptions,
) -> Result<()> {
    enum Event<T> {
        Msg(Message<T>),
        Failed(Error),
    }
    const POLL: Duration = Duration::from_millis(20);
    let n = workers.len();
    let abort = AtomicBool::new(false);
    let (worker_tx, worker_rx): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<Message<T>>()).unzip();
    let (master_tx, master_rx) = mpsc::channel::<Event<T>>();

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::with_capacity(n);
        for (mut worker, rx) in workers.into_iter().zip(worker_rx) {
            let worker_tx = worker_tx.clone();
            let master_tx = master_tx.clone();
            let abort = &abort;
            handles.push(scope.spawn(move || -> Log<T> {
                let mut local = Log::new(opts);
                let mut run = || -> Result<()> {
                    let mut batch: Vec<Message<T>> = Vec::new();
                    loop {
                        batch.extend(rx.try_iter());
                        match worker.step(std::mem::take(&mut batch))? {
                            StepOutcome::Advanced {
                                block,
                                flops,
                                outgoing,
                            } => {
                                local.flops.push((worker.device(), block, flops));
                                for msg in outgoing {
                                    local.sent(&msg);
                                    if dropped(opts.fault, &msg) {
                                        continue;
                                    }
                                    route(
                                        msg,
                                        n,
                                        |w, m| {
                                            worker_tx[w]
                                                .send(m)
                                                .map_err(|_| Error::Protocol("peer link closed".into()))
                                        },
                                        |m| {
                                            master_tx
                                                .send(Event::Msg(m))
                                                .map_err(|_| Error::Protocol("master link closed".into()))
                                        },
                                    )?;
                                }
                            }
                            StepOutcome::Blocked { block, missing } => {
                                let started = Instant::now();
                                loop {
                                    if abort.load(Ordering::Relaxed) {
                                        return Ok(());
                                    }
                                    match rx.recv_timeout(POLL) {
                                        Ok(m) => {
                                            batch.push(m);
                                            break;
                                        }
                                        Err(mpsc::RecvTimeoutError::Timeout) => {
                                            if started.elapsed() >= opts.stall_timeout {
                                                let missing: Vec<String> =
                                                    missing.iter().map(|d| d.to_string()).collect();
                                                return Err(Error::Stall {
                                                    steps: block,
                                                    diagnostic: format!(
                                                        "{} waits at block {block} for [{}]",
                                                        worker.device(),
                                                        missing.join(", ")
                                                    ),
                                                });
                                            }
                                        }
                                        Err(mpsc::RecvTimeoutError::Disconnected) => {
                                            return Err(Error::Protocol("inbound link closed".into()))
                                        }
                                    }
                                }
                            }
                            StepOutcome::Finished => return Ok(()),
                        }
                    }
                };
                if let Err(e) = run() {
                    abort.store(true, Ordering::Relaxed);
                    let _ = master_tx.send(Event::Failed(e));
                }
                local
            }));
        }
        drop(master_tx);

        let mut outcome = initial
            .into_iter()
            .filter(|msg| !dropped(opts.fault, msg))
            .try_for_each(|msg| {
                route(
                    msg,
                    n,
                    |w, m| {
                        worker_tx[w]
                            .send(m)
                            .map_err(|_| Error::Protocol("worker link closed".into()))
                    },
                    |_| Err(Error::Protocol("master cannot message itself".into())),
                )
            });
        drop(worker_tx);
        while outcome.is_ok() && !master.is_complete() {
            match master_rx.recv() {
                Ok(Event::Msg(m)) => {
                    if let Err(e) = master.receive(m) {
                        outcome = Err(e);
                        break;
                    }
                }
                Ok(Event::Failed(e)) => {
                    outcome = Err(e);
                    break;
                }
                Err(_) => {
                    outcome = Err(Error::Protocol("all workers exited early".into()));
                    break;
                }
            }
        }
        if outcome.is_err() {
            abort.store(true, Ordering::Relaxed);
        }
        for h in handles {
            match h.join() {
                Ok(local) => log.merge(local),
                Err(p) => std::panic::resume_unwind(p),
            }
        }
        outcome
    })
}

fn build_timeline<T: Scalar>(log: &Log<T>, n_blocks: usize, opts: &RunOptions) -> Timeline {
    let net = &opts.network;
    let master_sent = log.ledger.device_block(DeviceId::MASTER, 0);
    let distribution_s = net.transfer_time(master_sent.bytes, master_sent.messages);
    let mut flops = log.flops.clone();
    flops.sort();
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let devices: Vec<DeviceBlockCost> = flops
            .iter()
            .filter(|(_, blk, _)| *blk == b)
            .map(|&(device, _, f)| {
                // Data produced by block b is tagged with the consuming block b + 1.
                let sent = log.ledger.device_block(device, b + 1);
                DeviceBlockCost {
                    device,
                    flops: f,
                    compute_s: f as f64 / opts.device_flops_per_s,
                    comm_s: net.transfer_time(sent.bytes, sent.messages),
                }
            })
            .collect();
        let span_s = devices.iter().map(|d| d.compute_s + d.comm_s).fold(0.0, f64::max);
        blocks.push(BlockSpan {
            block: b,
            devices,
            span_s,
        });
    }
    let total_s = distribution_s + blocks.iter().map(|b| b.span_s).sum::<f64>();
    Timeline {
        distribution_s,
        blocks,
        total_s,
    }
}
