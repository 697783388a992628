//! Named correctness properties run by `segattn verify`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segattn::analysis::{device_flops, predicted_ledger};
use segattn::attention::{
    attention_duplicated_oracle, attention_permuted_kv, attention_reference, attention_scaled,
    build_causal_mask, HeadWeights,
};
use segattn::model::{generate_weights, reference_forward, synthetic_input, ModelKind, TransformerConfig};
use segattn::partition::{assemble_augmented, make_partition_plan, segment_means};
use segattn::runtime::{run_distributed, DeviceId, ExchangeMode, RunOptions, Scheduler, Strategy};
use segattn::{Error, Matrix, Scalar};

use crate::config::{InjectFault, VerifySection};

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub checks: usize,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.properties
            .iter()
            .filter(|p| !p.passed())
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let width = self
            .properties
            .iter()
            .map(|p| p.name.len())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut s = String::new();
        writeln!(
            s,
            "{:<width$}  {:>6}  {:>10}  {:>10}  status",
            "property", "checks", "max_error", "tolerance"
        )
        .unwrap();
        for p in &self.properties {
            writeln!(
                s,
                "{:<width$}  {:>6}  {:>10.3e}  {:>10.1e}  {}",
                p.name,
                p.checks,
                p.max_error,
                p.tolerance,
                if p.passed() { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        s
    }
}

/// Equivalence and end-to-end tolerances for a scalar type.
fn tolerances<T: Scalar>() -> (f64, f64) {
    if T::BYTES == 8 {
        (1e-12, 1e-10)
    } else {
        (1e-4, 1e-3)
    }
}

fn random<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-1.0..1.0)))
}

fn random_head<T: Scalar>(dm: usize, d: usize, rng: &mut ChaCha8Rng) -> HeadWeights<T> {
    let s = 1.0 / (dm as f64).sqrt();
    let mut w = || random::<T>(dm, d, rng).map(|v| v * T::lit(s));
    HeadWeights {
        w_q: w(),
        w_k: w(),
        w_v: w(),
    }
}

fn err<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    a.max_abs_diff(b).to_f64_lossy()
}

struct Acc {
    result: PropertyResult,
}

impl Acc {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            result: PropertyResult {
                name: name.to_string(),
                max_error: 0.0,
                tolerance,
                checks: 0,
            },
        }
    }

    fn observe(&mut self, e: f64) {
        self.result.checks += 1;
        // NaN must fail, so it is recorded as infinite
        let e = if e.is_nan() { f64::INFINITY } else { e };
        self.result.max_error = self.result.max_error.max(e);
    }
}

fn with_partitions(base: &TransformerConfig, p: usize, l: usize) -> TransformerConfig {
    let mut c = base.clone();
    c.n_partitions = p;
    c.landmarks = l;
    c
}

/// Runs every property applicable to the configured partition counts.
pub fn run_verify<T: Scalar>(
    section: &VerifySection,
    seed: u64,
    mode: ExchangeMode,
) -> Result<VerifyReport, Error> {
    let model = section.model.resolve()?;
    let (tol_eq, tol_e2e) = tolerances::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dm, d) = (model.n_tokens, model.embed_dim, model.head_dim);
    let distributed: Vec<usize> = section.partitions.iter().copied().filter(|&p| p >= 2).collect();
    let mut report = VerifyReport::default();

    // Reference self-checks, independent of partitioning.
    let mut perm = Acc::new("kv_permutation_invariance", tol_eq);
    for _ in 0..section.trials {
        let x = random::<T>(n, dm, &mut rng);
        let head = random_head::<T>(dm, d, &mut rng);
        let causal = model.kind.is_causal();
        let reference = attention_reference(&x, &head, causal)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        perm.observe(err(
            &attention_permuted_kv(&x, &order, &head, causal)?,
            &reference,
        ));
    }
    let x = synthetic_input::<T>(&model, seed);
    let w = generate_weights::<T>(&model, seed)?;
    let a = reference_forward(&x, &w, &model)?;
    let b = reference_forward(&x, &w, &model)?;
    let mut det = Acc::new("reference_determinism", 0.0);
    det.observe(if a.bit_eq(&b) { 0.0 } else { f64::INFINITY });
    report.properties.push(perm.result);
    report.properties.push(det.result);

    if distributed.is_empty() {
        return Ok(report);
    }

    let mut scaled = Acc::new("scaled_vs_duplicated", tol_eq);
    for &p in &distributed {
        let plan = make_partition_plan(n, p)?;
        let max_l = n / p;
        for _ in 0..section.trials {
            let l = rng.gen_range(1..=max_l);
            let x = random::<T>(n, dm, &mut rng);
            let head = random_head::<T>(dm, d, &mut rng);
            let means = plan
                .ids()
                .map(|q| segment_means(&plan.slice(&x, q)?, l, q))
                .collect::<Result<Vec<_>, _>>()?;
            for owner in plan.ids() {
                let x_p = plan.slice(&x, owner)?;
                let peers: Vec<_> = means.iter().filter(|m| m.source() != owner).cloned().collect();
                let mut aug = assemble_augmented(&x_p, &peers, &plan, owner)?;
                if section.inject_fault == InjectFault::WrongG {
                    let mut g = aug.g().to_vec();
                    g[0] += 1;
                    aug = aug.with_counts_unchecked(g);
                }
                let mask = model.kind.is_causal().then(|| build_causal_mask(&plan, owner, l));
                let fast = attention_scaled(&x_p, &aug, &head, mask.as_ref())?;
                let slow = attention_duplicated_oracle(&x_p, &peers, &head, mask.as_ref())?;
                scaled.observe(err(&fast, &slow));
            }
        }
    }
    report.properties.push(scaled.result);

    let mut voltage = Acc::new("voltage_matches_single", tol_e2e);
    let mut lossless = Acc::new("prism_lossless_limit", tol_e2e);
    let mut causal = Acc::new("causal_future_invariance", 0.0);
    let mut ledger = Acc::new("ledger_audit", 0.0);
    let mut flops = Acc::new("flop_reconciliation", 0.0);
    let mut sched = Acc::new("scheduler_determinism", 0.0);
    let opts = RunOptions {
        mode,
        ..RunOptions::default()
    };
    let threaded = RunOptions {
        scheduler: Scheduler::Threaded,
        ..opts.clone()
    };
    let mismatch = |ok: bool| if ok { 0.0 } else { f64::INFINITY };
    for &p in &distributed {
        let cfg = with_partitions(&model, p, 1);
        let x = synthetic_input::<T>(&cfg, seed);
        let w = generate_weights::<T>(&cfg, seed)?;
        let single = reference_forward(&x, &w, &cfg)?;
        let run = run_distributed(&x, &w, &cfg, Strategy::Voltage, &opts)?;
        voltage.observe(err(&run.output, &single));

        // Equal partitions so that L = N_p holds for every device.
        let mut eq = with_partitions(&model, p, n / p);
        eq.n_tokens = p * (n / p);
        let xe = synthetic_input::<T>(&eq, seed);
        let single = reference_forward(&xe, &w, &eq)?;
        let run = run_distributed(&xe, &w, &eq, Strategy::Prism, &opts)?;
        lossless.observe(err(&run.output, &single));

        for strategy in [Strategy::Voltage, Strategy::Prism] {
            let l = 1 + (n / p - 1) / 2;
            let cfg = with_partitions(&model, p, l);
            let run = run_distributed(&x, &w, &cfg, strategy, &opts)?;
            let predicted = predicted_ledger::<T>(strategy, &cfg, mode, opts.network.bytes_per_scalar)?;
            ledger.observe(mismatch(run.ledger == predicted));
            let plan = make_partition_plan(n, p)?;
            for q in plan.ids() {
                let analytic = device_flops(strategy, &cfg, q)?;
                let measured = run.timeline.device_flops(DeviceId::worker(q));
                flops.observe((analytic as f64 - measured as f64).abs());
            }
            let other = run_distributed(&x, &w, &cfg, strategy, &threaded)?;
            sched.observe(mismatch(
                other.output.bit_eq(&run.output) && other.ledger == run.ledger,
            ));
        }

        let mut dec = with_partitions(&model, p, 1 + (n / p - 1) / 2);
        dec.kind = ModelKind::Decoder;
        let wd = generate_weights::<T>(&dec, seed)?;
        let base = run_distributed(&x, &wd, &dec, Strategy::Prism, &opts)?;
        for _ in 0..section.trials {
            let t = rng.gen_range(1..n);
            let mut y = x.clone();
            for j in t..n {
                for c in 0..dm {
                    y.set(j, c, T::lit(rng.gen_range(-3.0..3.0)));
                }
            }
            let run = run_distributed(&y, &wd, &dec, Strategy::Prism, &opts)?;
            let unchanged = run
                .output
                .slice_rows(0, t)?
                .bit_eq(&base.output.slice_rows(0, t)?);
            causal.observe(mismatch(unchanged));
        }
    }
    for acc in [voltage, lossless, causal, ledger, flops, sched] {
        if acc.result.checks > 0 {
            report.properties.push(acc.result);
        }
    }
    Ok(report)
}
