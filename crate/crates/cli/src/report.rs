//! Cost tables and latency series. Every cell is a formatted field of a
//! [`CostReport`] or a latency sample; nothing is computed here.

use segattn::analysis::{latency_curve, log_sweep, Compression, CostReport};
use segattn::runtime::{NetworkModel, Strategy};
use segattn::Error;

use crate::config::{CompareSection, LatencySection};

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub experiment: String,
    pub model: String,
    pub inferred: bool,
    pub report: CostReport,
}

/// One row per (strategy, P, compression) in file order; the single
/// baseline appears once per experiment.
pub fn compare_rows(sections: &[CompareSection]) -> Result<Vec<CompareRow>, Error> {
    let mut rows = Vec::new();
    for sec in sections {
        let model = sec.model.resolve()?;
        let mut push = |report: CostReport| {
            rows.push(CompareRow {
                experiment: sec.name.clone(),
                model: sec.model.label(),
                inferred: sec.inferred,
                report,
            })
        };
        for strategy in sec.strategies()? {
            match strategy {
                Strategy::Single => push(CostReport::new(strategy, &model, 1, None)?),
                Strategy::Voltage => {
                    for &p in &sec.partitions {
                        push(CostReport::new(strategy, &model, p, None)?);
                    }
                }
                Strategy::Prism => {
                    for &p in &sec.partitions {
                        for c in sec.compressions() {
                            push(CostReport::new(strategy, &model, p, Some(c))?);
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub const COMPARE_HEADER: [&str; 14] = [
    "experiment",
    "model",
    "inferred",
    "strategy",
    "P",
    "L",
    "nominal_cr",
    "gflops_total",
    "gflops_per_device",
    "comp_speedup_pct",
    "pdplc_tokens",
    "cr",
    "comm_speedup_pct",
    "total_flops",
];

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

fn cells(row: &CompareRow) -> Vec<String> {
    let r = &row.report;
    vec![
        row.experiment.clone(),
        row.model.clone(),
        row.inferred.to_string(),
        r.strategy.to_string(),
        r.n_partitions.to_string(),
        opt(r.landmarks, |l| l.to_string()),
        opt(r.nominal_cr, |k| format!("{k}")),
        format!("{:.2}", r.total_flops as f64 / 1e9),
        format!("{:.2}", r.flops_per_device / 1e9),
        format!("{:.2}", r.comp_speedup_pct),
        r.pdplc_tokens.to_string(),
        opt(r.cr, |c| format!("{c:.2}")),
        opt(r.comm_speedup_pct, |s| format!("{s:.2}")),
        r.total_flops.to_string(),
    ]
}

pub fn compare_csv(rows: &[CompareRow]) -> Result<String, Error> {
    to_csv(&COMPARE_HEADER, rows.iter().map(cells))
}

/// Aligned text table: numbers right-aligned, text left-aligned.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(cells).collect();
    // the raw FLOP count is only useful in CSV
    let shown = COMPARE_HEADER.len() - 1;
    let widths: Vec<usize> = (0..shown)
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(COMPARE_HEADER[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cols: Vec<&str>| {
        cols.iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, &w))| {
                if i < 4 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(COMPARE_HEADER[..shown].to_vec());
    out.push('\n');
    for r in &body {
        out.push_str(&line(r[..shown].iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencySeries {
    pub strategy: Strategy,
    pub n_partitions: usize,
    pub landmarks: Option<usize>,
    /// `(bandwidth_bps, latency_s)`.
    pub points: Vec<(f64, f64)>,
}

impl LatencySeries {
    pub fn label(&self) -> String {
        match (self.strategy, self.landmarks) {
            (Strategy::Single, _) => "single".into(),
            (s, Some(l)) => format!("{s}-P{}-L{l}", self.n_partitions),
            (s, None) => format!("{s}-P{}", self.n_partitions),
        }
    }
}

pub fn latency_series(sec: &LatencySection) -> Result<Vec<LatencySeries>, Error> {
    let model = sec.model.resolve()?;
    let net: NetworkModel = sec.network();
    let sweep: Vec<f64> = log_sweep(
        sec.bandwidth_mbps.min,
        sec.bandwidth_mbps.max,
        sec.bandwidth_mbps.points,
    )
    .into_iter()
    .map(|m| m * 1e6)
    .collect();
    let throughput = sec.device_gflops * 1e9;
    let mut out = vec![LatencySeries {
        strategy: Strategy::Single,
        n_partitions: 1,
        landmarks: None,
        points: latency_curve(
            Strategy::Single,
            &model.clone().with_partitions(1, 1),
            &net,
            throughput,
            &sweep,
        )?,
    }];
    for &p in &sec.partitions {
        let cfg = model.clone().with_partitions(p, 1);
        out.push(LatencySeries {
            strategy: Strategy::Voltage,
            n_partitions: p,
            landmarks: None,
            points: latency_curve(Strategy::Voltage, &cfg, &net, throughput, &sweep)?,
        });
        for &l in &sec.landmarks {
            let l = Compression::Landmarks(l).landmarks(model.n_tokens, p)?;
            let cfg = model.clone().with_partitions(p, l);
            out.push(LatencySeries {
                strategy: Strategy::Prism,
                n_partitions: p,
                landmarks: Some(l),
                points: latency_curve(Strategy::Prism, &cfg, &net, throughput, &sweep)?,
            });
        }
    }
    Ok(out)
}

pub const LATENCY_HEADER: [&str; 6] = ["series", "strategy", "P", "L", "bandwidth_mbps", "latency_ms"];

pub fn latency_csv(series: &[LatencySeries]) -> Result<String, Error> {
    let rows = series.iter().flat_map(|s| {
        s.points.iter().map(move |&(bw, t)| {
            vec![
                s.label(),
                s.strategy.to_string(),
                s.n_partitions.to_string(),
                opt(s.landmarks, |l| l.to_string()),
                format!("{:.3}", bw / 1e6),
                format!("{:.6}", t * 1e3),
            ]
        })
    });
    to_csv(&LATENCY_HEADER, rows)
}

fn to_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}
