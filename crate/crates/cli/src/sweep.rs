//! `sweep-comm` and `sweep-io`: traffic grids with CSV, SVG and trend checks.

use latentmoe::experts::{build_cluster_plan, experts_blocksparse, experts_naive, ExpertBank};
use latentmoe::memory::{write_ledger_csv, Arena, TierConfig, TrafficLedger, LEDGER_CSV_HEADER};
use latentmoe::parallel::{ep_traffic, hp_traffic, zipf_assign, CommReport, SkewModel, WorkerGroup, COMM_CSV_HEADER};
use latentmoe::router::{route_ioaware_fwd, route_naive, RouteBlocks, RouterParams, NAIVE_GEMM_TILE};
use latentmoe::tensor::Tensor;
use latentmoe::Rng;

use crate::bundle::Bundle;
use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use crate::{Check, CliError};

fn sorted_usize(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn sorted_f64(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// EP and HP traffic reports for every `(k, skew)`, ordered by `k`, then
/// skew, then schedule.
pub fn comm_grid(cfg: &RunConfig) -> Result<Vec<CommReport>, CliError> {
    let m = &cfg.model;
    let par = &cfg.parallel;
    let n = m.tokens();
    let mut out = Vec::new();
    for k in sorted_usize(&cfg.sweep_comm.k_list) {
        for (si, skew) in sorted_f64(&cfg.sweep_comm.skew_list).into_iter().enumerate() {
            let mut rng = Rng::new(cfg.seed).fork(((k as u64) << 32) | si as u64);
            let idx = zipf_assign(&SkewModel::new(skew, m.n_experts, par.workers)?, n, k, &mut rng)?;
            let ep = ep_traffic(&mut WorkerGroup::new(par.workers, par.word_size)?, &idx, k, m.n_experts, m.d, skew)?
                .with_latency(par.bandwidth, par.alpha)?;
            let mut hp = hp_traffic(&mut WorkerGroup::new(par.workers, par.word_size)?, n, m.n_heads, m.d_h, k)?
                .with_latency(par.bandwidth, par.alpha)?;
            hp.skew = skew;
            out.push(ep);
            out.push(hp);
        }
    }
    Ok(out)
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

/// Trend checks over a comm grid.
pub fn comm_checks(cfg: &RunConfig, reports: &[CommReport]) -> Vec<Check> {
    let seed = cfg.seed;
    let p = cfg.parallel.workers;
    let mut checks = Vec::new();
    fn of<'a>(reports: &'a [CommReport], sched: &'static str) -> impl Iterator<Item = &'a CommReport> + 'a {
        reports.iter().filter(move |r| r.schedule == sched)
    }
    for (ep, hp) in of(reports, "EP").zip(of(reports, "HP")) {
        checks.push(Check::holds(
            "comm",
            &format!("ep_over_hp_dispatch_eq_k_k{}_s{}", ep.k, ep.skew),
            seed,
            ep.dispatch_bytes() == ep.k as u64 * hp.dispatch_bytes(),
        ));
    }
    if let Some(first) = of(reports, "HP").next() {
        let bytes = |r: &CommReport| r.workers.iter().map(|w| (w.bytes_sent, w.bytes_received)).collect::<Vec<_>>();
        checks.push(Check::holds("comm", "hp_bytes_constant", seed, of(reports, "HP").all(|r| bytes(r) == bytes(first))));
        let lat = first.latency_proxy.to_bits();
        checks.push(Check::holds("comm", "hp_latency_flat", seed, of(reports, "HP").all(|r| r.latency_proxy.to_bits() == lat)));
    }
    if p == 1 {
        let zero = reports.iter().all(|r| r.workers.iter().all(|w| w.bytes_sent == 0 && w.bytes_received == 0));
        checks.push(Check::holds("comm", "single_worker_no_traffic", seed, zero));
        return checks;
    }
    let ks = sorted_usize(&cfg.sweep_comm.k_list);
    let skews = sorted_f64(&cfg.sweep_comm.skew_list);
    let ep_lat = |k: usize, s: f64| of(reports, "EP").find(|r| r.k == k && r.skew == s).map(|r| r.latency_proxy).unwrap_or(f64::NAN);
    if skews.len() > 1 {
        for &k in &ks {
            let v: Vec<f64> = skews.iter().map(|&s| ep_lat(k, s)).collect();
            checks.push(Check::holds("comm", &format!("ep_latency_increasing_in_skew_k{k}"), seed, strictly_increasing(&v)));
        }
    }
    if ks.len() > 1 {
        for &s in &skews {
            let v: Vec<f64> = ks.iter().map(|&k| ep_lat(k, s)).collect();
            checks.push(Check::holds("comm", &format!("ep_latency_increasing_in_k_s{s}"), seed, strictly_increasing(&v)));
        }
    }
    checks
}

pub fn sweep_comm(cfg: &RunConfig, bundle: &mut Bundle) -> Result<Vec<Check>, CliError> {
    let reports = comm_grid(cfg)?;
    let header: Vec<&str> = COMM_CSV_HEADER.split(',').collect();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|r| r.csv_rows(None))
        .map(|line| line.split(',').map(str::to_string).collect())
        .collect();
    bundle.write_csv("comm.csv", &header, &rows)?;

    let mut latency = Vec::new();
    let mut payload = Vec::new();
    for sched in ["EP", "HP"] {
        for k in sorted_usize(&cfg.sweep_comm.k_list) {
            let pts: Vec<&CommReport> = reports.iter().filter(|r| r.schedule == sched && r.k == k).collect();
            latency.push(Series::new(format!("{sched} k={k}"), pts.iter().map(|r| (r.skew, r.latency_proxy)).collect()));
            payload.push(Series::new(
                format!("{sched} k={k}"),
                pts.iter().map(|r| (r.skew, r.peak_payload_words() as f64)).collect(),
            ));
        }
    }
    bundle.write_text("comm_latency.svg", &line_chart("Latency proxy vs Zipf skew", "skew", "latency proxy", &latency))?;
    bundle.write_text("comm_payload.svg", &line_chart("Peak payload vs Zipf skew", "skew", "peak payload words", &payload))?;
    Ok(comm_checks(cfg, &reports))
}

/// One routing or expert-computation measurement of `sweep-io`.
#[derive(Clone, Debug, PartialEq)]
pub struct IoPoint {
    pub sweep: &'static str,
    pub path: &'static str,
    pub n_experts: usize,
    pub d_e: usize,
    pub ledger: TrafficLedger,
}

pub const IO_SUMMARY_HEADER: [&str; 9] = [
    "sweep",
    "path",
    "n_experts",
    "d_e",
    "hbm_words_read",
    "hbm_words_written",
    "activation_words",
    "activation_peak_words",
    "sram_peak_words",
];

impl IoPoint {
    fn row(&self) -> Vec<String> {
        let l = &self.ledger;
        vec![
            self.sweep.to_string(),
            self.path.to_string(),
            self.n_experts.to_string(),
            self.d_e.to_string(),
            l.hbm_words_read.to_string(),
            l.hbm_words_written.to_string(),
            l.intermediate_traffic().to_string(),
            l.hbm_intermediate_peak_words.to_string(),
            l.sram_peak_words.to_string(),
        ]
    }
}

/// Routing ledgers over `ne_list` and expert ledgers over `de_list`.
pub fn io_grid(cfg: &RunConfig) -> Result<Vec<IoPoint>, CliError> {
    let m = &cfg.model;
    let s = &cfg.sweep_io;
    let tier = TierConfig::with_capacity(s.sram_words)?;
    let mut out = Vec::new();
    let mut rng = Rng::new(cfg.seed).fork(30);
    let x: Tensor<f32> = rng.normal_tensor(&[1, s.tokens, m.n_heads, m.d_h], 1.0);
    for ne in sorted_usize(&s.ne_list) {
        let mut prng = Rng::new(cfg.seed).fork(31 + ne as u64);
        let p: RouterParams<f32> = RouterParams::init(&mut prng, m.n_heads, m.d_h, ne, 1.0 / (m.d_h as f64).sqrt());
        let mut a = Arena::new(tier, format!("route_naive/n_experts={ne}"));
        route_naive(&x, &p, m.k, &mut a)?;
        out.push(IoPoint { sweep: "routing", path: "naive", n_experts: ne, d_e: m.d_e, ledger: a.into_ledger() });
        let mut a = Arena::new(tier, format!("route_io_aware/n_experts={ne}"));
        route_ioaware_fwd(&x, &p, m.k, RouteBlocks { block_n: s.block_n, block_m: s.block_m }, &mut a)?;
        out.push(IoPoint { sweep: "routing", path: "io-aware", n_experts: ne, d_e: m.d_e, ledger: a.into_ledger() });
    }
    let ne = m.n_experts;
    let idx = zipf_assign(&SkewModel::new(0.0, ne, 1)?, s.tokens, m.k, &mut rng)?;
    let plan = build_cluster_plan(&idx, m.k, ne)?;
    let xt: Vec<f32> = rng.normal_vec(s.tokens * m.d_h, 1.0);
    let xc = Tensor::from_vec(&[s.tokens * m.k, m.d_h], plan.permute_tokens(&xt, m.d_h))?;
    let tiles = cfg.exec().tiles;
    for de in sorted_usize(&s.de_list) {
        let mut brng = Rng::new(cfg.seed).fork(60 + de as u64);
        let bank: ExpertBank<f32> = ExpertBank::init(&mut brng, ne, de, m.d_h, 1.0 / (m.d_h as f64).sqrt());
        let mut a = Arena::new(tier, format!("experts_grouped/d_e={de}"));
        experts_naive(&xc, &plan, &bank, tiles, &mut a)?;
        out.push(IoPoint { sweep: "experts", path: "grouped", n_experts: ne, d_e: de, ledger: a.into_ledger() });
        let mut a = Arena::new(tier, format!("experts_block_sparse/d_e={de}"));
        experts_blocksparse(&xc, &plan, &bank, tiles, &mut a)?;
        out.push(IoPoint { sweep: "experts", path: "block-sparse", n_experts: ne, d_e: de, ledger: a.into_ledger() });
    }
    Ok(out)
}

/// Scaling checks for every doubling step present in the grid.
pub fn io_checks(cfg: &RunConfig, points: &[IoPoint]) -> Vec<Check> {
    let seed = cfg.seed;
    let mut checks = Vec::new();
    let find = |sweep: &str, path: &str, ne: usize, de: usize| {
        points.iter().find(|p| p.sweep == sweep && p.path == path && p.n_experts == ne && p.d_e == de).map(|p| &p.ledger)
    };
    let m = &cfg.model;
    let nes = sorted_usize(&cfg.sweep_io.ne_list);
    // Below one GEMM tile of experts the naive router's input reads do not
    // grow with N_e, so the doubling thresholds start at a full tile.
    for w in nes.windows(2).filter(|w| w[1] == 2 * w[0] && w[0] >= NAIVE_GEMM_TILE.max(m.k + 1)) {
        let ratio = |path: &str| {
            let a = find("routing", path, w[0], m.d_e).unwrap().hbm_words_read as f64;
            let b = find("routing", path, w[1], m.d_e).unwrap().hbm_words_read as f64;
            b / a
        };
        let naive = ratio("naive");
        let io = ratio("io-aware");
        checks.push(Check::holds("io", &format!("naive_read_ratio_ge_1.9_n_experts{}", w[1]), seed, naive >= 1.9));
        checks.push(Check::holds("io", &format!("io_aware_read_ratio_le_1.35_n_experts{}", w[1]), seed, io <= 1.35));
    }
    let des = sorted_usize(&cfg.sweep_io.de_list);
    for w in des.windows(2).filter(|w| w[1] == 2 * w[0]) {
        let ne = m.n_experts;
        let g0 = find("experts", "grouped", ne, w[0]).unwrap();
        let g1 = find("experts", "grouped", ne, w[1]).unwrap();
        let b0 = find("experts", "block-sparse", ne, w[0]).unwrap();
        let b1 = find("experts", "block-sparse", ne, w[1]).unwrap();
        let ratio = g1.intermediate_traffic() as f64 / g0.intermediate_traffic() as f64;
        checks.push(Check::holds("io", &format!("grouped_activation_ratio_ge_1.9_d_e{}", w[1]), seed, ratio >= 1.9));
        checks.push(Check::holds(
            "io",
            &format!("block_sparse_peak_constant_d_e{}", w[1]),
            seed,
            b0.hbm_intermediate_peak_words == b1.hbm_intermediate_peak_words,
        ));
    }
    checks
}

pub fn sweep_io(cfg: &RunConfig, bundle: &mut Bundle) -> Result<Vec<Check>, CliError> {
    let points = io_grid(cfg)?;
    let ledgers: Vec<TrafficLedger> = points.iter().map(|p| p.ledger.clone()).collect();
    let mut buf = Vec::new();
    write_ledger_csv(&mut buf, &ledgers)?;
    let rows: Vec<Vec<String>> = String::from_utf8_lossy(&buf)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let header: Vec<&str> = LEDGER_CSV_HEADER.split(',').collect();
    bundle.write_csv("ledger.csv", &header, &rows)?;
    bundle.write_csv("io_summary.csv", &IO_SUMMARY_HEADER, &points.iter().map(IoPoint::row).collect::<Vec<_>>())?;

    let series = |sweep: &str, path: &str, f: &dyn Fn(&IoPoint) -> (f64, f64)| {
        Series::new(path, points.iter().filter(|p| p.sweep == sweep && p.path == path).map(f).collect())
    };
    let routing = [
        series("routing", "naive", &|p| (p.n_experts as f64, p.ledger.hbm_words_read as f64)),
        series("routing", "io-aware", &|p| (p.n_experts as f64, p.ledger.hbm_words_read as f64)),
    ];
    bundle.write_text("io_routing.svg", &line_chart("Routing HBM reads", "experts N_e", "HBM words read", &routing))?;
    let experts = [
        series("experts", "grouped", &|p| (p.d_e as f64, p.ledger.hbm_intermediate_peak_words as f64)),
        series("experts", "block-sparse", &|p| (p.d_e as f64, p.ledger.hbm_intermediate_peak_words as f64)),
    ];
    bundle.write_text(
        "io_experts.svg",
        &line_chart("Expert activation footprint", "expert width d_e", "peak activation words", &experts),
    )?;
    Ok(io_checks(cfg, &points))
}
