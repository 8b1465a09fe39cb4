//! Experiment harness behind the `convldp` binary.

pub mod config;

use config::ExperimentConfig;
use convldp::arch::{growth_probe, validate_arch};
use convldp::io::{chain_rate_to_json, chain_to_json, matrix_to_json, rate_to_json, to_hex};
use convldp::kernel::{
    chain_network_sample, forward_network_sample, input_kernel, limit_chain, simulate_chain, LimitOptions,
};
use convldp::ldp::{empirical_rate, rate_chain, rate_layer, rate_marginal, Direction, Event, Statistic};
use convldp::posterior::{laziness, posterior_expectation, posterior_weights};
use convldp::stats::{chi_square_log_sf, energy_test, ks_test, normal_cdf, Z99};
use convldp::{ArchSpec, Error, ExtractorKind, KernelChain, Observations, PsdMatrix, Result, RngStream};
use rayon::prelude::*;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{preset, PRESETS};

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "CONVLDP_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Validate,
    ChainSim,
    Limit,
    CltCheck,
    Rate,
    RateChain,
    LdpVerify,
    Posterior,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::ChainSim => "chain-sim",
            Command::Limit => "limit",
            Command::CltCheck => "clt-check",
            Command::Rate => "rate",
            Command::RateChain => "rate-chain",
            Command::LdpVerify => "ldp-verify",
            Command::Posterior => "posterior",
        }
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// 0 success, 1 constraint violation, 2 I/O or parse error.
    pub code: i32,
    pub dir: PathBuf,
    pub summary: String,
}

/// `--out`, then `$CONVLDP_OUT`, then the config, then `convldp-out`.
pub fn output_root(opts: &RunOptions, cfg: &ExperimentConfig) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("convldp-out"))
}

/// Runs one command and writes its artifacts to `<root>/<command>/`.
pub fn run(command: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> RunOutcome {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let dir = output_root(opts, &cfg).join(command.name());
    let start = Instant::now();
    let result = match opts.workers {
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(command, &cfg, &dir)),
            Err(e) => Err(Error::InvalidArgument(format!("cannot start {k} workers: {e}"))),
        },
        None => dispatch(command, &cfg, &dir),
    };
    let (code, mut art) = match result {
        Ok(art) => (art.code, art),
        Err(e) => {
            let mut art = Artifacts::new(&dir);
            art.note(format!("error: {e}"));
            (2, art)
        }
    };
    let workers = opts.workers.unwrap_or_else(rayon::current_num_threads);
    if let Err(e) = art.finish(command, &cfg, code, start.elapsed().as_secs_f64(), workers) {
        return RunOutcome {
            code: 2,
            dir,
            summary: format!("error: cannot write artifacts: {e}"),
        };
    }
    RunOutcome {
        code,
        dir,
        summary: art.summary.join("\n"),
    }
}

struct Artifacts {
    dir: PathBuf,
    outputs: Vec<Value>,
    summary: Vec<String>,
    code: i32,
}

impl Artifacts {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            outputs: vec![],
            summary: vec![],
            code: 0,
        }
    }

    fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }

    /// Writes `bytes` to `file`, recording the sample sizes and streams
    /// behind it.
    fn write(&mut self, file: &str, bytes: &[u8], samples: Value, streams: &[&RngStream]) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.dir.join(file), bytes)?;
        self.outputs.push(json!({
            "file": file,
            "samples": samples,
            "streams": streams.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        }));
        Ok(())
    }

    fn json(&mut self, file: &str, v: &Value, samples: Value, streams: &[&RngStream]) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        self.write(file, text.as_bytes(), samples, streams)
    }

    fn csv(&mut self, file: &str, header: &[&str], rows: &[Vec<String>], samples: Value, streams: &[&RngStream]) -> Result<()> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(file, &bytes, samples, streams)
    }

    fn finish(&mut self, command: Command, cfg: &ExperimentConfig, code: i32, wall: f64, workers: usize) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let manifest = json!({
            "command": command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": serde_json::to_value(cfg)?,
            "outputs": self.outputs,
            "exit_code": code,
            "wall_time_seconds": wall,
            "workers": workers,
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let mut text = self.summary.join("\n");
        text.push('\n');
        std::fs::write(self.dir.join("summary.txt"), text)?;
        Ok(())
    }
}

fn dispatch(command: Command, cfg: &ExperimentConfig, dir: &Path) -> Result<Artifacts> {
    let mut art = Artifacts::new(dir);
    let spec = cfg.arch()?;
    let report = validate_arch(&spec);
    if !report.passed() {
        art.write("validate.txt", format!("{report}").as_bytes(), json!({}), &[])?;
        art.note(format!("invalid architecture:\n{report}"));
        art.code = 1;
        return Ok(art);
    }
    let root = RngStream::new(cfg.seed).split_named(command.name());
    let ctx = Ctx {
        cfg,
        spec: &spec,
        root: &root,
    };
    match command {
        Command::Validate => ctx.validate(&mut art, &report)?,
        Command::ChainSim => ctx.chain_sim(&mut art)?,
        Command::Limit => ctx.limit(&mut art)?,
        Command::CltCheck => ctx.clt_check(&mut art)?,
        Command::Rate => ctx.rate(&mut art)?,
        Command::RateChain => ctx.rate_chain(&mut art)?,
        Command::LdpVerify => ctx.ldp_verify(&mut art)?,
        Command::Posterior => ctx.posterior(&mut art)?,
    }
    Ok(art)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a ArchSpec,
    root: &'a RngStream,
}

fn num(x: f64) -> String {
    x.to_string()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

impl Ctx<'_> {
    fn k1(&self) -> Result<PsdMatrix> {
        input_kernel(self.spec, &self.cfg.input_batch(self.spec)?)
    }

    fn limit_opts(&self) -> LimitOptions {
        LimitOptions {
            samples: self.cfg.limit.samples,
            antithetic: self.cfg.limit.antithetic,
        }
    }

    /// Shared by every command, so they all standardize against the same
    /// limit chain.
    fn limit_stream(&self) -> RngStream {
        RngStream::new(self.cfg.seed).split_named("limit")
    }

    fn limit_chain(&self, k1: &PsdMatrix) -> Result<KernelChain> {
        limit_chain(self.spec, k1, self.limit_opts(), &self.limit_stream())
    }

    fn limit_samples(&self) -> Value {
        json!({ "limit": self.cfg.limit.samples })
    }

    fn validate(&self, art: &mut Artifacts, report: &convldp::arch::ValidationReport) -> Result<()> {
        art.write("validate.txt", format!("{report}\n").as_bytes(), json!({}), &[])?;
        let probe = &self.spec.probe;
        let mut rows = vec![];
        for layer in 1..=self.spec.hidden_layers {
            let s = self.root.split_named("growth").split(layer as u64);
            let g = growth_probe(self.spec, layer, probe.samples, &probe.radii, &s)?;
            rows.push(vec![layer.to_string(), num(g.order), g.flagged.to_string()]);
        }
        let s = self.root.split_named("growth");
        art.csv("growth.csv", &["layer", "order", "flagged"], &rows, json!({ "directions": probe.samples }), &[&s])?;
        art.note(format!("{report}"));
        Ok(())
    }

    fn chain_sim(&self, art: &mut Artifacts) -> Result<()> {
        let k1 = self.k1()?;
        let limit = self.limit_chain(&k1)?;
        let l = self.spec.hidden_layers;
        let reps = self.cfg.chain.replicas;
        let cs = self.root.split_named("chain");
        let mut rows = vec![];
        let mut lln = vec![];
        let mut first = None;
        for &n in &self.cfg.chain.n {
            let chains: Vec<KernelChain> = (0..reps)
                .into_par_iter()
                .map(|r| simulate_chain(self.spec, &k1, n, &cs.split(n as u64).split(r as u64)))
                .collect::<Result<_>>()?;
            let mut out_err = Vec::with_capacity(reps);
            for (r, c) in chains.iter().enumerate() {
                for layer in 2..=l + 1 {
                    let e = c.layer(layer).frobenius_distance(limit.layer(layer));
                    rows.push(vec![n.to_string(), r.to_string(), layer.to_string(), num(e)]);
                    if layer == l + 1 {
                        out_err.push(e);
                    }
                }
            }
            lln.push((n, median(&mut out_err)));
            if first.is_none() {
                first = chains.into_iter().next();
            }
        }
        let samples = json!({ "replicas": reps, "n": self.cfg.chain.n, "limit": self.cfg.limit.samples });
        let ls = self.limit_stream();
        art.csv("chain_sim.csv", &["n", "replica", "layer", "frobenius_error"], &rows, samples.clone(), &[&cs, &ls])?;
        let mut lrows = vec![];
        for (i, &(n, m)) in lln.iter().enumerate() {
            let ratio = if i == 0 { String::new() } else { num(lln[i - 1].1 / m) };
            art.note(format!("n={n}: median output error {m:.5}{}", if i == 0 { String::new() } else { format!(", shrink factor {ratio}") }));
            lrows.push(vec![n.to_string(), num(m), ratio]);
        }
        art.csv("lln.csv", &["n", "median_error", "shrink_factor"], &lrows, samples, &[&cs, &ls])?;
        if let Some(c) = first {
            art.json("first_chain.json", &chain_to_json(&c), json!({ "n": self.cfg.chain.n[0] }), &[&cs.split(self.cfg.chain.n[0] as u64).split(0)])?;
        }
        art.json("limit.json", &chain_to_json(&limit), self.limit_samples(), &[&ls])?;
        Ok(())
    }

    fn limit(&self, art: &mut Artifacts) -> Result<()> {
        let k1 = self.k1()?;
        let limit = self.limit_chain(&k1)?;
        let ls = self.limit_stream();
        let mut rows = vec![];
        for (i, k) in limit.kernels.iter().enumerate() {
            let se = limit.standard_errors.as_ref().map(|s| &s[i]);
            let m = k.matrix();
            for a in 0..m.nrows() {
                for b in 0..m.ncols() {
                    let e = se.map_or(0.0, |s| s[(a, b)]);
                    rows.push(vec![(i + 1).to_string(), a.to_string(), b.to_string(), num(m[(a, b)]), to_hex(m[(a, b)]), num(e)]);
                }
            }
        }
        art.json("limit.json", &chain_to_json(&limit), self.limit_samples(), &[&ls])?;
        art.csv("limit.csv", &["layer", "row", "col", "value", "value_hex", "standard_error"], &rows, self.limit_samples(), &[&ls])?;
        art.note(format!("limit chain of {} kernels from {} samples per layer", limit.kernels.len(), self.cfg.limit.samples));
        Ok(())
    }

    fn clt_check(&self, art: &mut Artifacts) -> Result<()> {
        let clt = &self.cfg.clt;
        let k1 = self.k1()?;
        let batch = self.cfg.input_batch(self.spec)?;
        let limit = self.limit_chain(&k1)?;
        let kout = limit.last().matrix();
        let d = kout.nrows();
        let chain_s = self.root.split_named("chain");
        let draw_chain = |n: usize| -> Result<Vec<f64>> {
            let s = chain_s.split(n as u64);
            let rows: Vec<Vec<f64>> = (0..clt.replicas)
                .into_par_iter()
                .map(|r| chain_network_sample(self.spec, &k1, n, 1, &s.split(r as u64)).map(|m| m.row(0).iter().copied().collect()))
                .collect::<Result<_>>()?;
            Ok(rows.concat())
        };
        let chain = draw_chain(clt.n)?;

        let mut ks_rows = vec![];
        let mut ks_pass = true;
        let mut min_p = f64::INFINITY;
        for j in 0..d {
            let var = kout[(j, j)];
            if var <= 1e-12 {
                ks_rows.push(vec![j.to_string(), num(var), String::new(), String::new(), String::new()]);
                continue;
            }
            let xs: Vec<f64> = chain.chunks(d).map(|row| row[j] / var.sqrt()).collect();
            let t = ks_test(&xs, normal_cdf);
            let adj = (t.p_value * d as f64).min(1.0);
            ks_pass &= adj >= clt.level;
            min_p = min_p.min(adj);
            ks_rows.push(vec![j.to_string(), num(var), num(t.statistic), num(t.p_value), num(adj)]);
        }
        let ks_samples = json!({ "n": clt.n, "replicas": clt.replicas, "limit": self.cfg.limit.samples });
        art.csv(
            "clt_ks.csv",
            &["coordinate", "limit_variance", "ks_statistic", "p_value", "bonferroni_p"],
            &ks_rows,
            ks_samples,
            &[&chain_s.split(clt.n as u64), &self.limit_stream()],
        )?;

        let fwd_n = clt.forward_n.unwrap_or(clt.n);
        let fwd_s = self.root.split_named("forward").split(fwd_n as u64);
        let forward: Vec<Vec<f64>> = (0..clt.replicas)
            .into_par_iter()
            .map(|r| forward_network_sample(self.spec, &batch, fwd_n, 1, &fwd_s.split(r as u64)).map(|m| m.row(0).iter().copied().collect()))
            .collect::<Result<_>>()?;
        let forward = forward.concat();
        let paired = if fwd_n == clt.n { chain.clone() } else { draw_chain(fwd_n)? };
        let es = self.root.split_named("energy");
        let energy = energy_test(&forward, &paired, d, clt.permutations, &es);
        let energy_pass = energy.p_value >= clt.level;
        let v = json!({
            "n": clt.n,
            "forward_n": fwd_n,
            "replicas": clt.replicas,
            "level": clt.level,
            "ks_pass": ks_pass,
            "ks_min_bonferroni_p": if min_p.is_finite() { json!(min_p) } else { Value::Null },
            "energy": {
                "statistic": energy.statistic,
                "p_value": energy.p_value,
                "permutations": energy.permutations,
            },
            "energy_pass": energy_pass,
        });
        art.json(
            "clt.json",
            &v,
            json!({ "n": clt.n, "forward_n": fwd_n, "replicas": clt.replicas, "permutations": clt.permutations }),
            &[&chain_s, &fwd_s, &es],
        )?;
        art.note(format!("KS on {d} standardized coordinates at n={}: {}", clt.n, if ks_pass { "pass" } else { "fail" }));
        art.note(format!(
            "energy test forward vs chain at n={fwd_n}: p={:.4} ({})",
            energy.p_value,
            if energy_pass { "pass" } else { "fail" }
        ));
        Ok(())
    }

    fn rate(&self, art: &mut Artifacts) -> Result<()> {
        let rc = &self.cfg.rate;
        let l = self.spec.hidden_layers;
        if rc.layer == 0 || rc.layer > l {
            return Err(Error::InvalidArgument(format!("rate layer must lie in 1..={l}, got {}", rc.layer)));
        }
        let k1 = self.k1()?;
        let limit = self.limit_chain(&k1)?;
        let q1 = limit.layer(rc.layer);
        let rs = self.root.split_named("rate");
        let mut rows = vec![];
        let mut results = vec![];
        for &s in &rc.scales {
            let q2 = limit.layer(rc.layer + 1).scaled(s)?;
            let r = rate_layer(self.spec, rc.layer, &q2, q1, &rc.options, &rs)?;
            art.note(format!("scale {s}: I = {:.6}{}", r.value, if r.converged { "" } else { " (not converged)" }));
            rows.push(vec![
                num(s),
                num(r.value),
                to_hex(r.value),
                r.iterations.to_string(),
                num(r.grad_norm),
                r.converged.to_string(),
                r.domain_limited.to_string(),
                num(r.ess),
                r.samples.to_string(),
            ]);
            let mut j = rate_to_json(&r);
            j["scale"] = json!(s);
            results.push(j);
        }
        let samples = json!({ "rate": rc.options.samples, "limit": self.cfg.limit.samples });
        let ls = self.limit_stream();
        art.csv(
            "rate.csv",
            &["scale", "value", "value_hex", "iterations", "grad_norm", "converged", "domain_limited", "ess", "samples"],
            &rows,
            samples.clone(),
            &[&rs, &ls],
        )?;
        art.json("rate.json", &json!({ "layer": rc.layer, "results": results }), samples, &[&rs, &ls])?;
        Ok(())
    }

    fn rate_chain(&self, art: &mut Artifacts) -> Result<()> {
        let rc = &self.cfg.rate_chain;
        let l = self.spec.hidden_layers;
        let scales = if rc.scales.is_empty() { vec![1.0; l] } else { rc.scales.clone() };
        if scales.len() != l {
            return Err(Error::InvalidArgument(format!("rate_chain.scales needs {l} entries, got {}", scales.len())));
        }
        let k1 = self.k1()?;
        let limit = self.limit_chain(&k1)?;
        let values = (0..l)
            .map(|i| limit.layer(i + 2).scaled(scales[i]))
            .collect::<Result<Vec<_>>>()?;
        let rs = self.root.split_named("rate");
        let r = rate_chain(self.spec, &values, &k1, &rc.options, &rs)?;
        let rows: Vec<Vec<String>> = r
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                vec![
                    (i + 1).to_string(),
                    num(scales[i]),
                    num(self.spec.channel_slopes[i]),
                    num(t.value),
                    to_hex(t.value),
                    t.converged.to_string(),
                    t.domain_limited.to_string(),
                ]
            })
            .collect();
        let samples = json!({ "rate": rc.options.samples, "limit": self.cfg.limit.samples });
        let ls = self.limit_stream();
        art.csv(
            "rate_chain.csv",
            &["layer", "scale", "slope", "value", "value_hex", "converged", "domain_limited"],
            &rows,
            samples.clone(),
            &[&rs, &ls],
        )?;
        let mut v = chain_rate_to_json(&r);
        if let Some(grid) = &rc.marginal {
            let ms = self.root.split_named("marginal");
            let m = rate_marginal(self.spec, values.last().unwrap(), &k1, &rc.options, grid, &ms)?;
            v["marginal"] = json!({
                "value": m.value,
                "value_hex": to_hex(m.value),
                "lower": m.lower,
                "upper": m.upper,
                "converged": m.converged,
                "evaluations": m.evaluations,
                "domain_limited": m.domain_limited,
                "intermediates": m.intermediates.iter().map(|q| matrix_to_json(q.matrix())).collect::<Vec<_>>(),
            });
            art.note(format!("output marginal rate {:.6}", m.value));
        }
        art.json("rate_chain.json", &v, samples, &[&rs, &ls])?;
        art.note(format!("chain rate {:.6}{}", r.total, if r.domain_limited { " (domain limited)" } else { "" }));
        Ok(())
    }

    /// `K^{(2,n)} = (K¹/λ₁) χ²_C / C` for a scalar identity-activation FCNN.
    fn chi_square_oracle(&self, k1: &PsdMatrix, event: &Event) -> Option<impl Fn(usize) -> f64 + '_> {
        let s = self.spec;
        let fc = s.layers.iter().all(|l| l.extractor == ExtractorKind::FullyConnected);
        let scalar = s.hidden_layers == 1
            && fc
            && s.dim(1) == 1
            && s.activation == convldp::Activation::Identity
            && event.layer == 2
            && matches!(event.statistic, Statistic::Entry { .. })
            && event.direction == Direction::AtLeast;
        let k = k1.matrix()[(0, 0)];
        (scalar && k > 0.0).then(move || {
            let lambda = s.layers[1].precision;
            let level = event.level;
            move |n: usize| {
                let c = s.channels(1, n) as f64;
                -chi_square_log_sf(c, level * lambda * c / k) / n as f64
            }
        })
    }

    fn ldp_verify(&self, art: &mut Artifacts) -> Result<()> {
        let ldp = self
            .cfg
            .ldp
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("ldp-verify needs an [ldp] section".into()))?;
        let l = self.spec.hidden_layers;
        if ldp.event.layer < 2 || ldp.event.layer > l + 1 {
            return Err(Error::InvalidArgument(format!("event layer must lie in 2..={}, got {}", l + 1, ldp.event.layer)));
        }
        let k1 = self.k1()?;
        let limit = self.limit_chain(&k1)?;
        let event = ldp.event.resolve(limit.layer(ldp.event.layer));
        let es = self.root.split_named("empirical");
        let rows = empirical_rate(self.spec, &k1, &event, &ldp.n, ldp.replicas, &es)?;

        // single-step scalar events have the predicted rate α₁ I₁(level | K¹)
        let rs = self.root.split_named("rate");
        let predicted = if event.layer == 2 && limit.layer(2).dim() == 1 {
            let mean = limit.layer(2).matrix()[(0, 0)];
            let beyond = match event.direction {
                Direction::AtLeast => event.level > mean,
                Direction::AtMost => event.level < mean,
            };
            if beyond && event.level > 0.0 {
                let q = PsdMatrix::new(convldp::Mat::from_element(1, 1, event.level), self.spec.inputs)?;
                let r = rate_layer(self.spec, 1, &q, &k1, &Default::default(), &rs)?;
                Some(self.spec.channel_slopes[0] * r.value)
            } else {
                Some(0.0)
            }
        } else {
            None
        };
        let oracle = self.chi_square_oracle(&k1, &event);
        let opt = |v: Option<f64>| v.map_or_else(String::new, num);
        let mut table = vec![];
        let mut covered_all = true;
        for r in &rows {
            let exact = oracle.as_ref().map(|f| f(r.n));
            let covered = exact.map(|e| r.rate_low <= e && e <= r.rate_high);
            covered_all &= covered.unwrap_or(true);
            let gap = predicted.map(|p| (r.rate - p).abs());
            art.note(format!(
                "n={}: rate {:.5} [{:.5}, {:.5}]{}{}{}",
                r.n,
                r.rate,
                r.rate_low,
                r.rate_high,
                exact.map_or(String::new(), |e| format!(", exact {e:.5}")),
                gap.map_or(String::new(), |g| format!(", gap {g:.5}")),
                if r.undersampled { " (undersampled)" } else { "" },
            ));
            table.push(vec![
                r.n.to_string(),
                r.replicas.to_string(),
                r.hits.to_string(),
                num(r.probability),
                num(r.rate),
                num(r.rate_low),
                num(r.rate_high),
                r.undersampled.to_string(),
                opt(exact),
                covered.map_or_else(String::new, |c| c.to_string()),
                opt(predicted),
                opt(gap),
            ]);
        }
        let samples = json!({ "replicas": ldp.replicas, "n": ldp.n, "limit": self.cfg.limit.samples, "confidence_z": Z99 });
        art.csv(
            "ldp.csv",
            &[
                "n",
                "replicas",
                "hits",
                "probability",
                "rate",
                "rate_low",
                "rate_high",
                "undersampled",
                "exact_rate",
                "covered",
                "predicted_rate",
                "gap",
            ],
            &table,
            samples.clone(),
            &[&es, &rs, &self.limit_stream()],
        )?;
        art.json(
            "ldp.json",
            &json!({ "event": serde_json::to_value(event)?, "predicted_rate": predicted, "oracle_covered": oracle.is_some().then_some(covered_all) }),
            samples,
            &[&es, &rs],
        )?;
        Ok(())
    }

    fn observations(&self) -> Result<Observations> {
        let post = self.cfg.posterior.as_ref().expect("checked by caller");
        let l = self.spec.hidden_layers;
        let (c, d) = (self.spec.output_channels, self.spec.dim(l + 1));
        match (&post.observations, &post.observation_file) {
            (Some(y), None) => Observations::new(y.clone(), c, d, post.beta),
            (None, Some(f)) => convldp::io::read_observations(
                std::fs::File::open(f)?,
                self.spec.inputs,
                c,
                self.spec.spatial[l + 1],
                post.beta,
            ),
            _ => Err(Error::Parse("give exactly one of `observations` or `observation_file`".into())),
        }
    }

    fn posterior(&self, art: &mut Artifacts) -> Result<()> {
        let post = self
            .cfg
            .posterior
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("posterior needs a [posterior] section".into()))?;
        let l = self.spec.hidden_layers;
        if post.event.layer != l + 1 {
            return Err(Error::InvalidArgument(format!("posterior event must be on layer {}, got {}", l + 1, post.event.layer)));
        }
        let y = self.observations()?;
        let k1 = self.k1()?;
        let limit = self.limit_chain(&k1)?;
        let ps = self.root.split_named("prior").split(post.n as u64);
        let ks: Vec<PsdMatrix> = (0..post.samples)
            .into_par_iter()
            .map(|r| simulate_chain(self.spec, &k1, post.n, &ps.split(r as u64)).map(|c| c.last().clone()))
            .collect::<Result<_>>()?;
        let w = posterior_weights(&ks, &y)?;
        let uniform = vec![1.0 / ks.len() as f64; ks.len()];
        let trace = |k: &PsdMatrix| k.matrix().trace();
        let frob = |k: &PsdMatrix| k.matrix().norm();
        let post_tr = posterior_expectation(trace, &ks, &w)?;
        let prior_tr = posterior_expectation(trace, &ks, &uniform)?;
        let post_fr = posterior_expectation(frob, &ks, &w)?;
        let prior_fr = posterior_expectation(frob, &ks, &uniform)?;
        let v = json!({
            "n": post.n,
            "samples": post.samples,
            "beta": post.beta,
            "ess": post_tr.ess,
            "prior_trace": prior_tr.value,
            "posterior_trace": post_tr.value,
            "prior_frobenius": prior_fr.value,
            "posterior_frobenius": post_fr.value,
            "limit_trace": limit.last().matrix().trace(),
        });
        art.json("posterior.json", &v, json!({ "samples": post.samples, "n": post.n, "limit": self.cfg.limit.samples }), &[&ps])?;
        art.note(format!(
            "n={}: posterior E[tr K] {:.5} vs prior {:.5} (ess {:.1})",
            post.n, post_tr.value, prior_tr.value, post_tr.ess
        ));

        let event = post.event.resolve(limit.last());
        let lz = self.root.split_named("laziness");
        let rows = laziness(self.spec, &k1, &y, |k| event.contains(k), &post.laziness_n, post.samples, &lz)?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.n.to_string(), r.samples.to_string(), num(r.prior), num(r.posterior), num(r.ratio), num(r.psi_max)])
            .collect();
        for r in &rows {
            art.note(format!("laziness n={}: ratio {:.6}", r.n, r.ratio));
        }
        art.csv(
            "laziness.csv",
            &["n", "samples", "prior_mass", "posterior_mass", "ratio", "psi_max"],
            &table,
            json!({ "samples": post.samples, "n": post.laziness_n }),
            &[&lz],
        )?;
        Ok(())
    }
}
