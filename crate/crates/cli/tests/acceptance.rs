//! End-to-end acceptance suite. Each criterion prints one `pass`/`fail`
//! line; the process exits non-zero if any criterion fails.

use convldp::arch::{ExtractorKind, LayerSpec};
use convldp::gauss::generalized_q_norm;
use convldp::kernel::{limit_chain, limit_kernel_mc, LimitOptions};
use convldp::ldp::{log_mgf, output_rate, rate_chain, rate_layer, rate_marginal, safe_tilt_radius, LogValue, MarginalOptions, RateOptions};
use convldp::posterior::psi;
use convldp::{Activation, ArchSpec, Mat, Observations, PsdMatrix, RngStream, TiltMatrix};
use convldp_cli::{preset, run, Command, RunOptions, PRESETS};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fcnn(inputs: usize, act: Activation, precision: f64) -> ArchSpec {
    ArchSpec {
        hidden_layers: 1,
        inputs,
        input_channels: 1,
        output_channels: 1,
        spatial: vec![1, 1, 1],
        channel_slopes: vec![1.0],
        activation: act,
        input_mask_norm: Default::default(),
        probe: Default::default(),
        layers: vec![LayerSpec::new(ExtractorKind::FullyConnected, precision); 2],
    }
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    r.records()
        .map(|rec| header.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn f(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn run_preset(command: Command, name: &str, out: &Path) -> std::path::PathBuf {
    let cfg = preset(name).unwrap();
    let o = run(
        command,
        &cfg,
        &RunOptions {
            out: Some(out.to_path_buf()),
            ..Default::default()
        },
    );
    assert_eq!(o.code, 0, "{} on {name}: {}", command.name(), o.summary);
    o.dir
}

fn scalar_rate(q: f64) -> f64 {
    0.5 * (q - 1.0 - q.ln())
}

fn criterion_1() -> Outcome {
    let spec = fcnn(1, Activation::Identity, 1.0);
    let k1 = PsdMatrix::scalar(1.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for q in [0.25, 0.5, 1.5, 2.0, 4.0] {
        let q2 = PsdMatrix::scalar(q).unwrap();
        let r = rate_layer(&spec, 1, &q2, &k1, &RateOptions::default(), &RngStream::new(11)).unwrap();
        let exact = scalar_rate(q);
        let err = (r.value - exact).abs() / exact.max(1.0);
        ok &= err <= 0.02;
        worst = worst.max(err);
    }
    check(ok, format!("max relative error {worst:.2e} (bound 0.02)"))
}

fn criterion_2(out: &Path) -> Outcome {
    let dir = run_preset(Command::LdpVerify, "fcnn-scalar-identity", out);
    let rows = read_csv(&dir.join("ldp.csv"));
    let covered = rows.iter().all(|r| r["covered"] == "true");
    let gaps: Vec<f64> = rows.iter().map(|r| f(r, "gap")).collect();
    let shrinking = gaps.windows(2).all(|w| w[1] < w[0]);
    let predicted = f(&rows[0], "predicted_rate");
    let rate_ok = (predicted - scalar_rate(1.5)).abs() <= 0.02 * scalar_rate(1.5).max(1.0);
    check(
        covered && shrinking && rate_ok && rows.len() == 3,
        format!("intervals cover exact rate: {covered}; gaps {gaps:.4?}; predicted I = {predicted:.4}"),
    )
}

fn criterion_3(out: &Path) -> Outcome {
    let mut ok = true;
    let mut detail = vec![];
    for name in ["circular1d-relu", "zeropad2d-relu"] {
        let dir = run_preset(Command::ChainSim, name, &out.join(name));
        let rows = read_csv(&dir.join("lln.csv"));
        let factors: Vec<f64> = rows[1..].iter().map(|r| f(r, "shrink_factor")).collect();
        ok &= rows.len() == 3 && factors.iter().all(|x| (1.5..=2.7).contains(x));
        detail.push(format!("{name} factors {factors:.3?}"));
    }
    check(ok, detail.join("; "))
}

fn criterion_4(out: &Path) -> Outcome {
    let mut ok = true;
    let mut detail = vec![];
    for name in PRESETS {
        let dir = run_preset(Command::CltCheck, name, &out.join(name));
        let v = read_json(&dir.join("clt.json"));
        let ks = v["ks_pass"].as_bool().unwrap();
        let energy = v["energy_pass"].as_bool().unwrap();
        ok &= ks && energy;
        detail.push(format!(
            "{name} ks {} energy p={:.3}",
            if ks { "ok" } else { "FAIL" },
            v["energy"]["p_value"].as_f64().unwrap()
        ));
    }
    check(ok, detail.join("; "))
}

fn criterion_5() -> Outcome {
    let opts = LimitOptions {
        samples: 1_000_000,
        antithetic: false,
    };
    let (q1, q2, c) = (1.3f64, 0.8f64, 0.4f64);
    let k = PsdMatrix::new(Mat::from_row_slice(2, 2, &[q1, c, c, q2]), 2).unwrap();
    let relu = limit_kernel_mc(&fcnn(2, Activation::Relu, 1.0), 1, &k, opts, &RngStream::new(51)).unwrap();
    let theta = (c / (q1 * q2).sqrt()).acos();
    let pi = std::f64::consts::PI;
    let off = (q1 * q2).sqrt() / (2.0 * pi) * (theta.sin() + (pi - theta) * theta.cos());
    let exact = Mat::from_row_slice(2, 2, &[q1 / 2.0, off, off, q2 / 2.0]);
    let z_relu = (relu.kernel.matrix() - &exact).component_div(&relu.standard_error).abs().max();

    let lambda = 2.0;
    let id = limit_kernel_mc(&fcnn(2, Activation::Identity, lambda), 1, &k, opts, &RngStream::new(52)).unwrap();
    let z_id = (id.kernel.matrix() - k.matrix() / lambda).component_div(&id.standard_error).abs().max();
    check(
        z_relu <= 3.0 && z_id <= 3.0,
        format!("max |z| relu {z_relu:.2}, identity {z_id:.2} (bound 3)"),
    )
}

fn random_tilt(rng: &mut impl Rng, d: usize, norm: f64) -> TiltMatrix {
    let a = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = (&a + a.transpose()) * 0.5;
    let n = s.norm();
    TiltMatrix::new(s * (norm / n)).unwrap()
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut detail = vec![];
    let mut violations = 0;
    let mut pairs = 0;
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let spec = cfg.arch().unwrap();
        let l = spec.hidden_layers;
        let k1 = convldp::kernel::input_kernel(&spec, &cfg.input_batch(&spec).unwrap()).unwrap();
        let limit = limit_chain(&spec, &k1, LimitOptions { samples: 1_000_000, antithetic: false }, &RngStream::new(61)).unwrap();
        let r = rate_chain(&spec, &limit.kernels[1..], &k1, &RateOptions::default(), &RngStream::new(62)).unwrap();
        let nonneg = r.total >= 0.0 && r.terms.iter().all(|t| t.value >= 0.0);
        let small = r.total <= l as f64 * 2e-3;
        ok &= nonneg && small;
        detail.push(format!("{name} rate at limit {:.2e}", r.total));

        // midpoint convexity of the log-MGF on layer 1, with common random numbers
        let q1 = limit.layer(1);
        let d = limit.layer(2).dim();
        let radius = safe_tilt_radius(&spec, 1, q1, 4096, &RngStream::new(63)).unwrap();
        let radius = if radius.is_finite() { radius } else { 1.0 };
        let mut rng = RngStream::new(64).split_named(name).rng();
        let s = RngStream::new(65);
        for _ in 0..25 {
            let ra = rng.random::<f64>() * 0.9 * radius;
            let a = random_tilt(&mut rng, d, ra);
            let rb = rng.random::<f64>() * 0.9 * radius;
            let b = random_tilt(&mut rng, d, rb);
            let m = TiltMatrix::new((a.matrix() + b.matrix()) * 0.5).unwrap();
            let [ea, eb, em] = [&a, &b, &m].map(|t| log_mgf(&spec, 1, t, q1, 20_000, &s).unwrap());
            pairs += 1;
            if let (LogValue::Finite(va), LogValue::Finite(vb), LogValue::Finite(vm)) = (ea.log_value, eb.log_value, em.log_value) {
                let se = (em.standard_error.powi(2) + 0.25 * (ea.standard_error.powi(2) + eb.standard_error.powi(2))).sqrt();
                if vm > 0.5 * (va + vb) + 3.0 * se {
                    violations += 1;
                }
            } else if matches!(em.log_value, LogValue::Infinite) && ea.log_value.is_finite() && eb.log_value.is_finite() {
                violations += 1;
            }
        }
    }
    ok &= violations == 0;
    detail.push(format!("convexity violations {violations}/{pairs}"));
    check(ok, detail.join("; "))
}

fn random_psd(rng: &mut impl Rng, d: usize, rank: usize) -> Mat {
    let b = Mat::from_fn(d, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose()
}

fn criterion_7(out: &Path) -> Outcome {
    let y = Observations::new(vec![2.0], 1, 1, 1.0).unwrap();
    let closed = psi(&PsdMatrix::scalar(1.0).unwrap(), &y).unwrap();
    let scalar_err = (closed - (2.0 + 2f64.ln())).abs();

    let mut rng = RngStream::new(71).rng();
    let mut min_psi = f64::INFINITY;
    for _ in 0..1000 {
        let d = rng.random_range(1..=6);
        let rank = rng.random_range(0..=d);
        let c = rng.random_range(1..=3);
        let k = PsdMatrix::new(random_psd(&mut rng, d, rank), 1).unwrap();
        let yv = (0..c * d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let beta = 10f64.powf(rng.random_range(-2.0..2.0));
        min_psi = min_psi.min(psi(&k, &Observations::new(yv, c, d, beta).unwrap()).unwrap());
    }

    // channel blocks against the dense I_C ⊗ K form
    let (c, d, beta) = (3, 4, 0.8);
    let k = random_psd(&mut rng, d, 3);
    let yv: Vec<f64> = (0..c * d).map(|_| rng.sample(StandardNormal)).collect();
    let blocked = psi(&PsdMatrix::new(k.clone(), 1).unwrap(), &Observations::new(yv.clone(), c, d, beta).unwrap()).unwrap();
    let big = Mat::identity(c * d, c * d) + Mat::identity(c, c).kronecker(&k) * beta;
    let yy = nalgebra::DVector::from_vec(yv);
    let dense = beta * yy.dot(&(big.clone().try_inverse().unwrap() * &yy)) + big.determinant().ln();
    let kron_err = (blocked - dense).abs() / dense.abs().max(1.0);

    let dir = run_preset(Command::Posterior, "fcnn-scalar-identity", out);
    let ratios: Vec<f64> = read_csv(&dir.join("laziness.csv")).iter().map(|r| f(r, "ratio")).collect();
    let decreasing = ratios.len() == 3 && ratios.windows(2).all(|w| w[1] < w[0]);
    check(
        scalar_err <= 1e-12 && min_psi >= 0.0 && kron_err <= 1e-10 && decreasing,
        format!(
            "closed form error {scalar_err:.1e}; min psi {min_psi:.3e}; block identity error {kron_err:.1e}; laziness ratios {ratios:?}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = RngStream::new(81).rng();
    let mut worst: f64 = 0.0;
    let mut infinite_ok = true;
    for _ in 0..1000 {
        let d = rng.random_range(1..=6);
        let rank = rng.random_range(1..=d);
        let b = Mat::from_fn(d, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = &b * b.transpose();
        let v = nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &q * v;
        // Q⁺ = (B⁺)ᵀB⁺; the pseudo-inverse of the factor is far better conditioned
        let oracle = (b.pseudo_inverse(1e-12).unwrap() * &z).norm_squared();
        let got = generalized_q_norm(&PsdMatrix::new(q.clone(), 1).unwrap(), z.as_slice()).unwrap();
        worst = worst.max((got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));

        if rank < d {
            // add a component orthogonal to the image
            let eig = q.clone().symmetric_eigen();
            let j = eig.eigenvalues.imin();
            let off = &z + eig.eigenvectors.column(j) * (1.0 + z.norm());
            let inf = generalized_q_norm(&PsdMatrix::new(q, 1).unwrap(), off.as_slice()).unwrap();
            infinite_ok &= inf == f64::INFINITY;
        }
    }

    let spec = fcnn(1, Activation::Identity, 1.0);
    let k1 = PsdMatrix::scalar(1.0).unwrap();
    let q = PsdMatrix::scalar(1.5).unwrap();
    let opts = RateOptions::default();
    let grid = MarginalOptions::default();
    let s = RngStream::new(82);
    let j = output_rate(&spec, &q, &[0.0], &k1, &opts, &grid, &s).unwrap();
    let m = rate_marginal(&spec, &q, &k1, &opts, &grid, &s).unwrap();
    let j_err = (j.value - m.value).abs();
    check(
        worst <= 1e-8 && infinite_ok && j_err <= opts.tol,
        format!("max relative norm error {worst:.1e}; out-of-image infinite: {infinite_ok}; |J(Q,0) - I(Q)| = {j_err:.1e}"),
    )
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let mut bytes = std::fs::read(&p).unwrap();
        if name == "manifest.json" {
            let mut v: Value = serde_json::from_slice(&bytes).unwrap();
            let o = v.as_object_mut().unwrap();
            o.remove("wall_time_seconds");
            o.remove("workers");
            bytes = serde_json::to_vec(&v).unwrap();
        }
        files.insert(name, bytes);
    }
    files
}

fn criterion_9(out: &Path) -> Outcome {
    let mut cfg = preset("circular1d-relu").unwrap();
    cfg.chain.replicas = 8;
    cfg.limit.samples = 20_000;
    cfg.rate.options.samples = 5_000;
    cfg.rate.scales = vec![1.1];
    let mut same = true;
    let mut compared = 0;
    for command in [Command::ChainSim, Command::Rate] {
        let dirs: Vec<_> = [1, 4]
            .iter()
            .map(|&w| {
                let o = run(
                    command,
                    &cfg,
                    &RunOptions {
                        out: Some(out.join(format!("w{w}"))),
                        workers: Some(w),
                        ..Default::default()
                    },
                );
                assert_eq!(o.code, 0, "{}", o.summary);
                artifacts(&o.dir)
            })
            .collect();
        compared += dirs[0].len();
        same &= dirs[0] == dirs[1];
    }
    check(same, format!("{compared} artifacts compared at 1 and 4 workers"))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let criteria: Vec<Criterion> = vec![
        (1, "scalar rate oracle", Box::new(criterion_1)),
        (2, "empirical rate vs chi-square law", Box::new(|| criterion_2(&out.join("c2")))),
        (3, "law of large numbers scaling", Box::new(|| criterion_3(&out.join("c3")))),
        (4, "Gaussian output limit", Box::new(|| criterion_4(&out.join("c4")))),
        (5, "kernel recursion oracles", Box::new(criterion_5)),
        (6, "rate nonnegativity and convexity", Box::new(criterion_6)),
        (7, "posterior potential", Box::new(|| criterion_7(&out.join("c7")))),
        (8, "generalized norm and output rate", Box::new(criterion_8)),
        (9, "reproducibility across workers", Box::new(|| criterion_9(&out.join("c9")))),
    ];
    let mut failed = 0;
    for (n, title, run) in &criteria {
        let t = Instant::now();
        let result = run();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n}: pass ({title}) {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: fail ({title}) {d} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
