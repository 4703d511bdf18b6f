use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::time::Duration;

use commcost::adaptive::{write_cost_curve, write_decisions, Decision, Family, SelectionObjective};
use commcost::commodel::{geometric_grid, TimeModelParams};
use commcost::estimator::{
    propose_next_size, read_fit_trace, read_samples_csv, write_fit_trace, EstimatorError, EstimatorState, FitResult,
    SizePolicy,
};
use commcost::netprobe::{self, write_samples_csv, ProbeClient, ProbeConfig, ProbeSample, ProbeServer, DEFAULT_CONNECT_TIMEOUT};
use commcost::optimizer::{run_compressed_gd, SimSettings};
use commcost::rng::Stream;
use commcost::{SeedKey, BITS_PER_BYTE};
use log::warn;
use rand::Rng;

use crate::error::CliError;
use crate::manifest::OutputDir;
use crate::{Cli, FitArgs, ProbeArgs, RegionsArgs, SelectArgs, ServeArgs, SimulateArgs, SynthArgs};

const BYTE: f64 = BITS_PER_BYTE as f64;
const LIVE_P_MAX_BYTES: u64 = 1 << 20;

fn seed(cli: &Cli) -> u64 {
    if cli.config.is_some() && !matches!(cli.command, crate::Command::Simulate(_)) {
        warn!("--config is only read by simulate");
    }
    cli.seed.unwrap_or(0)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn config(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn open(path: &std::path::Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

fn write_with<F, E>(out: &mut OutputDir, name: &str, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut io::BufWriter<File>) -> Result<(), E>,
    E: std::fmt::Display,
{
    let mut w = out.file(name)?;
    f(&mut w).map_err(|e| CliError::io(&out.path(name), e))?;
    w.flush().map_err(|e| CliError::io(&out.path(name), e))
}

pub fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let mut settings = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            SimSettings::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => SimSettings::default(),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        settings.set(k.trim(), v.trim())?;
    }
    if let Some(v) = a.alpha {
        settings.alpha = v;
    }
    if let Some(v) = a.beta {
        settings.beta = v;
    }
    if let Some(v) = a.alpha_m {
        settings.alpha_m = v;
    }
    if let Some(v) = a.beta_m {
        settings.beta_m = v;
    }
    if let Some(v) = a.steps {
        settings.steps = v;
    }
    if a.gamma.is_some() {
        settings.gamma = a.gamma;
    }
    if let Some(s) = cli.seed {
        settings.seed = s;
    }

    let (problem, sim) = settings.build()?;
    let trace = run_compressed_gd(&problem, &sim)?;
    let mut out = OutputDir::create(&cli.out)?;
    write_with(&mut out, "trace.csv", |w| trace.write_csv(w))?;
    let last = trace.last();
    println!(
        "final_objective={} wall_clock_s={} uplink_time_s={} downlink_time_s={} uplink_bits={} downlink_bits={} total_bits={}",
        last.objective,
        last.wall_clock_s,
        last.uplink_time_s,
        last.downlink_time_s,
        last.uplink_bits,
        last.downlink_bits,
        last.uplink_bits + last.downlink_bits
    );
    out.finish("simulate", settings.seed, settings.to_pairs())?;
    Ok(())
}

fn parse_range(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("--size-range expects LO:HI:N, got `{text}`"));
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, n] = parts[..] else { return Err(bad()) };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(bad());
    }
    Ok(geometric_grid(lo, hi, n))
}

pub fn regions(cli: &Cli, a: &RegionsArgs) -> Result<(), CliError> {
    let seed = seed(cli);
    let params = TimeModelParams::deterministic(a.alpha, a.beta / BYTE)?;
    let sizes = match &a.size_range {
        Some(r) => parse_range(r)?,
        None => a.sizes.clone(),
    };
    if let Some(s) = sizes.iter().find(|s| !s.is_finite() || **s <= 0.0) {
        return Err(CliError::Usage(format!("sizes must be positive bytes, got {s}")));
    }
    let omegas = if a.omegas.is_empty() { geometric_grid(1.0, 1e6, 25) } else { a.omegas.clone() };
    let reports = sizes
        .iter()
        .map(|&bytes| params.transition_report(bytes * BYTE, &omegas, a.rho))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = OutputDir::create(&cli.out)?;
    write_with(&mut out, "regions.csv", |w| -> io::Result<()> {
        writeln!(w, "size_bytes,region,area,bandwidth_to_latency,expected_time_s,speedup_ceiling")?;
        for (&bytes, rep) in sizes.iter().zip(&reports) {
            let bits = bytes * BYTE;
            let region = params.classify_region(bits, a.rho);
            let ratio = if params.alpha_const == 0.0 { f64::INFINITY } else { params.beta_const * bits / params.alpha_const };
            writeln!(
                w,
                "{bytes},{region},{},{ratio},{},{}",
                region.number(),
                params.expected_time(rep.source_bits),
                params.speedup_ceiling(bits)
            )?;
            println!("size_bytes={bytes} region={region}");
        }
        Ok(())
    })?;
    write_with(&mut out, "speedup.csv", |w| -> io::Result<()> {
        writeln!(w, "size_bytes,omega,compressed_bytes,region_from,region_to,expected_time_s,speedup")?;
        for (&bytes, rep) in sizes.iter().zip(&reports) {
            for r in &rep.rows {
                writeln!(
                    w,
                    "{bytes},{},{},{},{},{},{}",
                    r.omega,
                    r.compressed_bits / BYTE,
                    r.region_from,
                    r.region_to,
                    r.expected_time_s,
                    r.speedup
                )?;
            }
        }
        Ok(())
    })?;
    let cfg = config(&[
        ("alpha", a.alpha.to_string()),
        ("beta", a.beta.to_string()),
        ("rho", a.rho.to_string()),
        ("sizes", join(&sizes)),
        ("omegas", join(&omegas)),
    ]);
    out.finish("regions", seed, cfg)?;
    Ok(())
}

/// Feed one sample; degenerate intermediate states are skipped.
fn feed(st: &mut EstimatorState, bits: f64, time: f64, fits: &mut Vec<FitResult>) -> Result<(), CliError> {
    match st.update(bits, time) {
        Ok(f) => fits.push(f),
        Err(EstimatorError::Degenerate) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

pub fn fit(cli: &Cli, a: &FitArgs) -> Result<(), CliError> {
    let seed = seed(cli);
    let policy: SizePolicy = a.policy.parse()?;
    let mut out = OutputDir::create(&cli.out)?;
    let mut fits = Vec::new();
    let mut cfg = vec![("policy", a.policy.clone()), ("lambda", a.lambda.to_string())];

    if let Some(path) = &a.samples {
        let samples = read_samples_csv(open(path)?)?;
        let largest = samples.iter().map(|s| s.size_bits).fold(0.0, f64::max);
        let p_max_bits = a.p_max.map_or(largest, |b| (b * BITS_PER_BYTE) as f64);
        if samples.is_empty() || p_max_bits <= 0.0 {
            return Err(CliError::Degenerate(format!("{} holds no usable samples", path.display())));
        }
        let mut st = EstimatorState::new(p_max_bits)?.with_forgetting(a.lambda)?;
        for s in &samples {
            feed(&mut st, s.size_bits, s.time_s, &mut fits)?;
        }
        if fits.is_empty() {
            return Err(CliError::Degenerate(format!("{} samples without two distinct sizes", samples.len())));
        }
        cfg.push(("samples", path.display().to_string()));
        cfg.push(("p_max", (p_max_bits / BYTE).to_string()));
    } else if let Some(addr) = &a.live {
        let p_max = a.p_max.unwrap_or(LIVE_P_MAX_BYTES);
        let mut st = EstimatorState::new((p_max * BITS_PER_BYTE) as f64)?.with_forgetting(a.lambda)?;
        let mut client = ProbeClient::connect(addr, DEFAULT_CONNECT_TIMEOUT, seed)?;
        let mut measured = Vec::new();
        for step in 0..a.steps {
            let bytes = ((propose_next_size(&st, policy, seed) / BYTE).ceil() as u64).clamp(1, p_max);
            let rtt = client.exchange(bytes)?;
            measured.push(ProbeSample { size_bytes: bytes, rtt_seconds: rtt, timestamp_s: client.elapsed(), rep: step as u32 });
            feed(&mut st, (bytes * BITS_PER_BYTE) as f64, rtt, &mut fits)?;
        }
        client.close()?;
        write_with(&mut out, "live_samples.csv", |w| write_samples_csv(w, &measured))?;
        if fits.is_empty() {
            return Err(CliError::Degenerate(format!("{} exchanges without two distinct sizes", a.steps)));
        }
        cfg.push(("live", addr.clone()));
        cfg.push(("p_max", p_max.to_string()));
        cfg.push(("steps", a.steps.to_string()));
    }

    write_with(&mut out, "fit_trace.csv", |w| write_fit_trace(w, &fits))?;
    let last = fits.last().expect("non-empty");
    println!("k={} alpha_hat={} beta_hat={}", last.k, last.alpha_hat, last.beta_per_byte());
    out.finish("fit", seed, config(&cfg))?;
    Ok(())
}

pub fn select(cli: &Cli, a: &SelectArgs) -> Result<(), CliError> {
    let seed = seed(cli);
    let family: Family = a.family.parse()?;
    let mut decisions = Vec::new();
    let mut cfg = vec![
        ("family", family.to_string()),
        ("d", a.d.to_string()),
        ("n", a.n.to_string()),
        ("b", a.b.to_string()),
    ];

    let objective = match (a.alpha, a.beta, &a.fit) {
        (Some(alpha), Some(beta), _) => {
            let obj = SelectionObjective::with_costs(family, a.d, a.n, a.b, alpha, beta / BYTE)?;
            let (k_star, predicted_cost) = obj.select_power();
            decisions.push(Decision { sample_index: 0, alpha_hat: obj.alpha, beta_hat: obj.beta, k_star, predicted_cost });
            cfg.push(("alpha", alpha.to_string()));
            cfg.push(("beta", beta.to_string()));
            obj
        }
        (_, _, Some(path)) => {
            let fits = read_fit_trace(open(path)?)?;
            // shape check with placeholder costs
            let template = SelectionObjective::with_costs(family, a.d, a.n, a.b, 1.0, 1.0)?;
            let mut last = None;
            for f in &fits {
                let Some(obj) = template.with_fit(f) else { continue };
                let (k_star, predicted_cost) = obj.select_power();
                if decisions.last().is_none_or(|d: &Decision| d.k_star != k_star) {
                    decisions.push(Decision { sample_index: f.k, alpha_hat: f.alpha_hat, beta_hat: f.beta_hat, k_star, predicted_cost });
                }
                last = Some(obj);
            }
            cfg.push(("fit", path.display().to_string()));
            last.ok_or_else(|| CliError::Degenerate(format!("{} has no fit with a positive cost", path.display())))?
        }
        _ => return Err(CliError::Usage("give --alpha and --beta, or --fit".into())),
    };

    let (k_star, cost) = objective.select_power();
    let mut out = OutputDir::create(&cli.out)?;
    write_with(&mut out, "decision.csv", |w| write_decisions(w, &decisions))?;
    write_with(&mut out, "cost_curve.csv", |w| write_cost_curve(w, &objective.cost_curve()))?;
    write_with(&mut out, "selected.conf", |w| -> io::Result<()> {
        writeln!(w, "n = {}", a.n)?;
        writeln!(w, "d = {}", a.d)?;
        writeln!(w, "bits_per_scalar = {}", a.b)?;
        writeln!(w, "compressor.kind = {family}")?;
        writeln!(w, "compressor.k = {k_star}")?;
        writeln!(w, "alpha = {}", objective.alpha)?;
        writeln!(w, "beta = {}", objective.beta * BYTE)
    })?;
    println!("k_star={k_star} predicted_cost={cost}");
    out.finish("select", seed, config(&cfg))?;
    Ok(())
}

pub fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), CliError> {
    let seed = seed(cli);
    let params = TimeModelParams::new(a.alpha, a.beta / BYTE, a.alpha_m, a.beta_m)?;
    let plan: Vec<(u64, u32)> = match (a.count, a.p_max) {
        (Some(count), Some(p_max)) => {
            if p_max == 0 {
                return Err(CliError::Usage("--p-max must be at least 1 byte".into()));
            }
            (0..count).map(|i| (SeedKey::new(seed, i, 0).rng(Stream::Synth).random_range(1..=p_max), 0)).collect()
        }
        _ => a.sizes.iter().flat_map(|&s| (0..a.reps).map(move |rep| (s, rep))).collect(),
    };
    if plan.iter().any(|&(s, _)| s == 0) {
        return Err(CliError::Usage("sizes must be at least 1 byte".into()));
    }
    let samples: Vec<ProbeSample> = plan
        .iter()
        .enumerate()
        .map(|(i, &(size_bytes, rep))| {
            let mut rng = SeedKey::new(seed, i as u64, 1).rng(Stream::Synth);
            let t = params.sample_time((size_bytes * BITS_PER_BYTE) as f64, &mut rng);
            ProbeSample { size_bytes, rtt_seconds: t, timestamp_s: 0.0, rep }
        })
        .collect();

    let mut out = OutputDir::create(&cli.out)?;
    write_with(&mut out, "samples.csv", |w| write_samples_csv(w, &samples))?;
    println!("samples={}", samples.len());
    let mut cfg = vec![
        ("alpha", a.alpha.to_string()),
        ("beta", a.beta.to_string()),
        ("alpha_m", a.alpha_m.to_string()),
        ("beta_m", a.beta_m.to_string()),
    ];
    match (a.count, a.p_max) {
        (Some(count), Some(p_max)) => {
            cfg.push(("count", count.to_string()));
            cfg.push(("p_max", p_max.to_string()));
        }
        _ => {
            cfg.push(("sizes", join(&a.sizes)));
            cfg.push(("reps", a.reps.to_string()));
        }
    }
    out.finish("synth", seed, config(&cfg))?;
    Ok(())
}

pub fn probe(cli: &Cli, a: &ProbeArgs) -> Result<(), CliError> {
    let seed = seed(cli);
    if !(a.timeout > 0.0 && a.timeout.is_finite()) {
        return Err(CliError::Usage(format!("--timeout must be positive, got {}", a.timeout)));
    }
    let cfg = ProbeConfig {
        sizes: a.sizes.clone(),
        reps: a.reps,
        warmup: a.warmup,
        p_max: a.sizes.iter().copied().max().unwrap_or(1),
        connect_timeout: Duration::from_secs_f64(a.timeout),
        seed,
    };
    let report = netprobe::probe(&a.addr, &cfg)?;
    let mut out = OutputDir::create(&cli.out)?;
    write_with(&mut out, "probe_samples.csv", |w| write_samples_csv(w, &report.samples))?;
    println!("samples={} bytes_up={} bytes_down={}", report.samples.len(), report.bytes_up, report.bytes_down);
    let pairs = config(&[
        ("addr", a.addr.clone()),
        ("sizes", join(&a.sizes)),
        ("reps", a.reps.to_string()),
        ("warmup", a.warmup.to_string()),
        ("timeout", a.timeout.to_string()),
    ]);
    out.finish("probe", seed, pairs)?;
    match report.error {
        Some(e) => Err(CliError::Network(format!("stopped after {} samples: {e}", report.samples.len()))),
        None => Ok(()),
    }
}

pub fn serve(cli: &Cli, a: &ServeArgs) -> Result<(), CliError> {
    let seed = seed(cli);
    let server = ProbeServer::bind(a.bind.as_str(), a.p_max)?;
    let addr = server.local_addr().map_err(|e| CliError::Network(e.to_string()))?;
    let out = OutputDir::create(&cli.out)?;
    let pairs = config(&[
        ("bind", a.bind.clone()),
        ("p_max", a.p_max.to_string()),
        ("max_connections", a.max_connections.map_or_else(|| "unlimited".into(), |m| m.to_string())),
    ]);
    out.finish("serve", seed, pairs)?;
    println!("listening on {addr}");
    io::stdout().flush().map_err(|e| CliError::Failed(e.to_string()))?;
    for s in server.serve(a.max_connections)? {
        println!("frames={} bytes_in={} bytes_out={} outcome={:?}", s.frames, s.bytes_in, s.bytes_out, s.outcome);
    }
    Ok(())
}
