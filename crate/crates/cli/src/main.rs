//! `glmcert`: certified sparse GLMs from the command line.
//!
//! Exit codes: 0 certified optimal, 2 time limit reached, 1 runtime error,
//! 64 bad command line.

// `!(x > 0.0)` rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod input;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use glmcert::problem::Constraints;
use glmcert::{
    batch_size_sweep, collect_rashomon, model_reliance, save_csv, secondary_metrics, solve, support_frequency,
    BatchSize, Certificate, LossKind, ProblemInstance, RashomonConfig, SolveStatus, SolverConfig, SupportTrie,
    SyntheticSpec,
};
use serde_json::json;

use input::{format_gen_spec, load, loss_name, usage, with_suffix, Loaded, Source, UsageError};
use report::{now_rfc3339, write_json, write_text, RunReport, DATASET_SCHEMA, POOL_SCHEMA, RUN_REPORT_SCHEMA};

#[derive(Parser, Debug)]
#[command(name = "glmcert", version, about = "Certified optimal sparse GLMs by batched branch and bound")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve to certified optimality and write the certificate.
    Solve(SolveArgs),
    /// Collect every support within (1 + epsilon) of the optimum.
    Rashomon(RashomonArgs),
    /// Solve once per batch size and tabulate time and nodes.
    Sweep(SweepArgs),
    /// Write a synthetic dataset and its sidecar.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct InputArgs {
    /// Synthetic instance, e.g. n=200,p=100,k=10,rho=0.9,loss=squared,seed=1
    #[arg(long, value_parser = input::parse_gen_spec)]
    gen: Option<SyntheticSpec>,
    /// CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProblemArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Response column of --data.
    #[arg(long, default_value = "y", requires = "data")]
    response: String,
    /// squared or logistic. Required with --data; taken from the spec with --gen.
    #[arg(long, value_parser = input::parse_loss)]
    loss: Option<LossKind>,
    /// Cardinality budget.
    #[arg(long, value_parser = clap::value_parser!(usize))]
    k: usize,
    /// Coefficient box: |beta_j| <= M.
    #[arg(long = "M")]
    big_m: f64,
    /// Ridge weight.
    #[arg(long)]
    lambda2: f64,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Worker threads for the batched kernels.
    #[arg(long)]
    threads: Option<usize>,
    /// Memory available to one batch, e.g. 4GiB; used by --batch-size auto.
    #[arg(long, value_parser = input::parse_memory, default_value = "1GiB")]
    memory_budget: u64,
    /// Write a run report (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Nodes per batch: a positive integer or auto.
    #[arg(long, value_parser = input::parse_batch_size, default_value = "64")]
    batch_size: BatchSize,
    /// Certificate JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Write the component time profile as CSV here (and embed it in the certificate).
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RashomonArgs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Relative tolerance of the Rashomon set.
    #[arg(long)]
    epsilon: f64,
    /// Keep only the best N supports.
    #[arg(long)]
    top_n: Option<usize>,
    /// Pool JSON output; defaults to <out stem>.pool.json.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Prefix of the analytics CSVs; defaults to <out stem>.
    #[arg(long)]
    analytics_prefix: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Comma-separated batch sizes.
    #[arg(long, required = true, value_delimiter = ',', value_parser = input::parse_positive)]
    sizes: Vec<usize>,
    /// Sweep CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Whitespace-separated "batch_size seconds nodes" columns for plotting.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Generator spec, e.g. n=200,p=100,k=10,rho=0.9,loss=squared,seed=1
    #[arg(long, value_parser = input::parse_gen_spec)]
    gen: SyntheticSpec,
    /// Dataset CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Sidecar JSON output; defaults to <out stem>.json.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
enum Finish {
    Optimal,
    TimeLimit,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLMCERT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Rashomon(a) => cmd_rashomon(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gen(a) => cmd_gen(&a),
    };
    match result {
        Ok(Finish::Optimal) => ExitCode::SUCCESS,
        Ok(Finish::TimeLimit) => ExitCode::from(2),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(64)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Everything resolved from a [`ProblemArgs`].
struct Prepared {
    source: Source,
    loss: LossKind,
    constraints: Constraints,
    loaded: Loaded,
}

fn prepare(args: &ProblemArgs) -> anyhow::Result<Prepared> {
    let (source, loss) = match (&args.input.gen, &args.input.data) {
        (Some(spec), None) => {
            if let Some(l) = args.loss.filter(|&l| l != spec.loss) {
                return Err(usage(format!(
                    "--loss {} conflicts with loss={} in --gen",
                    loss_name(l),
                    loss_name(spec.loss)
                )));
            }
            (Source::Generator(*spec), spec.loss)
        }
        (None, Some(path)) => {
            let loss = args.loss.ok_or_else(|| usage("--loss is required with --data"))?;
            (Source::File { path: path.clone(), response: args.response.clone() }, loss)
        }
        _ => unreachable!("clap enforces exactly one input"),
    };
    if args.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if !(args.big_m > 0.0) || !args.big_m.is_finite() {
        return Err(usage("--M must be positive and finite"));
    }
    if !(args.lambda2 >= 0.0) || !args.lambda2.is_finite() {
        return Err(usage("--lambda2 must be nonnegative and finite"));
    }
    if args.time_limit.is_some_and(|t| !(t > 0.0)) {
        return Err(usage("--time-limit must be positive"));
    }
    if args.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    let constraints = Constraints { k: args.k, big_m: args.big_m, lambda2: args.lambda2 };
    let loaded = load(&source, loss, constraints)?;
    Ok(Prepared { source, loss, constraints, loaded })
}

fn solver_config(args: &ProblemArgs, batch_size: BatchSize, profile: bool) -> SolverConfig {
    SolverConfig {
        batch_size,
        time_limit: args.time_limit,
        memory_budget: args.memory_budget,
        profile,
        threads: args.threads,
        ..SolverConfig::default()
    }
}

fn input_json(source: &Source) -> serde_json::Value {
    match source {
        Source::Generator(spec) => json!({ "source": "generator", "spec": spec, "canonical": format_gen_spec(spec) }),
        Source::File { path, response } => json!({ "source": "file", "path": path, "response": response }),
    }
}

/// Argument vector for the command with every resolved setting explicit.
/// Auto batch sizes are replaced by the size actually used.
fn reproduce(command: &str, prep: &Prepared, args: &ProblemArgs, batch: Option<usize>) -> Vec<String> {
    let mut v = vec!["glmcert".to_string(), command.to_string()];
    match &prep.source {
        Source::Generator(spec) => v.extend(["--gen".into(), format_gen_spec(spec)]),
        Source::File { path, response } => v.extend([
            "--data".into(),
            path.display().to_string(),
            "--response".into(),
            response.clone(),
            "--loss".into(),
            loss_name(prep.loss).into(),
        ]),
    }
    v.extend([
        "--k".into(),
        prep.constraints.k.to_string(),
        "--M".into(),
        format!("{:?}", prep.constraints.big_m),
        "--lambda2".into(),
        format!("{:?}", prep.constraints.lambda2),
    ]);
    if let Some(b) = batch {
        v.extend(["--batch-size".into(), b.to_string()]);
    }
    if let Some(t) = args.time_limit {
        v.extend(["--time-limit".into(), format!("{t:?}")]);
    }
    if let Some(t) = args.threads {
        v.extend(["--threads".into(), t.to_string()]);
    }
    v
}

fn config_json(prep: &Prepared, args: &ProblemArgs, config: &SolverConfig) -> serde_json::Value {
    json!({
        "loss": loss_name(prep.loss),
        "k": prep.constraints.k,
        "M": prep.constraints.big_m,
        "lambda2": prep.constraints.lambda2,
        "batch_size_requested": config.batch_size,
        "memory_budget": args.memory_budget,
        "time_limit": args.time_limit,
        "threads": args.threads,
        "prune_slack": config.prune_slack,
        "relaxation": config.relax,
    })
}

fn support_names(instance: &ProblemInstance, cert: &Certificate) -> Vec<String> {
    cert.support.iter().map(|&j| instance.feature_names()[j].clone()).collect()
}

fn summary(cert: &Certificate, seconds: f64) {
    println!(
        "value {:.10} gap {:.4}% nodes {} seconds {:.3} status {}",
        cert.optimal_value,
        cert.gap_percent,
        cert.nodes_processed,
        seconds,
        match cert.status {
            SolveStatus::Optimal => "optimal",
            SolveStatus::TimeLimit => "time_limit",
        }
    );
}

fn finish_of(cert: &Certificate) -> Finish {
    match cert.status {
        SolveStatus::Optimal => Finish::Optimal,
        SolveStatus::TimeLimit => Finish::TimeLimit,
    }
}

fn write_certificate(args: &SolveArgs, cert: &Certificate) -> anyhow::Result<()> {
    write_json(&args.out, &cert.to_json(args.profile.is_some()))?;
    if let Some(path) = &args.profile {
        write_text(path, &cert.profile.to_csv())?;
    }
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> anyhow::Result<Finish> {
    let started_at = now_rfc3339();
    let prep = prepare(&args.problem)?;
    let config = solver_config(&args.problem, args.batch_size, args.profile.is_some());
    let start = std::time::Instant::now();
    let cert = solve(&prep.loaded.instance, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    write_certificate(args, &cert)?;
    summary(&cert, seconds);
    if let Some(path) = &args.problem.report {
        let report = RunReport {
            schema: RUN_REPORT_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "solve".into(),
            input: input_json(&prep.source),
            fingerprint: prep.loaded.fingerprint.clone(),
            dropped_columns: prep.loaded.dropped.clone(),
            config: config_json(&prep, &args.problem, &config),
            reproduce: reproduce("solve", &prep, &args.problem, Some(cert.batch_size)),
            certificate: Some(cert.to_json(args.profile.is_some())),
            support_names: Some(support_names(&prep.loaded.instance, &cert)),
            pool_path: None,
            sweep: None,
            started_at,
            finished_at: now_rfc3339(),
        };
        write_json(path, &report)?;
    }
    Ok(finish_of(&cert))
}

/// Pool document: models ranked by objective, supports 1-based.
fn pool_json(trie: &SupportTrie, instance: &ProblemInstance, cert: &Certificate, r: &RashomonConfig) -> anyhow::Result<serde_json::Value> {
    let mut records = (0..trie.len()).map(|m| trie.recover(m).map(|rec| (m, rec))).collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)));
    let models: Vec<_> = records
        .iter()
        .enumerate()
        .map(|(rank, (m, rec))| {
            let dense = trie.dense(*m)?;
            let support: Vec<usize> = rec.support.clone();
            Ok(json!({
                "rank": rank + 1,
                "record": m,
                "objective": rec.objective,
                "support": support.iter().map(|j| j + 1).collect::<Vec<_>>(),
                "names": support.iter().map(|&j| instance.feature_names()[j].clone()).collect::<Vec<_>>(),
                "coefficients": support.iter().map(|&j| dense[j]).collect::<Vec<_>>(),
            }))
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(json!({
        "schema": POOL_SCHEMA,
        "p": trie.p(),
        "epsilon": r.epsilon,
        "top_n": r.cap,
        "optimal_value": cert.optimal_value,
        "threshold": (1.0 + r.epsilon) * cert.optimal_value,
        "size": trie.len(),
        "models": models,
    }))
}

fn write_analytics(prefix: &Path, trie: &SupportTrie, instance: &ProblemInstance) -> anyhow::Result<()> {
    let names = instance.feature_names();
    let freq = support_frequency(trie)?;
    let mut w = csv::Writer::from_path(with_suffix(prefix, ".frequency.csv"))?;
    w.write_record(["feature", "name", "frequency"])?;
    for (j, f) in freq.iter().enumerate() {
        w.write_record([(j + 1).to_string(), names[j].clone(), format!("{f:?}")])?;
    }
    w.flush()?;

    let reliance = model_reliance(trie, instance)?;
    let mut w = csv::Writer::from_path(with_suffix(prefix, ".reliance.csv"))?;
    w.write_record(["feature", "name", "min", "mean", "max"])?;
    for row in &reliance.rows {
        w.write_record([
            (row.feature + 1).to_string(),
            names[row.feature].clone(),
            format!("{:?}", row.min),
            format!("{:?}", row.mean),
            format!("{:?}", row.max),
        ])?;
    }
    w.flush()?;

    // one row per pooled model; AUC and accuracy only mean something for
    // classification
    struct Row {
        record: usize,
        objective: f64,
        support: Vec<usize>,
        auc_accuracy: Option<(f64, f64)>,
    }
    let mut rows = Vec::with_capacity(trie.len());
    if instance.loss() == LossKind::Logistic {
        for m in secondary_metrics(trie, instance, 0.5)? {
            let support = trie.recover(m.record)?.support;
            rows.push(Row { record: m.record, objective: m.objective, support, auc_accuracy: Some((m.auc, m.accuracy)) });
        }
    } else {
        for m in 0..trie.len() {
            let rec = trie.recover(m)?;
            rows.push(Row { record: m, objective: rec.objective, support: rec.support, auc_accuracy: None });
        }
        rows.sort_by(|a, b| a.objective.total_cmp(&b.objective).then(a.record.cmp(&b.record)));
    }
    let mut w = csv::Writer::from_path(with_suffix(prefix, ".models.csv"))?;
    w.write_record(["rank", "record", "objective", "support", "auc", "accuracy"])?;
    for (rank, row) in rows.iter().enumerate() {
        let support = row.support.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(";");
        let (auc, acc) =
            row.auc_accuracy.map_or((String::new(), String::new()), |(a, c)| (format!("{a:?}"), format!("{c:?}")));
        w.write_record([(rank + 1).to_string(), row.record.to_string(), format!("{:?}", row.objective), support, auc, acc])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_rashomon(args: &RashomonArgs) -> anyhow::Result<Finish> {
    let started_at = now_rfc3339();
    if !(args.epsilon >= 0.0) || !args.epsilon.is_finite() {
        return Err(usage("--epsilon must be nonnegative and finite"));
    }
    if args.top_n == Some(0) {
        return Err(usage("--top-n must be at least 1"));
    }
    let s = &args.solve;
    let prep = prepare(&s.problem)?;
    let config = solver_config(&s.problem, s.batch_size, s.profile.is_some());
    let rconfig = RashomonConfig::new(args.epsilon, args.top_n);
    let start = std::time::Instant::now();
    let (cert, trie) = collect_rashomon(&prep.loaded.instance, &config, &rconfig)?;
    let seconds = start.elapsed().as_secs_f64();
    write_certificate(s, &cert)?;
    let prefix = args.analytics_prefix.clone().unwrap_or_else(|| input::stem_prefix(&s.out));
    let pool_path = args.pool.clone().unwrap_or_else(|| with_suffix(&input::stem_prefix(&s.out), ".pool.json"));
    write_json(&pool_path, &pool_json(&trie, &prep.loaded.instance, &cert, &rconfig)?)?;
    if !trie.is_empty() {
        write_analytics(&prefix, &trie, &prep.loaded.instance).context("writing analytics")?;
    }
    summary(&cert, seconds);
    println!("pool {} supports", trie.len());
    if let Some(path) = &s.problem.report {
        let mut cfg = config_json(&prep, &s.problem, &config);
        cfg["epsilon"] = json!(args.epsilon);
        cfg["top_n"] = json!(args.top_n);
        let mut repro = reproduce("rashomon", &prep, &s.problem, Some(cert.batch_size));
        repro.extend(["--epsilon".into(), format!("{:?}", args.epsilon)]);
        if let Some(n) = args.top_n {
            repro.extend(["--top-n".into(), n.to_string()]);
        }
        let report = RunReport {
            schema: RUN_REPORT_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "rashomon".into(),
            input: input_json(&prep.source),
            fingerprint: prep.loaded.fingerprint.clone(),
            dropped_columns: prep.loaded.dropped.clone(),
            config: cfg,
            reproduce: repro,
            certificate: Some(cert.to_json(s.profile.is_some())),
            support_names: Some(support_names(&prep.loaded.instance, &cert)),
            pool_path: Some(pool_path),
            sweep: None,
            started_at,
            finished_at: now_rfc3339(),
        };
        write_json(path, &report)?;
    }
    Ok(finish_of(&cert))
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<Finish> {
    let started_at = now_rfc3339();
    let sizes: Vec<usize> = args.sizes.clone();
    let prep = prepare(&args.problem)?;
    let config = solver_config(&args.problem, BatchSize::Fixed(sizes[0]), false);
    let rows = batch_size_sweep(&prep.loaded.instance, &sizes, &config);
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["batch_size", "seconds", "nodes", "gap_percent", "optimal_value", "error"])?;
    for r in &rows {
        w.write_record([
            r.batch_size.to_string(),
            format!("{:?}", r.seconds),
            r.nodes.to_string(),
            format!("{:?}", r.gap_percent),
            format!("{:?}", r.optimal_value),
            r.error.clone().unwrap_or_default(),
        ])?;
        println!("batch {:>5} seconds {:.3} nodes {} gap {:.4}%", r.batch_size, r.seconds, r.nodes, r.gap_percent);
    }
    w.flush()?;
    if let Some(path) = &args.plot_data {
        let mut text = String::from("# batch_size seconds nodes\n");
        for r in rows.iter().filter(|r| r.error.is_none()) {
            text.push_str(&format!("{} {:?} {}\n", r.batch_size, r.seconds, r.nodes));
        }
        write_text(path, &text)?;
    }
    if let Some(path) = &args.problem.report {
        let mut repro = reproduce("sweep", &prep, &args.problem, None);
        repro.extend([
            "--sizes".into(),
            sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        ]);
        let report = RunReport {
            schema: RUN_REPORT_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "sweep".into(),
            input: input_json(&prep.source),
            fingerprint: prep.loaded.fingerprint.clone(),
            dropped_columns: prep.loaded.dropped.clone(),
            config: config_json(&prep, &args.problem, &config),
            reproduce: repro,
            certificate: None,
            support_names: None,
            pool_path: None,
            sweep: Some(serde_json::to_value(&rows)?),
            started_at,
            finished_at: now_rfc3339(),
        };
        write_json(path, &report)?;
    }
    if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
        anyhow::bail!("batch size {}: {}", r.batch_size, r.error.as_deref().unwrap_or_default());
    }
    if rows.iter().any(|r| r.gap_percent > 0.0) {
        return Ok(Finish::TimeLimit);
    }
    Ok(Finish::Optimal)
}

fn cmd_gen(args: &GenArgs) -> anyhow::Result<Finish> {
    let spec = args.gen;
    let instance = glmcert::generate_synthetic(&spec)?;
    save_csv(&args.out, &instance)?;
    let support = glmcert::problem::true_support(spec.p, spec.k);
    let sidecar = json!({
        "schema": DATASET_SCHEMA,
        "generator": spec,
        "canonical": format_gen_spec(&spec),
        "data": args.out.file_name().map(|f| f.to_string_lossy().into_owned()),
        "response_column": "y",
        "true_support": support.iter().map(|j| j + 1).collect::<Vec<_>>(),
        "true_coefficients": vec![1.0; support.len()],
    });
    let path = args.sidecar.clone().unwrap_or_else(|| args.out.with_extension("json"));
    write_json(&path, &sidecar)?;
    println!("wrote {} ({} x {}) and {}", args.out.display(), spec.n, spec.p, path.display());
    Ok(Finish::Optimal)
}
