use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use evolvex_api::{router, AppHandle, ServeState};
use evolvex_core::fusion::FusionStrategy;
use evolvex_core::graphgen::{generate, split_dataset, TemporalDataset};
use evolvex_core::metrics::{evaluate_model, EvalReport};
use evolvex_core::model::Checkpoint;
use evolvex_core::predict::{rollout, MAX_HORIZON};
use evolvex_core::promptgen::{build_prompt, evaluate_llm_path, CompletionProvider, HttpProvider, StubProvider};
use evolvex_core::train::{train, LossBreakdown};
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::{Cli, CliError, Command, EvalArgs, ForecastArgs, GenerateArgs, PromptArgs, ProviderArg, ServeArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl ToString) -> CliError {
    CliError::Usage(msg.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref()).map_err(usage)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Forecast(a) => cmd_forecast(&cfg, a),
        Command::Prompt(a) => cmd_prompt(&cfg, a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serialising output")?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<TemporalDataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
    Ok(TemporalDataset::from_json(&text).with_context(|| format!("loading dataset {}", path.display()))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Checkpoint::from_json(&text).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

/// Held-out length recorded in the dataset, else the configured horizon.
fn held_out(ds: &TemporalDataset, cfg: &RunConfig) -> usize {
    if ds.held_out.is_empty() {
        cfg.horizon()
    } else {
        ds.held_out.len()
    }
}

fn conditioning(ds: &TemporalDataset, horizon: usize) -> Result<TemporalDataset> {
    Ok(split_dataset(ds, horizon).map_err(|e| anyhow!(e))?.0)
}

fn cmd_generate(cfg: &RunConfig, a: GenerateArgs) -> Result<()> {
    let mut g = cfg.generator.clone();
    if let Some(v) = a.users {
        g.users = v;
    }
    if let Some(v) = a.steps {
        g.steps = v;
    }
    if let Some(v) = a.homophily {
        g.homophily = v;
    }
    if let Some(v) = a.closure {
        g.closure = v;
    }
    if let Some(v) = a.drift {
        g.drift = v;
    }
    g.directed |= a.directed;
    g.validate().map_err(usage)?;
    let horizon = a.horizon.unwrap_or(cfg.horizon());
    if horizon == 0 || horizon > MAX_HORIZON || horizon >= g.steps {
        return Err(usage(format!(
            "horizon must be in 1..={MAX_HORIZON} and smaller than the number of steps {}, got {horizon}",
            g.steps
        )));
    }
    let mut ds = generate(&g, a.seed).map_err(usage)?;
    ds.held_out = ds.snapshots[ds.step_count() - horizon..].iter().map(|s| s.step).collect();
    write_text(&a.out, &ds.to_json())?;
    let edges: Vec<String> = ds.snapshots.iter().map(|s| s.adjacency.edge_count().to_string()).collect();
    println!("users {}  steps {}  held out {horizon}", ds.user_count(), ds.step_count());
    println!("edges per step: {}", edges.join(" "));
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossTrace<'a> {
    strategy: FusionStrategy,
    epochs: &'a [LossBreakdown],
}

fn default_trace_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    out.with_file_name(format!("{stem}.loss.json"))
}

fn cmd_train(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let mut tc = cfg.train.clone();
    if let Some(s) = a.strategy {
        tc.strategy = s.into();
    }
    if let Some(p) = a.preset {
        (tc.lambda_link, tc.lambda_activity) = p.weights();
    }
    if let Some(v) = a.lambda1 {
        tc.lambda_link = v;
    }
    if let Some(v) = a.lambda2 {
        tc.lambda_activity = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.dim {
        tc.dim = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    tc.validate().map_err(usage)?;
    let ds = load_dataset(&a.dataset)?;
    let horizon = held_out(&ds, cfg);
    let cond = conditioning(&ds, horizon)?;
    let outcome = train(&cond, &tc).map_err(|e| anyhow!(e).context("training failed"))?;
    let eval_seed = cfg.eval_seed.unwrap_or(tc.seed);
    let report = evaluate_model(&outcome.model, &ds, horizon, eval_seed).ok();
    let ckpt = Checkpoint::new(&outcome.model, tc.clone(), report.clone(), &ds);
    write_text(&a.out, &ckpt.to_json())?;
    let trace_path = a.loss_trace.unwrap_or_else(|| default_trace_path(&a.out));
    write_json(&trace_path, &LossTrace { strategy: tc.strategy, epochs: &outcome.losses })?;
    if let Some(last) = outcome.losses.last() {
        println!(
            "{} after {} epochs: loss {:.6} (link {:.6}, activity {:.6})",
            tc.strategy, tc.epochs, last.total, last.link, last.activity
        );
    }
    if let Some(r) = &report {
        print!("{}", r.to_table());
    }
    println!("wrote {} and {}", a.out.display(), trace_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    strategy: FusionStrategy,
    horizon: usize,
    seed: u64,
    dataset_fingerprint: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    ckpt.verify_dataset(&ds).context("checkpoint does not match dataset")?;
    let horizon = held_out(&ds, cfg);
    let seed = a.seed.or(cfg.eval_seed).unwrap_or(ckpt.train_config.seed);
    let report = evaluate_model(&ckpt.model(), &ds, horizon, seed).context("evaluation failed")?;
    write_json(
        &a.out,
        &EvalOutput {
            strategy: ckpt.strategy,
            horizon,
            seed,
            dataset_fingerprint: &ckpt.dataset_fingerprint,
            report: &report,
        },
    )?;
    print!("{}", report.to_table());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_forecast(cfg: &RunConfig, a: ForecastArgs) -> Result<()> {
    let horizon = a.horizon.unwrap_or(cfg.horizon());
    if !(1..=MAX_HORIZON).contains(&horizon) {
        return Err(usage(format!("horizon must be in 1..={MAX_HORIZON}, got {horizon}")));
    }
    let ds = load_dataset(&a.dataset)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    ckpt.verify_dataset(&ds).context("checkpoint does not match dataset")?;
    let cond = if a.all_steps { ds.clone() } else { conditioning(&ds, held_out(&ds, cfg))? };
    let forecast = rollout(&ckpt.model(), &cond, horizon).context("rollout failed")?;
    write_json(&a.out, &forecast.to_file(ds.directed))?;
    for s in &forecast.stages {
        println!("stage {}: {} predicted edges", s.stage, s.predicted_edges.edge_count());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_prompt(cfg: &RunConfig, a: PromptArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let horizon = held_out(&ds, cfg);
    if let Some(user) = a.user {
        let cond = conditioning(&ds, horizon)?;
        let text = build_prompt(user, &cond, a.stage).map_err(usage)?.render();
        match &a.out {
            Some(path) => write_text(path, &text)?,
            None => print!("{text}"),
        }
        return Ok(());
    }
    let provider: Box<dyn CompletionProvider> = match a.provider {
        ProviderArg::Stub => Box::new(StubProvider),
        ProviderArg::Http => {
            let mut llm = cfg.llm.clone();
            if a.llm_url.is_some() {
                llm.url = a.llm_url.clone();
            }
            if a.llm_model.is_some() {
                llm.model = a.llm_model.clone();
            }
            Box::new(HttpProvider::new(llm.resolve().map_err(usage)?))
        }
    };
    let seed = a.seed.or(cfg.eval_seed).unwrap_or(0);
    let report = evaluate_llm_path(&ds, provider.as_ref(), horizon, seed).context("prompt evaluation failed")?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("llm-report.json"));
    write_json(&out, &report)?;
    print!("{}", report.to_table());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener =
            tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        let app = AppHandle::new();
        let loader = app.clone();
        let (dataset, checkpoint) = (a.dataset.clone(), a.checkpoint.clone());
        tokio::task::spawn_blocking(move || {
            let built = (|| -> anyhow::Result<ServeState> {
                let ds = load_dataset(&dataset).map_err(into_anyhow)?;
                let ckpt = load_checkpoint(&checkpoint).map_err(into_anyhow)?;
                Ok(ServeState::new(ds, &ckpt)?)
            })();
            match built {
                Ok(state) => {
                    loader.install(state);
                    eprintln!("forecast ready");
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    std::process::exit(1);
                }
            }
        });
        println!("listening on http://{}", listener.local_addr().context("reading bound address")?);
        axum::serve(listener, router(app, a.static_dir)).await.context("server stopped")?;
        Ok(())
    })
}

fn into_anyhow(e: CliError) -> anyhow::Error {
    match e {
        CliError::Usage(m) => anyhow!(m),
        CliError::Runtime(e) => e,
    }
}
