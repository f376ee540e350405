//! `transplant`: pretrain teachers on the synthetic world, graft their
//! category modules into a transplant net, learn adapters with back-distill /
//! direct-learn / distill, evaluate, sweep, and render reports.
//!
//! Exit codes: 0 success, 1 usage/config, 2 runtime (shapes, junctions, IO),
//! 3 quality-gate failure.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use transplant_core::checkpoint;
use transplant_core::error::{Error, Result};
use transplant_core::experiments::{
    evaluate, prepare_context, run_plan, sample_set, ExperimentPlan, PlanContext, ResultGrid,
    TaskKind,
};
use transplant_core::graph::TransplantNet;
use transplant_core::shapeworld::{export_dataset, Split};
use transplant_core::tensor::{Element, Precision, Rng};
use transplant_core::train::{train_adapter, Strategy};

#[derive(Parser)]
#[command(
    name = "transplant",
    about = "Learn adapters that connect frozen category modules to frozen task modules",
    version
)]
struct Cli {
    /// TOML configuration file; flags override file values, which override
    /// built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; defaults to $TRANSPLANT_OUT or ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a teacher net (category + task module) for one category.
    Pretrain(PretrainArgs),
    /// Transplant a teacher's category module into a net: graft a frozen copy
    /// plus a fresh adapter.
    Graft(GraftArgs),
    /// Learn the adapter for a (category, task) pair.
    Transplant(TransplantArgs),
    /// Evaluate a composed path of a saved net on a dataset split.
    Eval(EvalArgs),
    /// Run a full experiment plan into a results directory.
    Plan(PlanArgs),
    /// Render markdown and CSV tables from a results directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    category: Option<String>,
    /// cls or seg.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GraftArgs {
    /// Teacher checkpoint directory supplying the category module.
    #[arg(long)]
    teacher: PathBuf,
    /// Existing transplant-net checkpoint to extend; mutually exclusive with
    /// --task-from.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Teacher checkpoint whose task module seeds a fresh net.
    #[arg(long)]
    task_from: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TransplantArgs {
    /// Transplant-net checkpoint directory.
    #[arg(long)]
    net: PathBuf,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: PathBuf,
    /// Category id; defaults to the teacher's category module id.
    #[arg(long)]
    category: Option<String>,
    /// Task id; defaults to the net's only task module.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    category: String,
    #[arg(long)]
    task: String,
    /// cls or seg; decides the metric.
    #[arg(long)]
    task_kind: String,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PlanArgs {
    /// Worker count for independent plan cells.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory holding grid.json.
    #[arg(long)]
    results: PathBuf,
}

fn out_root(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os("TRANSPLANT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_task_kind(s: &str) -> Result<TaskKind> {
    match s {
        "cls" => Ok(TaskKind::Cls),
        "seg" => Ok(TaskKind::Seg),
        other => Err(Error::Config(format!("unknown task `{other}` (cls|seg)"))),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "back-distill" => Ok(Strategy::BackDistill),
        "direct-learn" => Ok(Strategy::DirectLearn),
        "distill" => Ok(Strategy::Distill),
        other => Err(Error::Config(format!(
            "unknown strategy `{other}` (back-distill|direct-learn|distill)"
        ))),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::Config(format!(
            "output path {} already exists; outputs go to fresh paths",
            path.display()
        )));
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn cmd_pretrain<E: Element>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = &cfg.pretrain;
    let dir = out.join(format!("teacher-{}-{}", p.category, p.task));
    fresh_dir(&dir)?;
    cfg.echo_into(&dir)?;
    let (teacher, rep) = transplant_core::experiments::pretrain_teacher::<E>(
        &p.category,
        p.task,
        &cfg.dataset,
        &p.budget,
        cfg.general.seed,
    )?;
    checkpoint::save_teacher(&dir, &teacher)?;
    if p.export_dataset {
        let cat = cfg.dataset.category_index(&p.category)?;
        for (split, name) in [
            (Split::Train, "train"),
            (Split::Val, "val"),
            (Split::Test, "test"),
        ] {
            export_dataset::<E>(dir.join(format!("dataset-{name}.bin")), &cfg.dataset, cat, split)?;
        }
    }
    println!(
        "pretrained {}/{}: {} steps, val {} = {:.2}%  -> {}",
        p.category,
        p.task,
        rep.steps_used,
        match p.task {
            TaskKind::Cls => "error",
            TaskKind::Seg => "pixel accuracy",
        },
        rep.val_metric,
        dir.display()
    );
    Ok(())
}

fn cmd_graft<E: Element>(cfg: &mut RunConfig, args: &GraftArgs, out: &Path) -> Result<()> {
    let teacher = checkpoint::load_teacher::<E>(&args.teacher)?;
    let mut net = match (&args.net, &args.task_from) {
        (Some(net_dir), None) => checkpoint::load_net::<E>(net_dir)?,
        (None, Some(teacher_dir)) => {
            let source = checkpoint::load_teacher::<E>(teacher_dir)?;
            let mut net = TransplantNet::new();
            net.add_task(source.task)?;
            net
        }
        _ => {
            return Err(Error::Config(
                "graft needs exactly one of --net or --task-from".into(),
            ))
        }
    };
    let task_id = single_task_id(&net)?;
    if let Some(d) = args.depth {
        cfg.transplant.adapter.convs = d;
    }
    if let Some(s) = args.seed {
        cfg.general.seed = s;
    }
    let arch = cfg.transplant.adapter.clone();
    let mut rng = Rng::for_stream(cfg.general.seed, "adapter-init");
    net.graft(&teacher, &task_id, &arch, cfg.transplant.init, &mut rng)?;
    let dir = out.join(format!("net-{}-{}", teacher.category.id(), task_id));
    fresh_dir(&dir)?;
    cfg.echo_into(&dir)?;
    checkpoint::save_net(&dir, &net)?;
    println!(
        "grafted category `{}` onto task `{}` (adapter depth {})  -> {}",
        teacher.category.id(),
        task_id,
        arch.convs,
        dir.display()
    );
    Ok(())
}

fn single_task_id<E: Element>(net: &TransplantNet<E>) -> Result<String> {
    let ids: Vec<String> = net.tasks().map(|t| t.id().to_string()).collect();
    match ids.as_slice() {
        [one] => Ok(one.clone()),
        _ => Err(Error::Config(format!(
            "net holds {} task modules; pass --task",
            ids.len()
        ))),
    }
}

fn cmd_transplant<E: Element>(cfg: &mut RunConfig, args: &TransplantArgs, out: &Path) -> Result<()> {
    let teacher = checkpoint::load_teacher::<E>(&args.teacher)?;
    let mut net = checkpoint::load_net::<E>(&args.net)?;
    let category = args
        .category
        .clone()
        .unwrap_or_else(|| teacher.category.id().to_string());
    let task = match &args.task {
        Some(t) => t.clone(),
        None => single_task_id(&net)?,
    };
    if let Some(s) = &args.strategy {
        cfg.transplant.strategy = parse_strategy(s)?;
    }
    if let Some(n) = args.samples {
        cfg.transplant.samples = n;
    }
    if let Some(steps) = args.steps {
        cfg.transplant.knobs.steps = steps;
    }
    if let Some(s) = args.seed {
        cfg.general.seed = s;
    }
    let strategy = cfg.transplant.strategy;
    let samples = cfg.transplant.samples;
    let seed = cfg.general.seed;
    let train_cfg = cfg.transplant.knobs.config(strategy, samples, seed);
    train_cfg.validate()?;

    let task_kind = task_kind_of(&net, &task)?;
    let data = if samples > 0 {
        Some(sample_set::<E>(
            &cfg.dataset,
            &category,
            Split::Train,
            samples,
            task_kind,
        )?)
    } else {
        None
    };

    let log = train_adapter(&mut net, &teacher, (&category, &task), data.as_ref(), &train_cfg)?;

    let dir = out.join(format!("transplant-{category}-{task}-{strategy}-n{samples}-s{seed}"));
    fresh_dir(&dir)?;
    cfg.echo_into(&dir)?;
    checkpoint::save_net(&dir, &net)?;
    log.write_csv(dir.join("train-log.csv"))?;
    for note in &log.notes {
        println!("note: {note}");
    }
    for ((id, pre), (_, post)) in log.frozen_pre.iter().zip(&log.frozen_post) {
        println!("frozen-audit {id}: pre={pre} post={post} ({})", if pre == post { "identical" } else { "CHANGED" });
    }
    println!(
        "trained adapter ({category}, {task}) with {strategy}, N={samples}: final loss {:.6}  -> {}",
        log.final_total_loss(),
        dir.display()
    );
    Ok(())
}

/// Task kind of a task module by its head: sigmoid head means segmentation.
fn task_kind_of<E: Element>(net: &TransplantNet<E>, task_id: &str) -> Result<TaskKind> {
    let module = net.task(task_id)?;
    Ok(
        match transplant_core::train::output_head(module.layers()) {
            transplant_core::train::OutputHead::SigmoidProbs => TaskKind::Seg,
            transplant_core::train::OutputHead::Logits => TaskKind::Cls,
        },
    )
}

fn cmd_eval<E: Element>(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let net = checkpoint::load_net::<E>(&args.net)?;
    let task_kind = parse_task_kind(&args.task_kind)?;
    let split = parse_split(&args.split)?;
    let count = match task_kind {
        TaskKind::Cls => cfg.dataset.splits.of(split),
        TaskKind::Seg => cfg.dataset.splits.of(split) / 2,
    };
    let set = sample_set::<E>(&cfg.dataset, &args.category, split, count, task_kind)?;
    let path = net.compose_path(&args.category, &args.task)?;
    let metric = evaluate(&path, &set, task_kind)?;
    println!(
        "{} ({}, {}) on {}: {} = {:.2}%",
        args.net.display(),
        args.category,
        args.task,
        args.split,
        match task_kind {
            TaskKind::Cls => "error",
            TaskKind::Seg => "pixel accuracy",
        },
        metric
    );
    Ok(())
}

fn cmd_plan<E: Element>(cfg: &RunConfig, args: &PlanArgs, out: &Path) -> Result<()> {
    let plan_cfg = cfg.plan.clone().unwrap_or_default();
    let plan: ExperimentPlan = plan_cfg.plan;
    let dir = out.join(format!("plan-{}", plan.experiment));
    fresh_dir(&dir)?;
    cfg.echo_into(&dir)?;
    let seed = args.seed.unwrap_or(cfg.general.seed);
    let mut ctx = PlanContext::<E>::new(cfg.dataset.clone(), plan_cfg.teacher_budget, seed)
        .with_cache_dir(dir.join("teachers"));
    prepare_context(&plan, &mut ctx)?;
    for rep in &ctx.reports {
        println!(
            "teacher {}/{}: {} steps, val metric {:.2}",
            rep.category, rep.task, rep.steps_used, rep.val_metric
        );
    }
    let grid = run_plan(&plan, &ctx, args.workers, Some(&dir))?;
    grid.save_json(dir.join("grid.json"))?;
    std::fs::write(dir.join("report.md"), report::render_markdown(&grid))?;
    std::fs::write(dir.join("report.csv"), report::render_csv(&grid))?;
    println!("{}", report::render_markdown(&grid));
    println!("plan results -> {}", dir.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let grid_path = args.results.join("grid.json");
    if !grid_path.exists() {
        return Err(Error::Config(format!(
            "no results in {} (missing grid.json)",
            args.results.display()
        )));
    }
    let grid = ResultGrid::load_json(&grid_path)?;
    let md = report::render_markdown(&grid);
    let csv = report::render_csv(&grid);
    std::fs::write(args.results.join("report.md"), &md)?;
    std::fs::write(args.results.join("report.csv"), &csv)?;
    print!("{md}");
    println!("reports -> {}", args.results.display());
    Ok(())
}

fn apply_pretrain_flags(cfg: &mut RunConfig, args: &PretrainArgs) -> Result<()> {
    if let Some(c) = &args.category {
        cfg.pretrain.category = c.clone();
    }
    if let Some(t) = &args.task {
        cfg.pretrain.task = parse_task_kind(t)?;
    }
    if let Some(s) = args.seed {
        cfg.general.seed = s;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    let out = out_root(&cli.out);
    match &cli.command {
        Command::Pretrain(args) => {
            apply_pretrain_flags(&mut cfg, args)?;
            match cfg.general.precision {
                Precision::Single => cmd_pretrain::<f32>(&cfg, &out),
                Precision::Double => cmd_pretrain::<f64>(&cfg, &out),
            }
        }
        Command::Graft(args) => match cfg.general.precision {
            Precision::Single => cmd_graft::<f32>(&mut cfg, args, &out),
            Precision::Double => cmd_graft::<f64>(&mut cfg, args, &out),
        },
        Command::Transplant(args) => match cfg.general.precision {
            Precision::Single => cmd_transplant::<f32>(&mut cfg, args, &out),
            Precision::Double => cmd_transplant::<f64>(&mut cfg, args, &out),
        },
        Command::Eval(args) => match cfg.general.precision {
            Precision::Single => cmd_eval::<f32>(&cfg, args),
            Precision::Double => cmd_eval::<f64>(&cfg, args),
        },
        Command::Plan(args) => match cfg.general.precision {
            Precision::Single => cmd_plan::<f32>(&cfg, args, &out),
            Precision::Double => cmd_plan::<f64>(&cfg, args, &out),
        },
        Command::Report(args) => cmd_report(args),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::QualityGate { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap already formats help/usage; config-level failures are
            // usage errors by contract.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
