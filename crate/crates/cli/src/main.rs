use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use chanprune::analysis::{evaluate_topk, report, sensitivity_sweep};
use chanprune::archs::{self, WeightInit};
use chanprune::dataset::{teacher_labels, Dataset};
use chanprune::fixtures;
use chanprune::graph::{count_flops, load_model, save_model, Graph};
use chanprune::prune::{
    log_to_jsonl, prune_pipeline, prune_resnet_backward, Direction, PlanEntry, PrunePlan,
};
use chanprune::sampling::SampleConfig;
use chanprune::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_ENGINE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "chanprune",
    version,
    about = "Prune input channels of CNN convolutions"
)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer and total FLOPs (1 multiply-accumulate = 1 FLOP).
    Flops {
        #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
        model: Option<PathBuf>,
        /// Use a built-in architecture instead of a model file.
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        /// Input shape as H,W,C; defaults to the model's own.
        #[arg(long, value_parser = parse_shape)]
        input: Option<[usize; 3]>,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Prune a model according to a plan and write the result.
    Prune(RunArgs),
    /// Sweep the pruned fraction of one layer and record residual/accuracy.
    Sweep(RunArgs),
    /// Top-k accuracy of a model on a labeled dataset directory.
    Eval(RunArgs),
    /// Write a built-in architecture or fixture (model, datasets, config).
    Init {
        #[arg(long, value_enum)]
        arch: Arch,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write all-zero weights (architectures only).
        #[arg(long)]
        zeros: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Vgg16,
    Resnet50,
    TinyCnn,
    DuplicateChannel,
    PlantedRedundancy,
    MiniResnet,
}

#[derive(clap::Args, Default)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration dataset directory.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Labeled evaluation dataset directory.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: Option<PathBuf>,
    #[serde(default)]
    calib: Option<PathBuf>,
    #[serde(default)]
    eval: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    samples: Option<usize>,
    #[serde(default)]
    max_per_image: Option<usize>,
    #[serde(default)]
    source_weights: Option<(f64, f64)>,
    #[serde(default)]
    repeats: Option<usize>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    direction: Option<Direction>,
    #[serde(default)]
    plan: Option<Vec<PlanEntry>>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    fractions: Option<Vec<f64>>,
    #[serde(default)]
    topk: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Model(String),
    Engine(String),
}

impl Failure {
    fn model(e: Error) -> Self {
        match e {
            Error::Validation(v) => Failure::Model(
                std::iter::once(format!(
                    "model failed validation ({} violation(s)):",
                    v.len()
                ))
                .chain(v.iter().map(|x| format!("  {x}")))
                .collect::<Vec<_>>()
                .join("\n"),
            ),
            e => Failure::Model(e.to_string()),
        }
    }

    fn engine(e: Error) -> Self {
        Failure::Engine(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn read_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("bad config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if args.$f.is_some() { cfg.$f = args.$f.clone(); } )* };
    }
    over!(model, calib, eval, seed, samples, repeats, out, target, fractions, topk);
    Ok(cfg)
}

fn need<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
    v.as_ref()
        .ok_or_else(|| Failure::Config(format!("`{name}` is required (flag or config field)")))
}

fn sample_config(cfg: &RunConfig) -> SampleConfig {
    let mut s = SampleConfig::with_seed(cfg.seed.unwrap_or(0));
    s.n_samples = cfg.samples;
    s.max_per_image = cfg.max_per_image;
    if let Some(w) = cfg.source_weights {
        s.source_weights = w;
    }
    s
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .map_err(|e| Failure::Engine(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> CmdResult {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write(&out.join("resolved_config.json"), text)
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::load(dir).map_err(|e| Failure::Model(format!("dataset {}: {e}", dir.display())))
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|e| format!("{d:?}: {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into()
        .map_err(|d: Vec<usize>| format!("expected H,W,C, got {} value(s)", d.len()))
}

fn cmd_flops(
    model: Option<PathBuf>,
    arch: Option<Arch>,
    input: Option<[usize; 3]>,
    json: bool,
) -> CmdResult {
    let graph = match (model, arch) {
        (Some(p), _) => load_model(&p).map_err(Failure::model)?,
        (None, Some(a)) => build_arch(a, WeightInit::Zeros),
        (None, None) => return Err(Failure::Config("give --model or --arch".into())),
    };
    let shape = input.unwrap_or(graph.input_shape);
    let r = count_flops(&graph, shape).map_err(Failure::model)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&r).expect("report serializes")
        );
        return Ok(());
    }
    println!(
        "{:<24} {:<15} {:>16} {:>16}",
        "layer", "kind", "output", "FLOPs"
    );
    for l in &r.layers {
        let shape = l
            .output_shape
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x");
        println!("{:<24} {:<15} {:>16} {:>16}", l.id, l.kind, shape, l.flops);
    }
    println!(
        "total: {} ({} FLOPs, {} params, {} minor ops)",
        r.total_billions(),
        r.total,
        r.params,
        r.minor_total
    );
    Ok(())
}

fn cmd_prune(args: RunArgs) -> CmdResult {
    let mut cfg = read_config(&args)?;
    let model_path = need(&cfg.model, "model")?.clone();
    let graph = load_model(&model_path).map_err(Failure::model)?;
    let direction = cfg.direction.unwrap_or(if graph.has_units() {
        Direction::BackwardResnet
    } else {
        Direction::ForwardPipeline
    });
    cfg.direction = Some(direction);
    let plan = PrunePlan {
        direction,
        targets: cfg.plan.clone().unwrap_or_default(),
    };
    cfg.plan = Some(plan.targets.clone());
    let needs_calib = plan
        .targets
        .iter()
        .any(|t| t.m != Some(0) && t.keep_fraction != Some(1.0));
    let calib = match &cfg.calib {
        Some(d) => load_dataset(d)?.items,
        None if needs_calib => return Err(Failure::Config("`calib` is required".into())),
        None => Vec::new(),
    };
    let out = out_dir(&cfg)?;
    cfg.seed = Some(cfg.seed.unwrap_or(0));
    write_resolved(&out, &cfg)?;

    let sc = sample_config(&cfg);
    let result = match direction {
        Direction::ForwardPipeline => prune_pipeline(&graph, &plan, &calib, &sc),
        Direction::BackwardResnet => prune_resnet_backward(&graph, &plan, &calib, &sc),
    };
    let log_path = out.join("prune_log.jsonl");
    let mut run = match result {
        Ok(run) => run,
        Err(abort) => {
            write(&log_path, log_to_jsonl(&abort.log))?;
            return Err(Failure::Engine(abort.to_string()));
        }
    };
    write(&log_path, log_to_jsonl(&run.log))?;
    run.graph.name = format!("{}-pruned", graph.name);
    let model_out = out.join(format!("{}.json", run.graph.name));
    save_model(&run.graph, &model_out).map_err(Failure::engine)?;

    let evalset = cfg.eval.as_deref().map(load_dataset).transpose()?;
    let cmp = report(&graph, &run.graph, evalset.as_ref()).map_err(Failure::engine)?;
    write(&out.join("report.json"), cmp.to_json())?;
    write(&out.join("report.csv"), cmp.to_csv())?;
    print!("{}", cmp.to_text());
    println!("wrote {}", model_out.display());
    Ok(())
}

fn cmd_sweep(args: RunArgs) -> CmdResult {
    let mut cfg = read_config(&args)?;
    let graph = load_model(need(&cfg.model, "model")?).map_err(Failure::model)?;
    let target = need(&cfg.target, "target")?.clone();
    let fractions = need(&cfg.fractions, "fractions")?.clone();
    let calib = load_dataset(need(&cfg.calib, "calib")?)?.items;
    let evalset = load_dataset(need(&cfg.eval, "eval")?)?;
    cfg.repeats = Some(cfg.repeats.unwrap_or(3));
    cfg.seed = Some(cfg.seed.unwrap_or(0));
    let out = out_dir(&cfg)?;
    write_resolved(&out, &cfg)?;
    let r = sensitivity_sweep(
        &graph,
        &target,
        &fractions,
        cfg.repeats.expect("set above"),
        &calib,
        &evalset,
        &sample_config(&cfg),
    )
    .map_err(|e| match e {
        Error::Argument(_) | Error::UnknownLayer(_) => Failure::Config(e.to_string()),
        e => Failure::engine(e),
    })?;
    write(&out.join("sweep.csv"), r.to_csv())?;
    write(&out.join("sweep.json"), r.to_json())?;
    println!(
        "{:>9} {:>4} {:>12} {:>8} {:>8} {:>14}",
        "fraction", "m", "residual", "top1", "top5", "FLOPs"
    );
    for m in &r.means {
        println!(
            "{:>9.3} {:>4} {:>12.4e} {:>8.4} {:>8.4} {:>14}",
            m.fraction, m.m, m.residual, m.top1, m.top5, m.flops
        );
    }
    Ok(())
}

fn cmd_eval(args: RunArgs) -> CmdResult {
    let cfg = read_config(&args)?;
    let graph = load_model(need(&cfg.model, "model")?).map_err(Failure::model)?;
    let data = load_dataset(need(&cfg.eval, "eval")?)?;
    let k = cfg.topk.unwrap_or(1);
    if k == 0 {
        return Err(Failure::Config("topk must be at least 1".into()));
    }
    let acc = evaluate_topk(&graph, &data, k).map_err(Failure::engine)?;
    println!("top-{k} accuracy: {acc:.4} ({} items)", data.len());
    Ok(())
}

fn build_arch(arch: Arch, init: WeightInit) -> Graph {
    let seed = match init {
        WeightInit::Random { seed } => seed,
        WeightInit::Zeros => 0,
    };
    match arch {
        Arch::Vgg16 => archs::vgg16(init),
        Arch::Resnet50 => archs::resnet50(init, 1),
        Arch::TinyCnn => fixtures::tiny_cnn(seed),
        Arch::DuplicateChannel => fixtures::duplicate_channel_net(seed, 2.0),
        Arch::PlantedRedundancy => fixtures::planted_redundancy_net(seed),
        Arch::MiniResnet => fixtures::mini_resnet(seed),
    }
}

fn cmd_init(arch: Arch, out: PathBuf, seed: u64, zeros: bool) -> CmdResult {
    let init = if zeros {
        WeightInit::Zeros
    } else {
        WeightInit::Random { seed }
    };
    let graph = build_arch(arch, init);
    fs::create_dir_all(&out)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", out.display())))?;
    let model = out.join(format!("{}.json", graph.name));
    save_model(&graph, &model).map_err(Failure::engine)?;
    println!("wrote {}", model.display());
    if matches!(arch, Arch::Vgg16 | Arch::Resnet50) {
        return Ok(());
    }

    // Fixtures also get calibration/evaluation data and a starter config.
    let calib = fixtures::random_inputs(graph.input_shape, 32, seed.wrapping_add(10_000));
    Dataset::unlabeled(calib)
        .save(out.join("calib"))
        .map_err(Failure::engine)?;
    let items = fixtures::random_inputs(graph.input_shape, 100, seed.wrapping_add(20_000));
    let labels = teacher_labels(&graph, &items).map_err(Failure::engine)?;
    Dataset::labeled(items, labels)
        .and_then(|d| d.save(out.join("eval")))
        .map_err(Failure::engine)?;
    let (direction, plan, target) = if graph.has_units() {
        (
            Direction::BackwardResnet,
            vec![
                PlanEntry::keep("unit2", 0.75),
                PlanEntry::keep("unit3", 0.5),
            ],
            "unit2/conv2",
        )
    } else {
        (
            Direction::ForwardPipeline,
            vec![PlanEntry::prune("conv2", 1)],
            "conv2",
        )
    };
    let cfg = RunConfig {
        model: Some(model),
        calib: Some(out.join("calib")),
        eval: Some(out.join("eval")),
        seed: Some(seed),
        samples: Some(2000),
        repeats: Some(3),
        out: Some(out.join("run")),
        direction: Some(direction),
        plan: Some(plan),
        target: Some(target.into()),
        fractions: Some(vec![0.0, 0.25, 0.5, 0.75]),
        topk: Some(1),
        ..RunConfig::default()
    };
    let path = out.join("config.json");
    write(
        &path,
        serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::Flops {
            model,
            arch,
            input,
            json,
        } => cmd_flops(model, arch, input, json),
        Command::Prune(a) => cmd_prune(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Init {
            arch,
            out,
            seed,
            zeros,
        } => cmd_init(arch, out, seed, zeros),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Config(m) => (EXIT_CONFIG, m),
                Failure::Model(m) => (EXIT_MODEL, m),
                Failure::Engine(m) => (EXIT_ENGINE, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("224,224,3"), Ok([224, 224, 3]));
        assert_eq!(parse_shape(" 8, 8 ,1"), Ok([8, 8, 1]));
        assert!(parse_shape("8,8").is_err());
        assert!(parse_shape("8,x,3").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "samples": 100, "target": "conv2"}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            seed: Some(9),
            ..RunArgs::default()
        };
        let cfg = read_config(&args).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.samples, Some(100));
        assert_eq!(cfg.target.as_deref(), Some("conv2"));
        assert_eq!(sample_config(&cfg).n_samples, Some(100));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seeds": 4}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            ..RunArgs::default()
        };
        assert!(matches!(read_config(&args), Err(Failure::Config(_))));
    }
}
