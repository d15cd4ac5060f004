//! Command-line interface: build, analyze, cost, compare, and train
//! architecture graphs from spec files or built-in presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use gradpath::analysis;
use gradpath::autodiff::write_params;
use gradpath::cost;
use gradpath::graph::{to_dot, unfold, validate, CompGraph};
use gradpath::train::{experiment_manifest, generate, train, TrainConfig};
use gradpath::zoo::{build, preset, preset_names, ArchSpec, StopGradMode};

const EXIT_INPUT: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "gradpath", version, about = "Gradient-path and resource analysis for CNN architecture graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze gradient paths and write a per-layer report.
    Analyze(AnalyzeArgs),
    /// Compute FLOPs, parameters, and memory costs.
    Cost(CostArgs),
    /// Compare the resource costs of two architectures.
    Compare(CompareArgs),
    /// Train at toy scale on a synthetic dataset.
    Train(TrainArgs),
    /// List built-in presets.
    Presets,
    /// Print (or write) a preset's spec file.
    Preset(PresetArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Spec file path or preset:<name>.
    spec: String,
    /// Write the gradient-path report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the graph in DOT form.
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Write the unfolded graph in DOT form.
    #[arg(long)]
    unfold_dump: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    spec: String,
    /// Input shape CxHxW; defaults to the spec's input_shape.
    #[arg(long)]
    input_shape: Option<String>,
    /// Write the per-node cost breakdown as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    spec_a: String,
    spec_b: String,
    #[arg(long)]
    input_shape: Option<String>,
    /// Write the cost ratios as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    spec: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Comma-separated training seeds; one run per seed.
    #[arg(long, default_value = "1")]
    seeds: String,
    #[arg(long, default_value_t = 400)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Seed for the synthetic dataset itself.
    #[arg(long, default_value_t = 1234)]
    data_seed: u64,
    /// Output directory; defaults to $GRADPATH_OUT or the working dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run three variants (no stop, stop on identity, stop on block).
    #[arg(long)]
    stop_grad_ablation: bool,
    /// Save initial parameters as a binary snapshot per run.
    #[arg(long)]
    save_params: bool,
}

#[derive(Args)]
struct PresetArgs {
    name: String,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INPUT, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Train(a) => cmd_train(a),
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(())
        }
        Command::Preset(a) => {
            let spec = preset(&a.name)
                .ok_or_else(|| CliError::input(format!("unknown preset '{}'", a.name)))?;
            match a.out {
                Some(path) => write_atomic(&path, spec.to_text().as_bytes())?,
                None => print!("{}", spec.to_text()),
            }
            Ok(())
        }
    }
}

/// Load a spec from a file or `preset:<name>`.
fn load_spec(arg: &str) -> Result<ArchSpec, CliError> {
    if let Some(name) = arg.strip_prefix("preset:") {
        return preset(name).ok_or_else(|| CliError::input(format!("unknown preset '{name}'")));
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| CliError::input(format!("cannot read spec '{arg}': {e}")))?;
    ArchSpec::parse(&text).map_err(|e| CliError::input(e.to_string()))
}

/// Build and validate; validation failures print every violation and
/// exit 3.
fn build_checked(spec: &ArchSpec) -> Result<CompGraph, CliError> {
    let g = build(spec).map_err(|e| CliError::input(format!("cannot build spec: {e}")))?;
    let result = validate(&g);
    if !result.is_ok() {
        let mut message = String::from("graph validation failed:");
        for v in &result.violations {
            message.push_str(&format!("\n  {v}"));
        }
        return Err(CliError { code: EXIT_VALIDATION, message });
    }
    Ok(g)
}

fn parse_shape(arg: Option<&str>, spec: &ArchSpec) -> Result<(usize, usize, usize), CliError> {
    match arg {
        None => Ok(spec.input_shape),
        Some(s) => {
            let parts: Vec<&str> = s.split('x').collect();
            if parts.len() != 3 {
                return Err(CliError::input(format!("input shape must be CxHxW, got '{s}'")));
            }
            let dim = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| CliError::input(format!("bad dimension '{v}'")))
            };
            Ok((dim(parts[0])?, dim(parts[1])?, dim(parts[2])?))
        }
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let spec = load_spec(&a.spec)?;
    let g = build_checked(&spec)?;
    let unfolded = unfold(&g);
    let report = analysis::analyze(&unfolded);

    let mut outputs = Vec::new();
    if let Some(path) = &a.dot {
        write_atomic(path, to_dot(&g).as_bytes())?;
        outputs.push(path.clone());
    }
    if let Some(path) = &a.unfold_dump {
        write_atomic(path, to_dot(&unfolded).as_bytes())?;
        outputs.push(path.clone());
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
        write_atomic(path, text.as_bytes())?;
        outputs.push(path.clone());
    }
    println!(
        "layers={} max_shortest_path={} longest_path={} total_combinations={}",
        report.layers.len(),
        report.max_shortest_path.map_or("none".into(), |v| v.to_string()),
        report.longest_path.map_or("none".into(), |v| v.to_string()),
        report.total_combinations,
    );
    append_run_manifest(None, "analyze", &spec, None, &[], &outputs)?;
    Ok(())
}

fn cmd_cost(a: CostArgs) -> Result<(), CliError> {
    let spec = load_spec(&a.spec)?;
    let g = build_checked(&spec)?;
    let shape = parse_shape(a.input_shape.as_deref(), &spec)?;
    let report = cost::cost(&g, shape)
        .map_err(|e| CliError::input(format!("cost model rejected input: {e}")))?;
    let mut outputs = Vec::new();
    if let Some(path) = &a.csv {
        write_atomic(path, report.to_csv().as_bytes())?;
        outputs.push(path.clone());
    }
    println!(
        "flops={} params={} memory_peak={} mac={}",
        report.flops, report.params, report.memory_peak, report.mac
    );
    append_run_manifest(None, "cost", &spec, Some(shape), &[], &outputs)?;
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<(), CliError> {
    let spec_a = load_spec(&a.spec_a)?;
    let spec_b = load_spec(&a.spec_b)?;
    let ga = build_checked(&spec_a)?;
    let gb = build_checked(&spec_b)?;
    let shape = parse_shape(a.input_shape.as_deref(), &spec_a)?;
    let ratios = cost::compare(&ga, &gb, shape)
        .map_err(|e| CliError::input(format!("cost model rejected input: {e}")))?;
    let mut outputs = Vec::new();
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&ratios).expect("ratios serialize");
        write_atomic(path, text.as_bytes())?;
        outputs.push(path.clone());
    }
    println!(
        "flops_ratio={:.4} params_ratio={:.4} peak_ratio={:.4}",
        ratios.flops_ratio, ratios.params_ratio, ratios.peak_ratio
    );
    append_run_manifest(None, "compare", &spec_a, Some(shape), &[], &outputs)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let spec = load_spec(&a.spec)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::input(format!("bad seed '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::input("need at least one seed"));
    }
    let out_dir = a
        .out
        .or_else(|| std::env::var_os("GRADPATH_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", out_dir.display())))?;

    let variants: Vec<(String, ArchSpec)> = if a.stop_grad_ablation {
        [
            ("off", StopGradMode::Off),
            ("on_identity", StopGradMode::OnIdentity),
            ("on_block", StopGradMode::OnBlock),
        ]
        .into_iter()
        .map(|(name, mode)| {
            let mut s = spec.clone();
            s.stop_grad = mode;
            (format!("stopgrad_{name}"), s)
        })
        .collect()
    } else {
        vec![("run".to_string(), spec.clone())]
    };

    let dataset = generate(a.data_seed, a.samples, a.classes);
    let mut outputs = Vec::new();
    let mut diverged = false;

    for (variant, vspec) in &variants {
        let g = build_checked(vspec)?;
        for &seed in &seeds {
            let config = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                momentum: a.momentum,
                seed,
            };
            let outcome = train(&g, &dataset, &config)
                .map_err(|e| CliError::input(format!("training failed: {e}")))?;
            diverged |= outcome.diverged;
            let curve_path = out_dir.join(format!("curve_{variant}_seed{seed}.csv"));
            write_atomic(&curve_path, outcome.to_csv().as_bytes())?;
            outputs.push(curve_path);
            let manifest = experiment_manifest(&vspec.to_text(), &config, &g);
            let manifest_path = out_dir.join(format!("experiment_{variant}_seed{seed}.json"));
            write_atomic(
                &manifest_path,
                serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
            )?;
            outputs.push(manifest_path);
            if a.save_params {
                let params = gradpath::autodiff::init_params(&g, seed);
                let snap_path = out_dir.join(format!("params_{variant}_seed{seed}.bin"));
                write_params(&params, &snap_path)
                    .map_err(|e| CliError::input(format!("snapshot failed: {e}")))?;
                outputs.push(snap_path);
            }
            println!(
                "{variant} seed={seed} final_loss={:.6} final_acc={:.4}{}",
                outcome.final_loss,
                outcome.final_accuracy,
                if outcome.diverged { " DIVERGED" } else { "" }
            );
        }
    }

    append_run_manifest(Some(&out_dir), "train", &spec, None, &seeds, &outputs)?;
    if diverged {
        return Err(CliError { code: EXIT_DIVERGED, message: "training diverged".into() });
    }
    Ok(())
}

/// Append one invocation record to `run_manifest.jsonl` in the output
/// directory (or alongside the first output file).
fn append_run_manifest(
    out_dir: Option<&Path>,
    subcommand: &str,
    spec: &ArchSpec,
    input_shape: Option<(usize, usize, usize)>,
    seeds: &[u64],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    if outputs.is_empty() {
        return Ok(());
    }
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => match outputs.first().and_then(|p| p.parent()) {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        },
    };
    let mut digests = BTreeMap::new();
    for path in outputs {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::input(format!("cannot hash {}: {e}", path.display())))?;
        digests.insert(path.display().to_string(), sha256_hex(&bytes));
    }
    let record = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "spec": spec.to_text(),
        "input_shape": input_shape.map(|(c, h, w)| format!("{c}x{h}x{w}")),
        "seeds": seeds,
        "outputs": digests,
    });
    let line = format!("{record}\n");
    let manifest = dir.join("run_manifest.jsonl");
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", manifest.display())))?;
    f.write_all(line.as_bytes())
        .map_err(|e| CliError::input(format!("cannot write manifest: {e}")))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write via a temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::input(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::input(format!("cannot move into place {}: {e}", path.display())))?;
    Ok(())
}
