use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use unipatch::checkpoint::derive_seed;
use unipatch::encoder::EncoderConfig;
use unipatch::error::{Error, Result, StageContext};
use unipatch::io;
use unipatch::pipeline::{self, Model, PipelineConfig, PipelineReport};
use unipatch::synth::{self, SynthSpec};
use unipatch::tokred::MergeMode;
use unipatch::verify::Harness;
use unipatch::vistream::SourceKind;

/// Exit code when verification ran but a property failed.
const VERIFY_FAILED: u8 = 1;

/// Stream of the synthetic corpus noise, next to the model streams.
const SYNTH_STREAM: u64 = 4;

#[derive(Parser, Debug)]
#[command(name = "unipatch", version, about = "Visual token budgets for images, volumes and video")]
#[command(args_conflicts_with_subcommands = true, allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Image (.pgm), volume (.raw with .json sidecar) or frame directory.
    #[arg(long)]
    input: Option<PathBuf>,

    /// Run on every path matching this pattern, in parallel; reports go to --out.
    #[arg(long, conflicts_with = "input")]
    glob: Option<String>,

    #[arg(long, value_parser = parse_kind)]
    kind: Option<SourceKind>,

    #[arg(long, default_value_t = 0.1)]
    tau: f64,

    #[arg(long, default_value_t = 16)]
    patch: usize,

    /// Keep every N-th frame or slice.
    #[arg(long, default_value_t = 1)]
    stride: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Report file, batch report directory, or synthetic corpus destination.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Sweep pruning thresholds, e.g. `0,0.05,0.1,0.5`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    bench_tau: Option<Vec<f64>>,

    /// Write a calibrated corpus: `kind:redundancy:planes:HxW`.
    #[arg(long, value_parser = parse_synth)]
    gen_synthetic: Option<SynthSpec>,

    /// Encoder size as `layers,d_model,heads`.
    #[arg(long, value_parser = parse_desk, default_value = "2,8,2")]
    desk_config: EncoderConfig,

    /// 2×2 merge: auto (volumes and videos), on, off.
    #[arg(long, value_parser = parse_merge, default_value = "auto")]
    merge: MergeMode,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the property suites and print a JSON summary.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        suite: Option<String>,
    },
}

fn parse_kind(s: &str) -> Result<SourceKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_merge(s: &str) -> Result<MergeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_synth(s: &str) -> Result<SynthSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_desk(s: &str) -> Result<EncoderConfig, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("`{s}`: {e}"))?;
    let [layers, d_model, heads] = parts[..] else {
        return Err(format!("`{s}` is not layers,d_model,heads"));
    };
    Ok(EncoderConfig::desk(layers, d_model, heads))
}

impl Cli {
    fn pipeline_config(&self, input: &Path) -> Result<PipelineConfig> {
        let kind = self
            .kind
            .ok_or_else(|| Error::Config("--kind is required with --input or --glob".into()))?;
        let mut config = PipelineConfig::new(input, kind);
        config.tau = self.tau;
        config.patch = self.patch;
        config.stride = self.stride;
        config.seed = self.seed;
        config.encoder = self.desk_config;
        config.merge = self.merge;
        config.validate()?;
        Ok(config)
    }
}

fn emit(json: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, format!("{json}\n")).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{json}").map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("UNIPATCH_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("UNIPATCH_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))
}

fn gen_synthetic(cli: &Cli, spec: &SynthSpec) -> Result<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--gen-synthetic needs --out".into()))?;
    let mut config = PipelineConfig::new(out, spec.kind);
    config.patch = cli.patch;
    config.tau = cli.tau;
    config.seed = cli.seed;
    config.encoder = cli.desk_config;
    let model = Model::init(&config)?;
    synth::gen_synthetic(
        spec,
        &model.encoder.patch_w,
        config.patch,
        config.tau,
        derive_seed(config.seed, SYNTH_STREAM),
        out,
    )
    .stage("gen-synthetic")?;
    let summary = serde_json::json!({
        "written": out,
        "kind": spec.kind,
        "planes": spec.planes,
        "dims": [spec.height, spec.width],
        "sites_per_plane": spec.sites(config.patch),
        "expected_rate": spec.expected_rate(config.patch),
        "seed": config.seed,
    });
    emit(&serde_json::to_string_pretty(&summary)?, None)
}

fn bench(cli: &Cli, input: &Path, grid: &[f64]) -> Result<()> {
    let config = cli.pipeline_config(input)?;
    let loaded = io::load_input(input, config.kind).stage("load")?;
    let model = Model::init(&config)?;
    let rows = pipeline::bench_tau(&loaded, &config, &model, grid).stage("bench-tau")?;
    let table = serde_json::json!({
        "input": input,
        "input_kind": config.kind,
        "seed": config.seed,
        "rows": rows,
    });
    emit(&serde_json::to_string_pretty(&table)?, cli.out.as_deref())
}

fn batch(cli: &Cli, pattern: &str) -> Result<()> {
    let out_dir = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--glob needs --out DIR for per-file reports".into()))?;
    let mut inputs: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::Config(format!("bad glob `{pattern}`: {e}")))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::io(e.path().to_path_buf(), e.into()))?;
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Empty("no inputs matched --glob"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<(PathBuf, Result<PipelineReport>)> = inputs
        .par_iter()
        .map(|input| {
            let result = cli.pipeline_config(input).and_then(|c| pipeline::run_pipeline(&c));
            (input.clone(), result)
        })
        .collect();
    let mut first_error = None;
    let mut index = Vec::new();
    for (input, result) in results {
        let stem = input.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
        match result {
            Ok(report) => {
                let path = out_dir.join(format!("{stem}.json"));
                emit(&serde_json::to_string_pretty(&report)?, Some(&path))?;
                index.push(serde_json::json!({"input": input, "report": path, "ok": true}));
            }
            Err(e) => {
                eprintln!("error: {}: {e}", input.display());
                index.push(serde_json::json!({"input": input, "ok": false, "error": e.to_string()}));
                first_error.get_or_insert(e);
            }
        }
    }
    emit(&serde_json::to_string_pretty(&index)?, None)?;
    first_error.map_or(Ok(()), Err)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    configure_threads()?;
    if let Some(Command::Verify { seed, suite }) = &cli.command {
        let summary = Harness::new(*seed).run(suite.as_deref())?;
        emit(&serde_json::to_string_pretty(&summary)?, None)?;
        for s in &summary.suites {
            let failed: usize = s.properties.iter().map(|p| p.failures).sum();
            eprintln!(
                "{:<10} {:>3} properties {:>6} trials {:>5} failures",
                s.name,
                s.properties.len(),
                s.properties.iter().map(|p| p.trials).sum::<usize>(),
                failed
            );
        }
        return Ok(if summary.passed {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(VERIFY_FAILED)
        });
    }
    if let Some(spec) = &cli.gen_synthetic {
        gen_synthetic(cli, spec)?;
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(pattern) = &cli.glob {
        batch(cli, pattern)?;
        return Ok(ExitCode::SUCCESS);
    }
    let input = cli
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("one of --input, --glob, --gen-synthetic or `verify` is required".into()))?;
    if let Some(grid) = &cli.bench_tau {
        bench(cli, input, grid)?;
        return Ok(ExitCode::SUCCESS);
    }
    let report = pipeline::run_pipeline(&cli.pipeline_config(input)?)?;
    emit(&serde_json::to_string_pretty(&report)?, cli.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
