mod archive;
mod bench;
mod selftest;
mod tensor;

use anyhow::{bail, ensure, Context, Result};
use archive::{Archive, Entry};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ivpf::{codec, CodecConfig, CodelengthReport, FlowModel};
use rayon::prelude::*;
use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tensor::Tensor;

#[derive(Parser)]
#[command(name = "ivpf", version, about = "Lossless compression with integer volume-preserving flows")]
struct Cli {
    /// Worker threads for multi-item work (0 = one per core).
    #[arg(long, global = true, env = "IVPF_JOBS")]
    jobs: Option<usize>,
    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Compress IVPT, PGM or PPM files into one archive.
    Compress {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Encode all inputs into one shared stream (sequential, smaller).
        #[arg(long)]
        chain: bool,
        #[command(flatten)]
        codec: CodecFlags,
    },
    /// Restore the original files from an archive.
    Decompress {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output file for a single-item archive, directory otherwise.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the built-in verification suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure encode and decode throughput.
    Bench {
        /// Model file; a generated one is used when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        gen: GenFlags,
        #[arg(long, default_value_t = 32)]
        items: usize,
        #[command(flatten)]
        codec: CodecFlags,
    },
    /// Write a freshly initialized model file.
    Geninit {
        #[command(flatten)]
        gen: GenFlags,
        #[command(flatten)]
        codec: CodecFlags,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct CodecFlags {
    /// Bits per input sample (default: from the model, normally 8).
    #[arg(long)]
    h: Option<u32>,
    /// Fixed-point precision (default: from the model, normally 14).
    #[arg(long)]
    k: Option<u32>,
    /// Auxiliary register width (default: from the model, normally 16).
    #[arg(long = "C")]
    c_bits: Option<u32>,
}

impl CodecFlags {
    fn apply(&self, mut cfg: CodecConfig) -> CodecConfig {
        cfg.h = self.h.unwrap_or(cfg.h);
        cfg.k = self.k.unwrap_or(cfg.k);
        cfg.c_bits = self.c_bits.unwrap_or(cfg.c_bits);
        cfg
    }
}

#[derive(Args)]
struct GenFlags {
    /// Tensor shape, e.g. 32x32x3.
    #[arg(long, default_value = "32x32x3", value_parser = parse_shape)]
    shape: Shape,
    /// Number of (permutation, coupling, 1x1 conv) blocks.
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Move the layers away from the identity start by this much.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
}

impl GenFlags {
    fn build(&self, codec: &CodecFlags) -> Result<FlowModel> {
        let mut model = FlowModel::random_init(self.shape.0.clone(), self.layers, self.levels, self.seed)?;
        if self.perturb > 0.0 {
            model.perturb(self.perturb, self.seed);
        }
        let cfg = codec.apply(CodecConfig::from_model(&model));
        model.defaults.h = cfg.h;
        model.defaults.k = cfg.k;
        model.defaults.c_bits = cfg.c_bits;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Clone)]
struct Shape(Vec<usize>);

fn parse_shape(s: &str) -> Result<Shape, String> {
    s.split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad shape {s:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Shape)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_model(path: &Path) -> Result<FlowModel> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    FlowModel::load(&bytes).with_context(|| format!("loading model {}", path.display()))
}

/// Write through a sibling temporary file so a failed write leaves nothing behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn print_report(format: ReportFormat, name: &str, r: &CodelengthReport) {
    match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v.as_object_mut().unwrap().insert("item".into(), name.into());
            println!("{v}");
        }
        ReportFormat::Text => {
            let container = r.container_bits.map(|b| format!(", container {} bytes", b / 8)).unwrap_or_default();
            println!(
                "{name}: {} dims, {} bits, {:.4} bpd (latents {}, bits-back -{}, register {} = {:.5} bpd){container}",
                r.dims, r.net_bits, r.bpd, r.bits_latent, r.bits_uniform_debited, r.bits_aux_register, r.aux_bpd
            );
        }
    }
}

fn cmd_compress(
    inputs: &[PathBuf],
    model_path: &Path,
    output: &Path,
    chain: bool,
    flags: &CodecFlags,
    format: ReportFormat,
) -> Result<()> {
    let model = load_model(model_path)?;
    let cfg = flags.apply(CodecConfig::from_model(&model));
    cfg.validate_for(&model)?;
    let mut names = HashSet::new();
    for p in inputs {
        let name = p.file_name().and_then(|n| n.to_str()).with_context(|| format!("bad input path {}", p.display()))?;
        ensure!(names.insert(name.to_string()), "two inputs share the file name {name}");
    }
    let tensors: Vec<(Entry, Vec<u8>)> = inputs
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let t = Tensor::parse(&bytes).with_context(|| format!("parsing {}", path.display()))?;
            ensure!(
                t.data.len() == model.input_dim(),
                "{}: shape {:?} has {} values, the model expects {:?}",
                path.display(),
                t.shape,
                t.data.len(),
                model.shape
            );
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            Ok((Entry { name, header: t.header }, t.data))
        })
        .collect::<Result<_>>()?;
    let (entries, data): (Vec<_>, Vec<_>) = tensors.into_iter().unzip();

    let (containers, reports) = if chain {
        let (c, reports) = codec::compress_many(&model, &cfg, &data).context("compressing")?;
        (vec![c], reports)
    } else {
        let pairs: Vec<_> = data
            .par_iter()
            .zip(&entries)
            .map(|(x, e)| codec::compress(&model, &cfg, x).with_context(|| format!("compressing {}", e.name)))
            .collect::<Result<_>>()?;
        pairs.into_iter().unzip()
    };
    let bytes = Archive::new(entries, containers)?.to_bytes()?;
    write_atomic(output, &bytes)?;

    for (name, r) in names_in_order(inputs).iter().zip(&reports) {
        print_report(format, name, r);
    }
    let total = CodelengthReport::total(&reports).unwrap();
    if reports.len() > 1 {
        print_report(format, "total", &total);
    }
    let file_bpd = 8.0 * bytes.len() as f64 / total.dims as f64;
    match format {
        ReportFormat::Json => println!(
            "{}",
            serde_json::json!({"item": "archive", "bytes": bytes.len(), "bpd": file_bpd, "shared_stream": chain})
        ),
        ReportFormat::Text => {
            println!("archive {}: {} bytes, {file_bpd:.4} bpd on disk", output.display(), bytes.len())
        }
    }
    Ok(())
}

fn names_in_order(inputs: &[PathBuf]) -> Vec<String> {
    inputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect()
}

fn cmd_decompress(input: &Path, model_path: &Path, output: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let hash = model.hash();
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let archive = Archive::from_bytes(&bytes).with_context(|| format!("reading archive {}", input.display()))?;
    ensure!(!archive.entries.is_empty(), "archive is empty");
    for e in &archive.entries {
        ensure!(Path::new(&e.name).file_name().is_some_and(|n| n == e.name.as_str()), "unsafe item name {:?}", e.name);
    }
    let decoded: Vec<Vec<Vec<u8>>> = archive
        .containers
        .par_iter()
        .map(|c| codec::decompress_many_with_hash(&model, &hash, c).context("decoding"))
        .collect::<Result<_>>()?;
    let files: Vec<(&str, Vec<u8>)> = archive
        .entries
        .iter()
        .zip(decoded.into_iter().flatten())
        .map(|(e, data)| {
            (e.name.as_str(), Tensor { header: e.header.clone(), shape: model.shape.clone(), data }.to_bytes())
        })
        .collect();
    if let [(_, only)] = &files[..] {
        return write_atomic(output, only);
    }
    fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    for (name, data) in &files {
        write_atomic(&output.join(name), data)?;
    }
    Ok(())
}

fn cmd_selftest(seed: u64, format: ReportFormat) -> Result<()> {
    let reports = selftest::run(seed);
    for r in &reports {
        match format {
            ReportFormat::Json => println!("{}", r.to_json_line()),
            ReportFormat::Text => println!("{}", r.to_text()),
        }
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", reports.len());
    }
    Ok(())
}

fn cmd_bench(
    model: Option<&Path>,
    gen: &GenFlags,
    items: usize,
    flags: &CodecFlags,
    format: ReportFormat,
) -> Result<()> {
    ensure!(items > 0, "need at least one item");
    let model = match model {
        Some(p) => load_model(p)?,
        None => gen.build(flags)?,
    };
    let cfg = flags.apply(CodecConfig::from_model(&model));
    cfg.validate_for(&model)?;
    let r = bench::run(&model, &cfg, items, gen.seed)?;
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string(&r)?),
        ReportFormat::Text => println!("{}", r.to_text()),
    }
    Ok(())
}

fn cmd_geninit(gen: &GenFlags, flags: &CodecFlags, output: &Path, format: ReportFormat) -> Result<()> {
    let model = gen.build(flags)?;
    write_atomic(output, &model.save())?;
    let hash = hex(&model.hash());
    match format {
        ReportFormat::Json => println!(
            "{}",
            serde_json::json!({"model": output.display().to_string(), "shape": model.shape, "layers": model.layers.len(), "sha256": hash})
        ),
        ReportFormat::Text => {
            println!("{}: {} layers, shape {:?}, sha256 {hash}", output.display(), model.layers.len(), model.shape)
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("starting worker pool")?;
    }
    match &cli.cmd {
        Command::Compress { inputs, model, output, chain, codec } => {
            cmd_compress(inputs, model, output, *chain, codec, cli.report)
        }
        Command::Decompress { input, model, output } => cmd_decompress(input, model, output),
        Command::Selftest { seed } => cmd_selftest(*seed, cli.report),
        Command::Bench { model, gen, items, codec } => cmd_bench(model.as_deref(), gen, *items, codec, cli.report),
        Command::Geninit { gen, codec, output } => cmd_geninit(gen, codec, output, cli.report),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
