//! `lwdet` command line: graph summaries, fusion, inference, evaluation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lwdet::detect::{annotate, detect, detections_to_json, read_ppm, write_ppm, DEFAULT_CONF, DEFAULT_IOU, INPUT_SIZE};
use lwdet::eval::{load_dataset, run_eval};
use lwdet::init::{random_tensor, rng};
use lwdet::io::atomic_write;
use lwdet::model::{summarize, ModelSummary};
use lwdet::reference::selftest;
use lwdet::{build_model, Error, Network, Variant, WeightStore};

/// Fused and unfused head maps may differ by at most this much under `fuse --verify`.
const VERIFY_LIMIT: f32 = 1e-3;
const VERIFY_INPUTS: u64 = 5;
/// Evaluation keeps low-confidence boxes so the ranked list covers the whole PR curve.
const EVAL_CONF: f64 = 0.001;

#[derive(Parser)]
#[command(name = "lwdet", version, about = "Lightweight shrimp disease detector toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-node table of output shapes, parameters and MACs at 640x640.
    Summarize {
        #[arg(long)]
        model: Variant,
        #[arg(long, default_value_t = 3, value_parser = class_count)]
        nc: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Baseline vs improved totals and the parameter reduction.
    Compare {
        #[arg(long, default_value_t = 3, value_parser = class_count)]
        nc: usize,
    },
    /// Collapses every reparameterizable block into its inference form.
    Fuse {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Compare fused and unfused head maps on seeded random inputs.
        #[arg(long)]
        verify: bool,
    },
    /// Detects objects in a binary PPM image and prints them as JSON.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        /// Write a copy of the image with boxes drawn.
        #[arg(long)]
        annotate: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CONF, value_parser = unit_interval)]
        conf: f64,
        #[arg(long, default_value_t = DEFAULT_IOU, value_parser = unit_interval)]
        iou: f64,
    },
    /// Scores a model against a labelled manifest (mAP@0.5, P, R).
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = EVAL_CONF, value_parser = unit_interval)]
        conf: f64,
        #[arg(long, default_value_t = DEFAULT_IOU, value_parser = unit_interval)]
        iou: f64,
        /// Count only detections at or above this score for P and R.
        #[arg(long, value_parser = unit_interval)]
        score_cutoff: Option<f64>,
    },
    /// Runs the embedded fusion, conv and AP oracle suites.
    Selftest,
}

#[derive(clap::Args)]
struct ModelArgs {
    #[arg(long)]
    model: Variant,
    /// Weight container; seeded random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Class count; `eval` defaults to the manifest's.
    #[arg(long, value_parser = class_count)]
    nc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn class_count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) => 1,
            ref e if e.is_io() => 2,
            _ => 3,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Summarize { model, nc, csv } => {
            let s = summarize(&build_model(model, nc)?, (INPUT_SIZE, INPUT_SIZE))?;
            emit(&summary_table(&s))?;
            if let Some(path) = csv {
                write_file(&path, summary_csv(&s).as_bytes())?;
            }
        }
        Cmd::Compare { nc } => emit(&compare(nc)?)?,
        Cmd::Fuse { model, out, verify } => {
            let net = load_network(&model, None)?;
            let fused = net.fuse()?;
            if verify {
                let dev = max_deviation(&net, &fused, model.seed)?;
                emit(&format!("max head deviation over {VERIFY_INPUTS} inputs: {dev:.3e}\n"))?;
                if dev >= VERIFY_LIMIT {
                    return Err(Failure {
                        code: 3,
                        msg: format!("fused graph deviates by {dev:.3e}, limit {VERIFY_LIMIT:.0e}"),
                    });
                }
            }
            fused.to_store().save(&out).map_err(|e| with_path(&out, e))?;
            emit(&format!("wrote {} ({} tensors)\n", out.display(), fused.to_store().len()))?;
        }
        Cmd::Infer { model, image, annotate: annotated, conf, iou } => {
            let img = read_ppm(&image).map_err(|e| with_path(&image, e))?;
            let net = load_network(&model, None)?;
            let dets = detect(&net, &img, conf, iou, &[])?;
            if let Some(path) = annotated {
                write_ppm(&path, &annotate(&img, &dets)).map_err(|e| with_path(&path, e))?;
            }
            emit(&format!("{}\n", detections_to_json(&dets)))?;
        }
        Cmd::Eval { model, manifest, out, csv, conf, iou, score_cutoff } => {
            let ds = load_dataset(&manifest).map_err(|e| with_path(&manifest, e))?;
            let net = load_network(&model, Some(ds.classes.len()))?;
            let report = run_eval(&net, &ds, conf, iou, score_cutoff)?;
            let json = report.to_json();
            match out {
                Some(path) => write_file(&path, format!("{json}\n").as_bytes())?,
                None => emit(&format!("{json}\n"))?,
            }
            if let Some(path) = csv {
                write_file(&path, report.to_csv().as_bytes())?;
            }
        }
        Cmd::Selftest => {
            let results = selftest();
            for r in &results {
                emit(&format!("{} {}: {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure {
                    code: 3,
                    msg: format!("{failed} of {} suites failed", results.len()),
                });
            }
        }
    }
    Ok(())
}

/// Prefixes I/O errors with the offending path unless the message already
/// names it.
fn with_path(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    let shown = path.display().to_string();
    if f.code == 2 && !f.msg.contains(&shown) {
        f.msg = format!("{shown}: {}", f.msg);
    }
    f
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure {
            code: 2,
            msg: format!("stdout: {e}"),
        }),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    atomic_write(path, bytes).map_err(|e| with_path(path, e))
}

fn load_network(args: &ModelArgs, dataset_nc: Option<usize>) -> CliResult<Network> {
    let nc = match (args.nc, dataset_nc) {
        (Some(n), Some(d)) if n != d => {
            return Err(Failure {
                code: 3,
                msg: format!("--nc {n} but the manifest lists {d} classes"),
            })
        }
        (Some(n), _) => n,
        (None, Some(d)) => d,
        (None, None) => 3,
    };
    match &args.weights {
        Some(path) => {
            let store = WeightStore::load(path).map_err(|e| with_path(path, e))?;
            Ok(Network::from_store_any_form(args.model, nc, &store)?)
        }
        None => Ok(Network::seeded(&build_model(args.model, nc)?, args.seed)?),
    }
}

fn max_deviation(net: &Network, fused: &Network, seed: u64) -> CliResult<f32> {
    let mut worst = 0.0f32;
    for k in 0..VERIFY_INPUTS {
        let x = random_tensor([1, 3, INPUT_SIZE, INPUT_SIZE], 0.0, 1.0, &mut rng(seed.wrapping_add(k)));
        let (a, b) = (net.forward(&x)?, fused.forward(&x)?);
        for (p, q) in a.iter().zip(&b) {
            worst = worst.max(p.max_abs_diff(q));
        }
    }
    Ok(worst)
}

fn shape_text(dims: &[[usize; 4]]) -> String {
    dims.iter()
        .map(|d| format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3]))
        .collect::<Vec<_>>()
        .join(";")
}

fn summary_table(s: &ModelSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{} model at {}x{}", s.variant, s.input_hw.0, s.input_hw.1);
    let _ = writeln!(t, "{:<10} {:<17} {:<32} {:>10} {:>14}", "name", "kind", "output", "params", "MACs");
    for n in &s.nodes {
        let _ = writeln!(
            t,
            "{:<10} {:<17} {:<32} {:>10} {:>14}",
            n.name,
            n.kind,
            shape_text(&n.out_dims),
            n.params,
            n.macs
        );
    }
    let _ = writeln!(
        t,
        "total: {} params, {} MACs, {:.2} GFLOPs",
        s.total_params(),
        s.total_macs(),
        s.total_flops() as f64 / 1e9
    );
    t
}

fn summary_csv(s: &ModelSummary) -> String {
    let mut t = String::from("name,kind,output,params,macs\n");
    for n in &s.nodes {
        let _ = writeln!(t, "{},{},{},{},{}", n.name, n.kind, shape_text(&n.out_dims), n.params, n.macs);
    }
    let _ = writeln!(t, "total,,,{},{}", s.total_params(), s.total_macs());
    t
}

fn compare(nc: usize) -> CliResult<String> {
    let hw = (INPUT_SIZE, INPUT_SIZE);
    let base = summarize(&build_model(Variant::Baseline, nc)?, hw)?;
    let imp = summarize(&build_model(Variant::Improved, nc)?, hw)?;
    let (bp, ip) = (base.total_params(), imp.total_params());
    let mut t = String::new();
    let _ = writeln!(t, "{:<10} {:>10} {:>10}", "model", "params", "GFLOPs");
    for s in [&base, &imp] {
        let _ = writeln!(
            t,
            "{:<10} {:>10} {:>10.2}",
            s.variant.to_string(),
            s.total_params(),
            s.total_flops() as f64 / 1e9
        );
    }
    let _ = writeln!(t, "parameter reduction: {:.2}%", 100.0 * (bp as f64 - ip as f64) / bp as f64);
    Ok(t)
}
