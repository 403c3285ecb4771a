//! Command-line front end. [`run`] is the whole program; `main` only binds
//! it to the process streams.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pvtv2::analytics::{self, CostReport};
use pvtv2::io::{load_weights, parse_config, WeightStore};
use pvtv2::nn::Module;
use pvtv2::{config_for_name, gradcheck, oracle, AttentionKind, DType, ModelConfig, PvtModel, Scalar, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "pvtv2",
    version,
    about = "Pyramid vision transformer v2: structure, cost and verification tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Built-in variant: B0, B1, B2, B2-Li, B3, B4, B5
    #[arg(long, conflicts_with = "config")]
    variant: Option<String>,
    /// Model config file
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-stage hyperparameters and parameter count
    Describe(ModelSource),
    /// Per-layer parameters and multiply-accumulates at one input size
    Cost {
        #[command(flatten)]
        model: ModelSource,
        /// Input size, `N` or `HxW`
        #[arg(long, default_value = "224")]
        size: String,
        /// Also write the report as CSV (`-` for standard output)
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// MAC totals over several input sizes
    Sweep {
        /// Comma-separated variants
        #[arg(long, value_delimiter = ',', default_value = "B2,B2-Li")]
        variant: Vec<String>,
        /// Comma-separated square input sizes
        #[arg(long, value_delimiter = ',', default_value = "224,448,672,896")]
        sizes: Vec<usize>,
        /// Also write the table as CSV (`-` for standard output)
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient check in 64-bit
    Gradcheck {
        /// Check the two-stage micro model at 16x16 (the only model this command checks)
        #[arg(long)]
        micro: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
    },
    /// Forward pass on a seeded random image
    Infer {
        #[command(flatten)]
        model: ModelSource,
        /// Weight file; without it, weights are initialized from --seed
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "224")]
        input_size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare kernels with naive-loop references
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomized cases per family
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
}

type CmdResult = Result<bool, String>;

/// Parses `args` (program name first) and runs one command. Returns the
/// process exit code: 0 success, 1 operational failure, 2 usage error.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let mut buf = String::new();
    let result = dispatch(cli.command, &mut buf);
    let _ = out.write_all(buf.as_bytes());
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut String) -> CmdResult {
    match cmd {
        Command::Describe(src) => describe(&load_model_config(&src)?, out),
        Command::Cost { model, size, csv } => cost(&load_model_config(&model)?, &size, csv.as_deref(), out),
        Command::Sweep { variant, sizes, csv } => sweep(&variant, &sizes, csv.as_deref(), out),
        Command::Gradcheck { micro, seed, tol } => run_gradcheck(micro, seed, tol, out),
        Command::Infer {
            model,
            weights,
            input_size,
            seed,
        } => infer(&load_model_config(&model)?, weights.as_deref(), &input_size, seed, out),
        Command::Oracle { seed, cases } => run_oracle(seed, cases, out),
    }
}

macro_rules! line {
    ($out:expr, $($arg:tt)*) => {{
        use std::fmt::Write as _;
        let _ = writeln!($out, $($arg)*);
    }};
}

fn load_model_config(src: &ModelSource) -> Result<ModelConfig, String> {
    match (&src.variant, &src.config) {
        (Some(v), None) => config_for_name(v).map_err(|e| e.to_string()),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
        }
        _ => Err("one of --variant or --config is required".into()),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid input size `{s}` (expected N or HxW)"))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn write_csv(path: &Path, csv: &str, out: &mut String) -> Result<(), String> {
    if path == Path::new("-") {
        out.push_str(csv);
        Ok(())
    } else {
        fs::write(path, csv).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn megas(n: u64) -> f64 {
    n as f64 / 1e6
}

fn gigas(n: u64) -> f64 {
    n as f64 / 1e9
}

fn describe(cfg: &ModelConfig, out: &mut String) -> CmdResult {
    let params = analytics::count_params(cfg).map_err(|e| e.to_string())?;
    line!(out, "model {}", cfg.name);
    line!(
        out,
        "overlapping patch embed = {}, conv ffn = {}, pool refine = {}",
        cfg.overlapping_patch_embed,
        cfg.conv_ffn,
        cfg.pool_refine
    );
    let mut stride = 1;
    for (i, s) in cfg.stages.iter().enumerate() {
        let n = i + 1;
        stride *= s.stride;
        let attn = match s.attn {
            AttentionKind::Sra { reduction_ratio } => format!("R_{n} = {reduction_ratio}"),
            AttentionKind::LinearSra { pool_size } => format!("P_{n} = {pool_size}"),
        };
        line!(
            out,
            "stage {n} (H/{stride} x W/{stride}): S_{n} = {}, C_{n} = {}, L_{n} = {}, {attn}, N_{n} = {}, E_{n} = {}",
            s.stride,
            s.channels,
            s.depth,
            s.heads,
            s.expansion
        );
    }
    line!(out, "num classes = {}", cfg.num_classes);
    line!(out, "total params = {params} ({:.2} M)", megas(params));
    Ok(true)
}

fn cost(cfg: &ModelConfig, size: &str, csv: Option<&Path>, out: &mut String) -> CmdResult {
    let (h, w) = parse_size(size)?;
    let report: CostReport = analytics::cost_report(cfg, h, w).map_err(|e| e.to_string())?;
    line!(out, "model {}", cfg.name);
    out.push_str(&report.render_text());
    if let Some(path) = csv {
        write_csv(path, &report.to_csv(), out)?;
    }
    Ok(true)
}

fn sweep(variants: &[String], sizes: &[usize], csv: Option<&Path>, out: &mut String) -> CmdResult {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err("--sizes needs one or more positive sizes".into());
    }
    let square: Vec<_> = sizes.iter().map(|&s| (s, s)).collect();
    let mut table = String::from("variant,size,total_macs,attention_core_macs\n");
    line!(
        out,
        "{:<8} {:>6} {:>16} {:>8} {:>16} {:>8}",
        "variant",
        "size",
        "total macs",
        "growth",
        "attn core macs",
        "growth"
    );
    for v in variants {
        let cfg = config_for_name(v).map_err(|e| e.to_string())?;
        let rows = analytics::sweep_macs(&cfg, &square).map_err(|e| e.to_string())?;
        for (i, r) in rows.iter().enumerate() {
            let growth = |now: u64, prev: u64| {
                if i == 0 {
                    "-".to_string()
                } else {
                    format!("{:.3}", now as f64 / prev as f64)
                }
            };
            let prev = &rows[i.saturating_sub(1)];
            line!(
                out,
                "{:<8} {:>6} {:>16} {:>8} {:>16} {:>8}",
                cfg.name,
                r.size.0,
                r.total_macs,
                growth(r.total_macs, prev.total_macs),
                r.attention_core_macs,
                growth(r.attention_core_macs, prev.attention_core_macs)
            );
            use std::fmt::Write as _;
            let _ = writeln!(
                table,
                "{},{},{},{}",
                cfg.name, r.size.0, r.total_macs, r.attention_core_macs
            );
        }
        let (first, last) = (&rows[0], &rows[rows.len() - 1]);
        line!(
            out,
            "{}: {}->{} total growth {:.3}x ({:.3} G -> {:.3} G), attention-core growth {:.3}x",
            cfg.name,
            first.size.0,
            last.size.0,
            last.total_macs as f64 / first.total_macs as f64,
            gigas(first.total_macs),
            gigas(last.total_macs),
            last.attention_core_macs as f64 / first.attention_core_macs as f64
        );
    }
    if let Some(path) = csv {
        write_csv(path, &table, out)?;
    }
    Ok(true)
}

fn run_gradcheck(micro: bool, seed: u64, tol: f64, out: &mut String) -> CmdResult {
    if !micro {
        return Err("gradcheck only supports the micro model; pass --micro".into());
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(format!("--tol must be positive, got {tol}"));
    }
    line!(out, "seed = {seed}");
    let report = gradcheck::check_micro(seed, tol).map_err(|e| e.to_string())?;
    line!(
        out,
        "checked {} elements in {} tensors, max rel err {:.3e} at {} (tol {:.1e})",
        report.elements,
        report.tensors,
        report.max_rel_err,
        report.worst,
        tol
    );
    line!(
        out,
        "{} elements had both gradients below {:.0e} and were compared absolutely",
        report.below_floor,
        pvtv2::autograd::GRAD_ABS_FLOOR
    );
    for f in report.failures.iter().take(20) {
        line!(out, "  FAIL {f}");
    }
    line!(out, "{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(report.passed())
}

fn infer(cfg: &ModelConfig, weights: Option<&Path>, size: &str, seed: u64, out: &mut String) -> CmdResult {
    let (h, w) = parse_size(size)?;
    let store = match weights {
        Some(p) => Some(load_weights(p).map_err(|e| e.to_string())?),
        None => None,
    };
    let dtype = store
        .as_ref()
        .and_then(|s| s.entries().first().map(|e| e.data.dtype()))
        .unwrap_or(DType::F32);
    line!(out, "seed = {seed}");
    line!(out, "model {} ({dtype})", cfg.name);
    match dtype {
        DType::F32 => infer_as::<f32>(cfg, store.as_ref(), h, w, seed, out),
        DType::F64 => infer_as::<f64>(cfg, store.as_ref(), h, w, seed, out),
    }
}

fn infer_as<T: Scalar>(
    cfg: &ModelConfig,
    store: Option<&WeightStore>,
    h: usize,
    w: usize,
    seed: u64,
    out: &mut String,
) -> CmdResult {
    let err = |e: pvtv2::Error| e.to_string();
    let mut model = PvtModel::<T>::new(cfg, seed).map_err(err)?;
    match store {
        Some(s) => s.load_into(&mut model).map_err(err)?,
        None => line!(out, "weights initialized from seed {seed}"),
    }
    let image = Tensor::<T>::rand_uniform(&[1, cfg.in_channels, h, w], seed, -1.0, 1.0).map_err(err)?;
    let pyramid = model.forward_features(&image).map_err(err)?;
    let logits = model.classify_features(&pyramid).map_err(err)?;
    line!(out, "input {:?}", image.shape());
    for (i, s) in pyramid.shapes().iter().enumerate() {
        line!(out, "stage {} features {s:?}", i + 1);
    }
    let values = logits.to_f64_vec();
    let sum: f64 = values.iter().sum();
    let l2 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    line!(out, "logits {:?}", logits.shape());
    line!(out, "logit sum = {sum:.8e}");
    line!(out, "logit l2 = {l2:.8e}");
    line!(out, "params = {}", model.param_count());
    Ok(true)
}

fn run_oracle(seed: u64, cases: usize, out: &mut String) -> CmdResult {
    if cases == 0 {
        return Err("--cases must be at least 1".into());
    }
    line!(out, "seed = {seed}");
    let report = oracle::run_suite(seed, cases);
    for f in &report.families {
        line!(
            out,
            "{:<14} {:>4} cases  max abs err {:.3e}  {}",
            f.family,
            f.cases,
            f.max_abs_err,
            if f.passed() { "PASS" } else { "FAIL" }
        );
        for msg in f.failures.iter().take(10) {
            line!(out, "  {msg}");
        }
    }
    line!(
        out,
        "tolerance {:.0e}: {}",
        oracle::ORACLE_TOL,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report.passed())
}
