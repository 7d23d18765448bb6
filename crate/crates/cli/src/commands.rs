use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use emdl::bench::{emit_bench_csv, parse_bench_csv, thread_sweep, BenchConfig, InputSource};
use emdl::compress::{optimize_pipeline, CalibrationSource, CompressionConfig, DEFAULT_CALIBRATION_INPUTS};
use emdl::eval::{evaluate, load_input, load_manifest_file, write_confusion_csv, EmotionLabel, Subset, SubsetMetrics};
use emdl::format::{self, encoded_size};
use emdl::graph::{activation_peak_bytes, count_madds, count_params, layer_madds};
use emdl::mobilenet::{build_mobilenet_v2, Init};
use emdl::{Model, Shape};
use serde_json::json;

use crate::{BenchArgs, Cli, CliError, Command, CompressArgs, EvalArgs, InitChoice, MakeArgs, SubsetChoice};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let threads = || cli.threads.map_or(Ok(1), |t| t.single());
    match &cli.command {
        Command::Inspect { model } => inspect(model, cli.json),
        Command::Compress(args) => compress(args, cli.seed, threads()?, cli.json),
        Command::Bench(args) => bench(args, cli),
        Command::Eval(args) => eval(args, threads()?, cli.json),
        Command::Plot { csv, output } => plot(csv, output),
        Command::Convert { spec, weights, output } => {
            let model = format::convert(spec, weights)?;
            let bytes = format::save_file(&model, output)?;
            report_written(output, bytes, cli.json)
        }
        Command::MakeMobilenetV2(args) => make_mobilenet(args, cli.seed, cli.json),
    }
}

fn require_path(p: &Path, what: &str) -> Result<()> {
    if p.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("{what} path must not be empty")));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    require_path(path, "model")?;
    Ok(format::load_file(path)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    writeln!(io::stdout().lock(), "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn report_written(path: &Path, bytes: usize, json: bool) -> Result<()> {
    if json {
        print_json(&json!({ "output": path, "bytes": bytes }))
    } else {
        println!("wrote {} ({bytes} bytes)", path.display());
        Ok(())
    }
}

fn inspect(path: &Path, json: bool) -> Result<()> {
    let m = load_model(path)?;
    let g = &m.graph;
    let params = count_params(g);
    let madds = count_madds(g)?;
    let sizes = encoded_size(&m)?;
    let file_bytes = fs::metadata(path)?.len();
    let peak = activation_peak_bytes(g)?;
    let shapes = g.validate()?;
    let per_node = layer_madds(g)?;
    let rows: Vec<(&str, String, &Shape, usize, u64)> = g
        .nodes
        .iter()
        .zip(&shapes)
        .zip(&per_node)
        .map(|((n, s), &ma)| {
            let p = n.tensor_names().map(|t| g.weights[t].numel()).sum();
            (n.id.as_str(), format!("{:?}", n.kind), s, p, ma)
        })
        .collect();
    if json {
        let layers: Vec<_> = rows
            .iter()
            .map(|(id, kind, s, p, ma)| json!({ "id": id, "kind": kind, "output_shape": s.dims(), "params": p, "madds": ma }))
            .collect();
        return print_json(&json!({
            "name": m.name,
            "labels": m.labels,
            "input_shape": g.input_shape.dims(),
            "quantized": g.is_quantized(),
            "params": params,
            "madds": madds,
            "activation_peak_bytes": peak,
            "bytes": { "file": file_bytes, "encoded": sizes.total, "by_encoding": sizes.by_encoding },
            "layers": layers,
        }));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "name: {}", m.name)?;
    writeln!(out, "labels: {}", m.labels.join(", "))?;
    writeln!(out, "input: {}", g.input_shape)?;
    writeln!(out, "quantized: {}", g.is_quantized())?;
    writeln!(out, "params: {params} ({:.2} M)", params as f64 / 1e6)?;
    writeln!(out, "madds: {madds} ({:.1} M)", madds as f64 / 1e6)?;
    writeln!(out, "activation peak: {peak} bytes")?;
    writeln!(out, "file: {file_bytes} bytes, encoded tensors: {} bytes", sizes.total)?;
    for (enc, b) in &sizes.by_encoding {
        writeln!(out, "  {enc:?}: {b} bytes")?;
    }
    writeln!(out)?;
    writeln!(out, "{:<24} {:<16} {:<16} {:>10} {:>12}", "layer", "kind", "output", "params", "madds")?;
    for (id, kind, s, p, ma) in &rows {
        writeln!(out, "{id:<24} {kind:<16} {:<16} {p:>10} {ma:>12}", s.to_string())?;
    }
    Ok(())
}

fn compress(args: &CompressArgs, seed: u64, threads: usize, json: bool) -> Result<()> {
    require_path(&args.output, "output")?;
    let calibration = match (&args.calib, args.calib_random) {
        (Some(path), _) => CalibrationSource::Manifest(path.clone()),
        (None, Some(count)) => CalibrationSource::Random { count, seed },
        (None, None) => CalibrationSource::Random { count: DEFAULT_CALIBRATION_INPUTS, seed },
    };
    let cfg = CompressionConfig {
        sparsity: args.sparsity,
        clusters: args.clusters,
        quantize: args.quantize,
        preserve_zeros: !args.no_preserve_zeros,
        calibration,
        threads,
    };
    cfg.validate()?;
    let model = load_model(&args.input)?;
    let (out, report) = optimize_pipeline(&model, &cfg)?;
    let bytes = format::save_file(&out, &args.output)?;
    if json {
        return print_json(&report);
    }
    println!("original_bytes: {}", report.original_bytes);
    println!("encoded_bytes: {}", report.encoded_bytes);
    println!("ratio: {:.2}", report.ratio);
    println!("activation_peak_bytes: {} -> {}", report.activation_peak_bytes_before, report.activation_peak_bytes_after);
    println!("wrote {} ({bytes} bytes)", args.output.display());
    Ok(())
}

fn bench(args: &BenchArgs, cli: &Cli) -> Result<()> {
    let m = load_model(&args.model)?;
    let mut cfg = BenchConfig { warmup_runs: args.warmup, measured_runs: args.runs, seed: cli.seed, ..Default::default() };
    if let Some(t) = cli.threads {
        cfg.thread_counts = t.counts();
    }
    if let Some(path) = &args.input {
        cfg.input = InputSource::Tensor(load_input(path, m.graph.input_shape.dims())?);
    }
    cfg.validate()?;
    let report = thread_sweep(&m, &cfg)?;
    if let Some(path) = &args.csv {
        let mut w = BufWriter::new(File::create(path)?);
        emit_bench_csv(&report.stats, &mut w)?;
        w.flush()?;
    }
    if cli.json {
        return print_json(&report);
    }
    println!(
        "model: {} ({} params, {} MAdds, {} encoded bytes, activation peak {} bytes)",
        report.model.name, report.model.params, report.model.madds, report.memory.encoded_model_bytes,
        report.memory.activation_peak_bytes
    );
    println!("host cores: {}, warmup {}, runs {}", report.host_cores, report.warmup_runs, report.measured_runs);
    println!("{:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "threads", "mean_ms", "std_ms", "p50_ms", "p90_ms", "p99_ms", "max_ms");
    for s in &report.stats {
        println!(
            "{:>7} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
            s.threads, s.mean_ms, s.std_ms, s.p50_ms, s.p90_ms, s.p99_ms, s.max_ms
        );
    }
    println!("fastest p50 at {} threads", report.argmin_threads);
    Ok(())
}

fn eval(args: &EvalArgs, threads: usize, json: bool) -> Result<()> {
    let m = load_model(&args.model)?;
    let entries = load_manifest_file(&args.manifest)?;
    let wanted: &[&str] = match args.subset {
        SubsetChoice::All => &["full", "A", "B"],
        SubsetChoice::A => &["A"],
        SubsetChoice::B => &["B"],
    };
    for (name, tag) in [("A", Subset::A), ("B", Subset::B)] {
        if wanted == [name] && !entries.iter().any(|e| e.subset == tag) {
            return Err(CliError::Data(format!("subset {name} empty")));
        }
    }
    let report = evaluate(&m, &entries, threads)?;
    let selected: Vec<&SubsetMetrics> = wanted.iter().filter_map(|s| report.subset(s)).collect();
    if let Some(path) = &args.confusion {
        write_confusion_csv(&selected[0].confusion, File::create(path)?)?;
    }
    if json {
        return print_json(&json!({ "model": report.model, "subsets": selected }));
    }
    let mut out = io::stdout().lock();
    for s in selected {
        writeln!(out, "subset {} ({} images)", s.subset, s.count)?;
        writeln!(out, "balanced_accuracy: {:.2}%  macro_f1: {:.2}%", 100.0 * s.balanced_accuracy, 100.0 * s.macro_f1)?;
        for c in &s.per_class {
            writeln!(
                out,
                "  {:<10} support {:>4}  precision {:>6.2}%  recall {:>6.2}%  f1 {:>6.2}%",
                c.label.name(),
                c.support,
                100.0 * c.precision,
                100.0 * c.recall,
                100.0 * c.f1
            )?;
        }
    }
    Ok(())
}

fn plot(csv: &Path, output: &Path) -> Result<()> {
    let file = File::open(csv).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    let stats = parse_bench_csv(file).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    if stats.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", csv.display())));
    }
    let svg = emdl::plot::latency_svg(&stats, "Latency vs CPU threads")?;
    fs::write(output, svg)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn make_mobilenet(args: &MakeArgs, seed: u64, json: bool) -> Result<()> {
    require_path(&args.output, "output")?;
    let init = match args.init {
        InitChoice::Random => Init::Random(seed),
        InitChoice::Zeros => Init::Zeros,
    };
    let graph = build_mobilenet_v2(args.width, args.classes, args.size, init)?;
    let labels = if args.classes == EmotionLabel::ALL.len() { EmotionLabel::names() } else { Vec::new() };
    let model = Model::new(format!("mobilenet_v2_{}", args.width), labels, graph);
    let bytes = format::save_file(&model, &args.output)?;
    report_written(&args.output, bytes, json)
}
