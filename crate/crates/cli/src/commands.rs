use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mvft::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mvft::data::{
    default_synth_spec, make_split, parse_raw_file, prepare_views, read_dataset, records_to_stream,
    segment_windows, write_dataset, Dataset, DatasetSplit,
};
use mvft::report::{read_report, write_report, AblationRow, CellStatus, DataInfo, RunReport};
use mvft::train::{evaluate, fit, write_history, EpochRecord, Metrics};
use mvft::views::{build_views, dft_magnitude};
use mvft::{ModelKind, TrainConfig, ViewBundle, ViewMask};
use serde_json::json;

use crate::config::{load_run_config, load_synth_spec, Overrides, SplitConfig};
use crate::failure::Failure;
use crate::{EvalArgs, GenSynthArgs, InspectArgs, PrepareArgs, TrainFlags};

type CmdResult = Result<(), Failure>;

fn read_data(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(Failure::data(path.display()))
}

fn data_info(path: &Path, d: &Dataset) -> Result<DataInfo, Failure> {
    Ok(DataInfo {
        path: path.display().to_string(),
        content_hash: d.content_hash()?,
        windows: d.windows.len(),
        label_names: d.label_names.clone(),
    })
}

/// Writes to stdout; a reader that hangs up early is not an error.
fn emit(text: &str) -> CmdResult {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn gen_synth(a: &GenSynthArgs) -> CmdResult {
    let mut spec = match &a.config {
        Some(p) => load_synth_spec(p)?,
        None => default_synth_spec(500, 0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.per_class {
        spec.per_class = n;
    }
    spec.validate()?;
    let d = Dataset::from_synth(&spec)?;
    fs::create_dir_all(&a.out)?;
    write_dataset(&a.out.join("dataset.json"), &d)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!(
        "{} windows, {} classes, content hash {}",
        d.windows.len(),
        d.n_class(),
        d.content_hash()?
    );
    Ok(())
}

pub fn prepare(a: &PrepareArgs) -> CmdResult {
    let run = load_run_config(a.config.as_deref())?;
    let window = run.prepare.window_len;
    let stride = run.prepare.stride.unwrap_or(window);
    if window < 2 || stride == 0 {
        return Err(Failure::Config(format!("window_len {window} / stride {stride} out of range")));
    }
    let parsed = parse_raw_file(&a.data).map_err(Failure::data(a.data.display()))?;
    if parsed.records.is_empty() {
        return Err(Failure::Data(format!(
            "{}: no valid records ({} malformed lines)",
            a.data.display(),
            parsed.errors.len()
        )));
    }
    let streams = records_to_stream(&parsed.records);
    let windows = segment_windows(&streams, window, stride)?;
    if windows.is_empty() {
        return Err(Failure::Data(format!("no activity run holds a full window of {window} samples")));
    }
    let mut d = Dataset::new(window, 3, streams.label_names.clone(), windows);
    d.source = Some(a.data.display().to_string());
    let hash = d.content_hash()?;

    fs::create_dir_all(&a.out)?;
    write_dataset(&a.out.join("dataset.json"), &d)?;
    let mut errors = String::new();
    for e in &parsed.errors {
        writeln!(errors, "{e}").expect("string write");
    }
    fs::write(a.out.join("parse_errors.txt"), errors)?;
    write_json(
        &a.out.join("prepare.json"),
        &json!({
            "source": a.data.display().to_string(),
            "records": parsed.records.len(),
            "malformed_lines": parsed.errors.len(),
            "blank_lines": parsed.blank_lines,
            "duplicates_dropped": streams.duplicates,
            "window_len": window,
            "stride": stride,
            "windows": d.windows.len(),
            "label_names": streams.label_names,
            "content_hash": hash,
        }),
    )?;
    println!(
        "{} records ({} malformed, {} duplicates dropped) -> {} windows",
        parsed.records.len(),
        parsed.errors.len(),
        streams.duplicates,
        d.windows.len()
    );
    Ok(())
}

/// Model dimensions that must follow the data.
fn match_dataset(cfg: &mut TrainConfig, d: &Dataset) {
    cfg.model.window_len = d.window_len;
    cfg.model.channels = d.channels;
    cfg.model.n_class = d.n_class();
}

struct Outcome {
    best: Checkpoint,
    history: Vec<EpochRecord>,
    split: DatasetSplit,
    metrics: BTreeMap<String, Metrics>,
}

fn run_one(cfg: &TrainConfig, split_cfg: &SplitConfig, d: &Dataset) -> Result<Outcome, Failure> {
    cfg.validate()?;
    let split = make_split(&d.windows, split_cfg.policy, split_cfg.ratios, cfg.seed)?;
    if split.val.is_empty() {
        return Err(Failure::Config("split leaves the validation set empty".into()));
    }
    let data = prepare_views(&d.windows, &split)?;
    let out = fit(cfg.build_model()?, &data.train, &data.val, cfg)?;
    let mut best = out.best;
    best.normalizer = Some(data.normalizer);
    let model = best.model()?;
    let mut metrics = BTreeMap::new();
    for (name, part) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        if !part.is_empty() {
            metrics.insert(name.to_string(), evaluate(&model, part, cfg.views)?);
        }
    }
    Ok(Outcome {
        best,
        history: out.history,
        split,
        metrics,
    })
}

pub fn train(flags: &TrainFlags, o: &Overrides, argv: Vec<String>) -> CmdResult {
    let started = Instant::now();
    let mut run = load_run_config(flags.config.as_deref())?;
    o.apply(&mut run.train);
    run.train.validate()?;
    let d = read_data(&flags.data)?;
    match_dataset(&mut run.train, &d);
    let outcome = run_one(&run.train, &run.split, &d)?;

    fs::create_dir_all(&flags.out)?;
    save_checkpoint(&flags.out.join("model.ckpt"), &outcome.best)?;
    let mut history = Vec::new();
    write_history(&mut history, &outcome.history)?;
    fs::write(flags.out.join("history.jsonl"), history)?;
    let mut report = RunReport::new(argv, run.train.clone(), data_info(&flags.data, &d)?);
    report.split = Some(outcome.split);
    report.history = outcome.history;
    report.metrics = outcome.metrics;
    report.wall_clock_s = started.elapsed().as_secs_f64();
    write_report(&flags.out.join("report.json"), &report)?;
    for (name, m) in &report.metrics {
        println!("{name:5} accuracy {:.4} loss {:.4}", m.accuracy, m.loss);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint).map_err(Failure::data(a.checkpoint.display()))?;
    let model = ckpt.model()?;
    let d = read_data(&a.data)?;
    let cfg = &ckpt.config.model;
    if d.window_len != cfg.window_len || d.channels != cfg.channels || d.n_class() > cfg.n_class {
        return Err(Failure::Data(format!(
            "dataset is {}x{} with {} classes, checkpoint expects {}x{} with {}",
            d.window_len,
            d.channels,
            d.n_class(),
            cfg.window_len,
            cfg.channels,
            cfg.n_class
        )));
    }
    let indices: Vec<usize> = match &a.split_from {
        Some(p) => {
            let report = read_report(p).map_err(Failure::data(p.display()))?;
            if report.data.content_hash != d.content_hash()? {
                return Err(Failure::Data(format!("{} was produced from different data", p.display())));
            }
            let split = report
                .split
                .ok_or_else(|| Failure::Data(format!("{} records no split", p.display())))?;
            split.validate(d.windows.len())?;
            split.test
        }
        None => (0..d.windows.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Failure::Data("no windows to evaluate".into()));
    }
    let norm = ckpt
        .normalizer
        .as_ref()
        .ok_or_else(|| Failure::Data("checkpoint carries no view normalizer".into()))?;
    let bundles = indices
        .iter()
        .map(|&i| norm.apply(&build_views(&d.windows[i])?))
        .collect::<mvft::Result<Vec<ViewBundle>>>()?;
    let metrics = evaluate(&model, &bundles, ckpt.config.views)?;
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Failure::Internal(e.to_string()))?;
    emit(&format!("{text}\n"))?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &metrics)?;
    }
    Ok(())
}

/// Baseline on every non-empty subset, then MVFT on every multi-view subset.
pub fn ablation_cells() -> Vec<(ModelKind, ViewMask)> {
    let subsets = ViewMask::non_empty_subsets();
    let mut cells: Vec<(ModelKind, ViewMask)> = subsets.iter().map(|&m| (ModelKind::Baseline, m)).collect();
    cells.extend(subsets.iter().filter(|m| m.count() >= 2).map(|&m| (ModelKind::Mvft, m)));
    cells
}

fn cell_key(kind: ModelKind, views: ViewMask) -> String {
    let k = match kind {
        ModelKind::Mvft => "mvft",
        ModelKind::Baseline => "baseline",
    };
    format!("{k}:{views}")
}

pub fn ablate(flags: &TrainFlags, o: &Overrides, argv: Vec<String>) -> CmdResult {
    let started = Instant::now();
    let mut run = load_run_config(flags.config.as_deref())?;
    o.apply(&mut run.train);
    // every cell trains for exactly the epoch budget
    run.train.patience = run.train.max_epochs;
    let probe = TrainConfig {
        kind: ModelKind::Baseline,
        ..run.train.clone()
    };
    probe.validate()?;
    let d = read_data(&flags.data)?;
    match_dataset(&mut run.train, &d);

    let mut report = RunReport::new(argv, run.train.clone(), data_info(&flags.data, &d)?);
    let mut grid = String::from("model\tviews\tstatus\taccuracy\n");
    for (kind, views) in ablation_cells() {
        let cfg = TrainConfig {
            kind,
            views,
            ..run.train.clone()
        };
        let key = cell_key(kind, views);
        let row = match run_one(&cfg, &run.split, &d) {
            Ok(out) => {
                let test = out.metrics.get("test").or_else(|| out.metrics.get("val")).cloned();
                let accuracy = test.as_ref().map(|m| m.accuracy);
                if let Some(m) = test {
                    report.metrics.insert(key.clone(), m);
                }
                report.split.get_or_insert(out.split);
                AblationRow {
                    model: kind,
                    views,
                    status: CellStatus::Ok,
                    accuracy,
                    error: None,
                }
            }
            Err(e) => AblationRow {
                model: kind,
                views,
                status: CellStatus::Failed,
                accuracy: None,
                error: Some(e.to_string()),
            },
        };
        let acc = row.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        let status = match row.status {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
        };
        eprintln!("{key:16} {status:6} {acc}");
        let (k, v) = key.split_once(':').expect("cell key");
        writeln!(grid, "{k}\t{v}\t{status}\t{acc}").expect("string write");
        report.ablation.push(row);
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    fs::create_dir_all(&flags.out)?;
    write_report(&flags.out.join("report.json"), &report)?;
    fs::write(flags.out.join("grid.tsv"), &grid)?;
    emit(&grid)?;
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> CmdResult {
    let d = read_data(&a.data)?;
    let mut summary = String::new();
    writeln!(summary, "{} windows", d.windows.len()).expect("string write");
    if d.windows.is_empty() {
        return emit(&summary);
    }
    writeln!(summary, "{} classes, window {} x {} channels", d.n_class(), d.window_len, d.channels).expect("string write");

    let mut histogram = String::from("class\tname\tcount\n");
    for (k, n) in d.histogram().iter().enumerate() {
        writeln!(histogram, "{k}\t{}\t{n}", d.label_names[k]).expect("string write");
    }

    let mut stats = String::from("channel\tmean\tstd\n");
    for ch in 0..d.channels {
        let vals: Vec<f64> = d.windows.iter().flat_map(|w| w.samples.iter().map(move |r| r[ch])).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        writeln!(stats, "{ch}\t{mean:.6}\t{:.6}", var.sqrt()).expect("string write");
    }

    // mean one-sided magnitude spectrum per class and channel
    let bins = d.window_len / 2 + 1;
    let mut spectra = String::from("class\tchannel\tbin\tmagnitude\n");
    let hist = d.histogram();
    for (k, &count) in hist.iter().enumerate() {
        if count == 0 {
            continue;
        }
        for ch in 0..d.channels {
            let mut acc = vec![0.0; bins];
            for w in d.windows.iter().filter(|w| w.label == k) {
                for (a, m) in acc.iter_mut().zip(dft_magnitude(&w.channel(ch))?) {
                    *a += m;
                }
            }
            for (bin, a) in acc.iter().enumerate() {
                writeln!(spectra, "{k}\t{ch}\t{bin}\t{:.6}", a / count as f64).expect("string write");
            }
        }
    }

    match &a.out {
        Some(out) => {
            fs::create_dir_all(out)?;
            fs::write(out.join("histogram.tsv"), &histogram)?;
            fs::write(out.join("channels.tsv"), &stats)?;
            fs::write(out.join("spectra.tsv"), &spectra)?;
            emit(&format!("{summary}\n{histogram}\n{stats}"))?;
        }
        None => emit(&format!("{summary}\n{histogram}\n{stats}\n{spectra}"))?,
    }
    Ok(())
}
