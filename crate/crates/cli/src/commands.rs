use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rnode::data::{
    generate_synthetic, load_jsonl, load_unlabeled_jsonl, save_jsonl, split_dataset,
};
use rnode::metrics::argmax;
use rnode::model::HiddenTrace;
use rnode::{checkpoint, Arch, Dataset, EvalReport, Model, SplitMode, TimedSequence};
use serde::Serialize;

use crate::config::RunConfig;
use crate::report::{self, ReportRecord, Row};
use crate::{CliError, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitSelector {
    All,
    Train,
    Val,
    Test,
}

impl SplitSelector {
    fn name(self) -> &'static str {
        match self {
            SplitSelector::All => "all",
            SplitSelector::Train => "train",
            SplitSelector::Val => "val",
            SplitSelector::Test => "test",
        }
    }
}

pub struct SynthFlags {
    pub n: Option<usize>,
    pub len: Option<usize>,
    pub width: Option<usize>,
    pub gamma: Option<f64>,
    pub noise: Option<f64>,
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!(
            "{what} `{}` does not exist",
            path.display()
        )))
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data.path {
        Some(p) => {
            require_file(p, "dataset")?;
            Ok(load_jsonl(p)?)
        }
        None => {
            let seqs = generate_synthetic(&cfg.synth, cfg.seed)?;
            Ok(Dataset::new(cfg.synth.feature_width, 2, seqs)?)
        }
    }
}

fn check_widths(model: &Model, ds: &Dataset) -> Result<(), CliError> {
    let c = model.config();
    if c.input_width != ds.feature_width || c.num_classes != ds.num_classes {
        return Err(CliError::config(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            c.input_width, c.num_classes, ds.feature_width, ds.num_classes
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    wall_clock_secs: f64,
}

/// Trains `cfg.model.arch` and writes every artifact into `dir`.
fn train_into(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<(Model, EvalReport), CliError> {
    fs::create_dir_all(dir)?;
    let mut cfg = cfg.clone();
    cfg.model.input_width = ds.feature_width;
    cfg.model.num_classes = ds.num_classes;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let splits = split_dataset(&ds.sequences, &cfg.split)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let per_event = cfg.split.mode == SplitMode::UnseenEvent;
    let out = rnode::train(model, &splits.train, &splits.val, &cfg.train, per_event)?;
    let report = rnode::evaluate(&out.model, &splits.test)?;
    checkpoint::save(&out.model, dir.join("model.json"))?;
    fs::write(dir.join("history.jsonl"), report::jsonl(&out.history))?;
    let timing: Vec<TimingRecord> = out
        .history
        .iter()
        .map(|r| TimingRecord {
            epoch: r.epoch,
            wall_clock_secs: r.wall_clock_secs,
        })
        .collect();
    fs::write(dir.join("timing.jsonl"), report::jsonl(&timing))?;
    let name = cfg.model.arch.name();
    fs::write(
        dir.join("report.jsonl"),
        report::jsonl(&[ReportRecord {
            model: name,
            split: "test",
            report: &report,
        }]),
    )?;
    fs::write(
        dir.join("report.txt"),
        report::table(&[Row {
            name: name.to_string(),
            report: Some(&report),
        }]),
    )?;
    Ok((out.model, report))
}

pub fn train(common: &Common, data: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    if data.is_some() {
        cfg.data.path = data;
    }
    let ds = load_dataset(&cfg)?;
    let (_, report) = train_into(&cfg, &ds, &common.out_dir)?;
    print!(
        "{}",
        report::table(&[Row {
            name: cfg.model.arch.name().to_string(),
            report: Some(&report),
        }])
    );
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    event: &'a str,
    #[serde(flatten)]
    trace: &'a HiddenTrace,
}

pub fn evaluate(
    common: &Common,
    checkpoint_path: &Path,
    data: &Path,
    split: SplitSelector,
    roc: bool,
    traces: bool,
) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    require_file(checkpoint_path, "checkpoint")?;
    require_file(data, "dataset")?;
    let model = checkpoint::load(checkpoint_path)?;
    let ds = load_jsonl(data)?;
    check_widths(&model, &ds)?;
    let seqs: Vec<TimedSequence> = match split {
        SplitSelector::All => ds.sequences,
        _ => {
            let s = split_dataset(&ds.sequences, &cfg.split)?;
            match split {
                SplitSelector::Train => s.train,
                SplitSelector::Val => s.val,
                _ => s.test,
            }
        }
    };
    let preds = rnode::predict(&model, &seqs)?;
    let labels: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.posts.iter().map(|p| p.y))
        .collect();
    let probs: Vec<Vec<f64>> = preds.iter().flat_map(|p| p.probs.iter().cloned()).collect();
    let report = rnode::metrics::evaluate_scores(
        &labels,
        &probs,
        model.config().num_classes,
        model.count_parameters(),
    )?;
    let dir = &common.out_dir;
    fs::create_dir_all(dir)?;
    let name = model.arch().name();
    fs::write(
        dir.join("report.jsonl"),
        report::jsonl(&[ReportRecord {
            model: name,
            split: split.name(),
            report: &report,
        }]),
    )?;
    let table = report::table(&[Row {
        name: name.to_string(),
        report: Some(&report),
    }]);
    fs::write(dir.join("report.txt"), &table)?;
    if roc {
        report::write_roc(dir, &report)?;
    }
    if traces {
        let records: Vec<TraceRecord<'_>> = preds
            .iter()
            .map(|p| TraceRecord {
                event: &p.event_id,
                trace: &p.trace,
            })
            .collect();
        fs::write(dir.join("traces.jsonl"), report::jsonl(&records))?;
    }
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    event: &'a str,
    i: usize,
    t: f64,
    label: usize,
    probs: &'a [f64],
}

pub fn predict(common: &Common, checkpoint_path: &Path, input: &Path) -> Result<(), CliError> {
    require_file(checkpoint_path, "checkpoint")?;
    require_file(input, "input")?;
    let model = checkpoint::load(checkpoint_path)?;
    let ds = load_unlabeled_jsonl(input)?;
    if model.config().input_width != ds.feature_width {
        return Err(CliError::config(format!(
            "checkpoint expects {} features, input has {}",
            model.config().input_width,
            ds.feature_width
        )));
    }
    let preds = rnode::predict(&model, &ds.sequences)?;
    let mut records = Vec::new();
    for (seq, pred) in ds.sequences.iter().zip(&preds) {
        for (i, (post, probs)) in seq.posts.iter().zip(&pred.probs).enumerate() {
            records.push(PredictionRecord {
                event: &seq.event_id,
                i,
                t: post.t,
                label: argmax(probs),
                probs,
            });
        }
    }
    fs::create_dir_all(&common.out_dir)?;
    let path = common.out_dir.join("predictions.jsonl");
    fs::write(&path, report::jsonl(&records))?;
    println!("{} posts labeled -> {}", records.len(), path.display());
    Ok(())
}

/// Nearest-rank quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn synth(common: &Common, flags: SynthFlags, output: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    let mut spec = cfg.synth.clone();
    if let Some(n) = flags.n {
        spec.num_sequences = n;
    }
    if let Some(len) = flags.len {
        spec.length = len;
        if flags.gamma.is_none() {
            spec.gamma = rnode::GapTaskSpec::median_gap_for(len);
        }
    }
    if let Some(w) = flags.width {
        spec.feature_width = w;
    }
    if let Some(g) = flags.gamma {
        spec.gamma = g;
    }
    if let Some(noise) = flags.noise {
        spec.noise = noise;
    }
    spec.validate()?;
    let seqs = generate_synthetic(&spec, cfg.seed)?;
    let ds = Dataset::new(spec.feature_width, 2, seqs)?;
    let path = match output {
        Some(p) => p,
        None => {
            fs::create_dir_all(&common.out_dir)?;
            common.out_dir.join("synthetic.jsonl")
        }
    };
    save_jsonl(&ds, &path)?;
    let mut gaps: Vec<f64> = ds.sequences.iter().flat_map(|s| s.gaps()).collect();
    gaps.sort_by(f64::total_cmp);
    let posts = gaps.len();
    let positive = ds
        .sequences
        .iter()
        .flat_map(|s| s.posts.iter())
        .filter(|p| p.y == 1)
        .count();
    println!("wrote {}", path.display());
    println!("sequences      {}", ds.sequences.len());
    println!("posts          {posts}");
    println!("gamma          {:.6}", spec.gamma);
    println!(
        "label balance  class0 {:.4}  class1 {:.4}",
        1.0 - positive as f64 / posts as f64,
        positive as f64 / posts as f64
    );
    println!(
        "gap quantiles  min {:.5}  q25 {:.5}  median {:.5}  q75 {:.5}  max {:.5}",
        gaps[0],
        quantile(&gaps, 0.25),
        quantile(&gaps, 0.5),
        quantile(&gaps, 0.75),
        gaps[posts - 1]
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareRecord<'a> {
    model: &'a str,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<&'a EvalReport>,
}

pub fn compare(common: &Common, archs: &[Arch], data: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed)?;
    if data.is_some() {
        cfg.data.path = data;
    }
    let ds = load_dataset(&cfg)?;
    fs::create_dir_all(&common.out_dir)?;
    fs::write(common.out_dir.join("config.toml"), cfg.to_toml())?;
    let mut results: Vec<(Arch, Result<EvalReport, CliError>)> = Vec::new();
    for &arch in archs {
        let mut member = cfg.clone();
        member.model.arch = arch;
        let outcome = train_into(&member, &ds, &common.out_dir.join(arch.name())).map(|(_, r)| r);
        if let Err(e) = &outcome {
            eprintln!("{arch}: {e}");
        }
        results.push((arch, outcome));
    }
    let rows: Vec<Row<'_>> = results
        .iter()
        .map(|(a, r)| Row {
            name: a.name().to_string(),
            report: r.as_ref().ok(),
        })
        .collect();
    let records: Vec<CompareRecord<'_>> = results
        .iter()
        .map(|(a, r)| CompareRecord {
            model: a.name(),
            ok: r.is_ok(),
            error: r.as_ref().err().map(|e| e.message.as_str()),
            report: r.as_ref().ok(),
        })
        .collect();
    let mut table = report::table(&rows);
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    if failed > 0 {
        table.push_str(&format!(
            "PARTIAL: {failed} of {} runs failed\n",
            results.len()
        ));
    }
    fs::write(common.out_dir.join("compare.txt"), &table)?;
    fs::write(
        common.out_dir.join("compare.jsonl"),
        report::jsonl(&records),
    )?;
    print!("{table}");
    match results.into_iter().find_map(|(_, r)| r.err()) {
        Some(first) => Err(CliError {
            code: first.code,
            message: format!(
                "{failed} compare member(s) failed; first: {}",
                first.message
            ),
        }),
        None => Ok(()),
    }
}
