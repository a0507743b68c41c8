//! One function per subcommand. Each returns a JSON summary for stdout and
//! writes its artifacts; the binary only parses flags and maps exit codes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use spherediff::datasets::{self, DataSource, TextCorpus};
use spherediff::predictor::Mlp;
use spherediff::rng;
use spherediff::sampling_eval::{self, NllConfig, NllReport, SampleConfig};
use spherediff::training::{Checkpoint, Start, TableSet, Trainer, LOG_HEADER};

use crate::config::RunConfig;
use crate::diagnose::{self, AblationSetup, MmdSetup};
use crate::exit::ExitError;

type Outcome<T> = Result<T, ExitError>;

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn table_summary(t: &spherediff::precompute::PrecomputedTable) -> Value {
    let last = t.rows.last();
    json!({
        "dim": t.dim,
        "psi0": t.psi0,
        "rows": t.rows.len(),
        "final_alpha": last.map(|r| r.alpha),
        "final_rho": last.map(|r| r.rho),
        "provenance": t.provenance,
    })
}

/// Builds the tables the configured mode needs and writes them to `out`,
/// with a CSV of each table next to it.
pub fn precompute(cfg: &RunConfig, out: &Path) -> Outcome<Value> {
    cfg.validate()?;
    let (codec, schedule) = (cfg.codec()?, cfg.schedule()?);
    let tables = TableSet::build(&codec, &schedule, &cfg.table_config(), cfg.seed)?;
    let mut w = create(out)?;
    tables.write_to(&mut w)?;
    w.flush()?;
    let mut summary = serde_json::Map::new();
    for (name, table) in [("mask", &tables.mask), ("barycenter", &tables.barycenter)] {
        if let Some(t) = table {
            let mut w = create(&sidecar(out, &format!(".{name}.csv")))?;
            t.write_csv(&mut w)?;
            w.flush()?;
            summary.insert(name.into(), table_summary(t));
        }
    }
    Ok(json!({ "out": out, "tables": summary }))
}

fn load_tables(path: &Path) -> Outcome<TableSet> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ExitError::missing(format!(
                "table file {} not found; run `spherediff precompute` with the same config first",
                path.display()
            ))
        } else {
            e.into()
        }
    })?;
    Ok(TableSet::read_from(&mut BufReader::new(file))?)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    if !path.exists() {
        return Err(ExitError::missing(format!(
            "checkpoint {} not found; run `spherediff train` first",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?)
}

fn load_corpus(path: &Path) -> Outcome<TextCorpus> {
    if !path.exists() {
        return Err(ExitError::missing(format!("data file {} not found", path.display())));
    }
    Ok(datasets::load_text(path)?)
}

/// Training data: a text file when given, else the config's synthetic source.
pub fn data_source(cfg: &RunConfig, data: Option<&Path>) -> Outcome<DataSource> {
    match data {
        Some(path) => {
            if cfg.geometry.vocab != datasets::ALPHABET_SIZE {
                return Err(ExitError::config(format!(
                    "text data has {} symbols but geometry.vocab is {}",
                    datasets::ALPHABET_SIZE,
                    cfg.geometry.vocab
                )));
            }
            Ok(DataSource::Text(load_corpus(path)?))
        }
        None => match &cfg.source {
            Some(src) => Ok(DataSource::Synthetic(src.spec.clone())),
            None => Err(ExitError::config(
                "no --data given and the config has no [source] section",
            )),
        },
    }
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, table: &Path, out: &Path, log: Option<&Path>) -> Outcome<Value> {
    cfg.validate()?;
    let source = data_source(cfg, data)?;
    let tables = load_tables(table)?;
    let (codec, schedule) = (cfg.codec()?, cfg.schedule()?);
    let arch = codec.architecture(cfg.model.hidden.clone(), cfg.model.context);
    let mut init = rng::substream(cfg.seed, "train/init");
    let model = Mlp::init(arch, &mut init)?;
    let mut trainer = Trainer::new(model, codec, schedule, tables, cfg.train_config()?)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| sidecar(out, ".log.csv"));
    let mut w = create(&log_path)?;
    writeln!(w, "{LOG_HEADER}")?;
    let mut io_err = None;
    let mut last = None;
    let mut clipped = 0;
    trainer.fit(&source, |s| {
        if io_err.is_none() {
            io_err = writeln!(w, "{}", s.csv_line()).err();
        }
        clipped += s.clipped;
        last = Some(*s);
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    trainer.checkpoint().save(out)?;
    Ok(json!({
        "out": out,
        "log": log_path,
        "steps": trainer.steps_done(),
        "params": trainer.model.params.len(),
        "final_loss": last.map(|s| s.loss),
        "clipped_probs": clipped,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Text,
    Jsonl,
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub num: usize,
    pub len: usize,
    pub steps: usize,
    pub seed: u64,
    pub format: SampleFormat,
    pub out: Option<PathBuf>,
    /// Use the raw parameters instead of the EMA copy.
    pub raw: bool,
    pub stop_delta: f64,
    pub noise_scale: f64,
}

/// Returns the sequences and their rendering in the requested format.
pub fn sample(args: &SampleArgs) -> Outcome<(Vec<Vec<usize>>, String)> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.model(!args.raw)?;
    let d = &ckpt.descriptor;
    let config = SampleConfig {
        steps: args.steps,
        len: args.len,
        num: args.num,
        lambda: d.lambda,
        stop_delta: args.stop_delta,
        seed: args.seed,
        noise_scale: args.noise_scale,
    };
    if config.steps == 0 || !(config.stop_delta > 0.0 && config.stop_delta < d.schedule.horizon) {
        return Err(ExitError::config("sampling needs steps >= 1 and 0 < stop_delta < T"));
    }
    let seqs = sampling_eval::sample_sequences(&model, &d.codec, &d.schedule, &config)?;
    let mut text = String::new();
    for s in &seqs {
        let line = match args.format {
            SampleFormat::Jsonl => serde_json::to_string(s).expect("ids serialize"),
            SampleFormat::Text if d.codec.vocab == datasets::ALPHABET_SIZE => datasets::detokenize(s),
            SampleFormat::Text => s.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        };
        text.push_str(&line);
        text.push('\n');
    }
    if let Some(out) = &args.out {
        let mut w = create(out)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
    }
    Ok((seqs, text))
}

/// Sequences stored one JSON integer array per line.
pub fn read_jsonl(path: &Path) -> Outcome<Vec<Vec<usize>>> {
    if !path.exists() {
        return Err(ExitError::missing(format!("data file {} not found", path.display())));
    }
    let mut seqs = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<usize> =
            serde_json::from_str(&line).map_err(|e| ExitError::config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        seqs.push(seq);
    }
    Ok(seqs)
}

pub fn write_jsonl(seqs: &[Vec<usize>], path: &Path) -> Outcome<()> {
    let mut w = create(path)?;
    for s in seqs {
        writeln!(w, "{}", serde_json::to_string(s).expect("ids serialize"))?;
    }
    w.flush()?;
    Ok(())
}

/// `num` sequences of `len` tokens from `source`; sequence `i` uses its own
/// stream so the set does not depend on the thread count.
pub fn draw_sequences(
    source: &DataSource,
    num: usize,
    len: usize,
    seed: u64,
    stream: &str,
) -> Outcome<Vec<Vec<usize>>> {
    (0..num)
        .map(|i| {
            let mut rng = rng::indexed(seed, stream, i as u64);
            let mut b = source.batch(1, len, &mut rng)?;
            Ok(b.pop().expect("one sequence"))
        })
        .collect()
}

fn source_seed(cfg: &RunConfig) -> u64 {
    cfg.source.as_ref().map_or(cfg.seed, |s| s.seed)
}

/// Evaluation sequences: JSONL file, text file, or the config source.
pub fn eval_data(cfg: &RunConfig, data: Option<&Path>) -> Outcome<Vec<Vec<usize>>> {
    let e = &cfg.eval;
    match data {
        Some(p) if p.extension().is_some_and(|x| x == "jsonl") => read_jsonl(p),
        Some(p) => {
            let src = DataSource::Text(load_corpus(p)?);
            draw_sequences(&src, e.num_seqs, e.len, source_seed(cfg), "eval/data")
        }
        None => {
            let src = data_source(cfg, None)?;
            draw_sequences(&src, e.num_seqs, e.len, source_seed(cfg), "eval/data")
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub raw: bool,
}

/// Scores the checkpoint; `cfg.eval` and `cfg.seed` set the estimator.
pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Outcome<NllReport> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.model(!args.raw)?;
    let d = &ckpt.descriptor;
    let data = eval_data(cfg, args.data.as_deref())?;
    let config = NllConfig {
        quad: cfg.eval.quad,
        draws: cfg.eval.draws,
        substeps: cfg.eval.substeps,
        lambda: d.lambda,
        stop_delta: cfg.train.stop_delta,
        seed: cfg.seed,
    };
    let report = sampling_eval::estimate_nll(&model, &d.codec, &d.schedule, &data, &config)?;
    if let Some(out) = &args.out {
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(|e| ExitError::invariant(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(report)
}

/// Writes sequences from the configured source (or a text file) as JSONL.
pub fn export(cfg: &RunConfig, data: Option<&Path>, num: usize, len: usize, out: &Path) -> Outcome<Value> {
    if num == 0 || len == 0 {
        return Err(ExitError::config("export needs num and len >= 1"));
    }
    let src = data_source(cfg, data)?;
    let seqs = draw_sequences(&src, num, len, source_seed(cfg), "export")?;
    write_jsonl(&seqs, out)?;
    Ok(json!({ "out": out, "sequences": num, "len": len }))
}

/// Writes `mmd.csv`, `projected.csv`, `radial.csv` and, unless skipped,
/// `ablation.csv` and `ablation_nll.csv` into `out_dir`.
pub fn diagnose(cfg: &RunConfig, table: &Path, out_dir: &Path, ablation: bool) -> Outcome<Value> {
    cfg.validate()?;
    let tables = load_tables(table)?;
    let (codec, schedule) = (cfg.codec()?, cfg.schedule()?);
    tables.check(&codec, &schedule)?;
    fs::create_dir_all(out_dir)?;
    let dg = &cfg.diagnose;
    let start = if codec.has_mask() {
        Start::Mask
    } else {
        Start::Barycenter
    };
    let x0 = codec.start_point(start)?;
    let t = tables.get(start)?;

    let mmd = diagnose::mmd_curve(&MmdSetup {
        table: t,
        x0: &x0,
        target: 0,
        schedule,
        samples: dg.mmd_samples,
        replicates: dg.mmd_replicates,
        times: dg.mmd_times,
        sim_steps: dg.sim_steps,
        seed: cfg.seed,
    })?;
    let mut w = create(&out_dir.join("mmd.csv"))?;
    diagnose::write_mmd_csv(&mmd, &mut w)?;
    w.flush()?;

    let proj = diagnose::projected_curve(&x0, 0, &schedule, dg.trajectories, dg.sim_steps, 15, cfg.seed)?;
    let mut w = create(&out_dir.join("projected.csv"))?;
    diagnose::write_projected_csv(&proj, &mut w)?;
    w.flush()?;

    let r0 = diagnose::start_radius(&x0, 0)?;
    let radial = diagnose::radial_curves(r0, x0.dim(), &schedule, dg.trajectories, dg.sim_steps, cfg.seed)?;
    let mut w = create(&out_dir.join("radial.csv"))?;
    diagnose::write_radial_csv(&radial, (dg.sim_steps / 64).max(1), &mut w)?;
    w.flush()?;

    let mut summary = json!({
        "out_dir": out_dir,
        "mmd_times": mmd.len(),
        "projected_times": proj.len(),
        "radial_final": radial.last().map(|r| [r.1, r.2]),
    });
    if ablation {
        let source = data_source(cfg, None)?;
        let setup = AblationSetup {
            codec,
            schedule,
            tables,
            arch: codec.architecture(cfg.model.hidden.clone(), cfg.model.context),
            train: spherediff::training::TrainConfig {
                steps: dg.ablation_steps,
                ..cfg.train_config()?
            },
            eval_data: eval_data(cfg, None)?,
            source,
            nll: NllConfig {
                quad: cfg.eval.quad,
                draws: cfg.eval.draws,
                substeps: cfg.eval.substeps,
                lambda: cfg.train.lambda,
                stop_delta: cfg.train.stop_delta,
                seed: cfg.seed,
            },
            init_seed: cfg.seed,
        };
        let results = diagnose::objective_ablation(&setup)?;
        let mut w = create(&out_dir.join("ablation.csv"))?;
        diagnose::write_ablation_csv(&results, (dg.ablation_steps / 50).max(1), &mut w)?;
        w.flush()?;
        let mut w = create(&out_dir.join("ablation_nll.csv"))?;
        diagnose::write_ablation_nll_csv(&results, &mut w)?;
        w.flush()?;
        summary["ablation"] = results
            .iter()
            .map(|r| {
                json!({
                    "objective": diagnose::objective_name(r.objective),
                    "nll_nats_per_token": r.report.nll_nats_per_token,
                    "mc_std_error": r.report.mc_std_error,
                })
            })
            .collect();
    }
    Ok(summary)
}
