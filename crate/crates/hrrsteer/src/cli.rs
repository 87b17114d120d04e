//! Command-line harness. Every subcommand reads its inputs from and writes
//! its outputs to the run directory, so the steps can be run one at a time.
//!
//! Each artifact gets a `<file>.meta.json` sidecar with the tool version,
//! the config hash and the seed (trace files also carry them in their
//! header, JSON reports in a `provenance` field).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::capacity;
use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, SymbolSource};
use crate::probe::{self, LayerRecord, LinearMap, TrainReport};
use crate::problems::{self, Problem};
use crate::provenance::Provenance;
use crate::report::{self, CsvTable, ReportInputs};
use crate::surrogate::{Readout, Surrogate, SurrogateConfig};
use crate::trace::{self, HiddenTrace, TraceHeader};
use crate::workflow;

#[derive(Debug, Parser)]
#[command(name = "hrrsteer", version, about = "Symbolic steering of a surrogate model's hidden states")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set gate.threshold=0.7`. Applied
    /// after the file, in order; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set run_dir=DIR`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, eval and readout problem sets and the codebook.
    GenData,
    /// Record the surrogate's architecture and seed.
    BuildSurrogate,
    /// Fit the surrogate's answer readout on the readout problems.
    TrainReadout,
    /// Record hidden states of the train and eval problems.
    ExportTraces,
    /// Fit the hidden → symbolic encoder.
    TrainEncoder,
    /// Fit the symbolic → hidden decoder.
    TrainDecoder,
    /// Fine-tune the decoder on answer cross-entropy.
    FinetuneDecoder,
    /// Score every problem type with and without the intervention.
    Evaluate {
        /// Use the exact problem encoding instead of the encoder.
        #[arg(long)]
        exact: bool,
        /// Use the decoder before fine-tuning.
        #[arg(long)]
        untuned: bool,
    },
    /// Sweep the capacity of random vectors.
    Capacity,
    /// Gate precision and recall over a threshold grid.
    SweepThreshold {
        /// Comma-separated thresholds (default 0, 0.05, …, 1.5).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Collate run CSVs into tables and charts.
    Report {
        /// Skip the SVG charts.
        #[arg(long)]
        no_svg: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::BuildSurrogate => "build-surrogate",
            Command::TrainReadout => "train-readout",
            Command::ExportTraces => "export-traces",
            Command::TrainEncoder => "train-encoder",
            Command::TrainDecoder => "train-decoder",
            Command::FinetuneDecoder => "finetune-decoder",
            Command::Evaluate { .. } => "evaluate",
            Command::Capacity => "capacity",
            Command::SweepThreshold { .. } => "sweep-threshold",
            Command::Report { .. } => "report",
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Numerical(_) | Error::Diverged { .. } => 4,
        _ => 1,
    }
}

/// Parse arguments, run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(d) = &g.run_dir {
        overrides.push(format!("run_dir={}", toml::Value::String(d.display().to_string())));
    }
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    if g.jobs == Some(0) {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let run = Run { cfg, producer: cli.command.name() };
    pool.install(|| run.dispatch(&cli.command))
}

/// Artifact file names inside the run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const TRAIN: &str = "data/train.jsonl";
    pub const EVAL: &str = "data/eval.jsonl";
    pub const READOUT: &str = "data/readout.jsonl";
    pub const CODEBOOK: &str = "codebook.hrrcb";
    pub const SURROGATE: &str = "surrogate.json";
    pub const READOUT_FIT: &str = "readout.json";
    pub const TRAIN_TRACES: &str = "traces/train.hst";
    pub const EVAL_TRACES: &str = "traces/eval.hst";
    pub const ENCODER: &str = "encoder.hrrmap";
    pub const ENCODER_CSV: &str = "encoder_train.csv";
    pub const ENCODER_JSON: &str = "encoder_report.json";
    pub const LAYERS_CSV: &str = "layer_curves.csv";
    pub const DECODER: &str = "decoder.hrrmap";
    pub const DECODER_CSV: &str = "decoder_train.csv";
    pub const TUNED: &str = "decoder_tuned.hrrmap";
    pub const FINETUNE_CSV: &str = "finetune.csv";
    pub const CAPACITY_CSV: &str = "capacity.csv";
    pub const CAPACITY_JSON: &str = "capacity.json";
    pub const SWEEP_CSV: &str = "threshold_sweep.csv";
    pub const SWEEP_JSON: &str = "threshold_sweep.json";
    pub const REPORT_DIR: &str = "report";
}

/// What `build-surrogate` and `train-readout` store: the weights follow
/// from the config and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SurrogateFile {
    config: SurrogateConfig,
    seed: u64,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: Provenance,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    producer: &'a str,
}

struct Run {
    cfg: RunConfig,
    producer: &'static str,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.run_dir.join(name)
    }

    /// Path of an input artifact, or an error naming its producer.
    fn need(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, producer })
        }
    }

    /// Write an artifact and its provenance sidecar.
    fn write(&self, name: &str, fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(&p)?);
        fill(&mut w)?;
        w.flush()?;
        let meta = Sidecar { provenance: self.cfg.provenance(), producer: self.producer };
        let mut side = serde_json::to_string_pretty(&meta)?;
        side.push('\n');
        fs::write(sidecar(&p), side)?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let stamped = Stamped { provenance: self.cfg.provenance(), body };
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, &stamped)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn dispatch(&self, cmd: &Command) -> Result<()> {
        fs::create_dir_all(&self.cfg.run_dir)?;
        self.write(files::CONFIG, |w| Ok(w.write_all(self.cfg.to_toml().as_bytes())?))?;
        match cmd {
            Command::GenData => self.gen_data(),
            Command::BuildSurrogate => self.build_surrogate(),
            Command::TrainReadout => self.train_readout(),
            Command::ExportTraces => self.export_traces(),
            Command::TrainEncoder => self.train_encoder(),
            Command::TrainDecoder => self.train_decoder(),
            Command::FinetuneDecoder => self.finetune(),
            Command::Evaluate { exact, untuned } => self.evaluate(*exact, *untuned),
            Command::Capacity => self.capacity(),
            Command::SweepThreshold { grid } => self.sweep(grid.as_deref()),
            Command::Report { no_svg } => self.report(!no_svg),
        }
    }

    fn gen_data(&self) -> Result<()> {
        let data = workflow::dataset(&self.cfg);
        for (name, set) in [(files::TRAIN, &data.train), (files::EVAL, &data.eval), (files::READOUT, &data.readout)] {
            let p = self.write(name, |w| problems::write_jsonl(w, set))?;
            println!("{} problems -> {}", set.len(), p.display());
        }
        let cb = workflow::codebook(&self.cfg)?;
        let p = self.write(files::CODEBOOK, |w| cb.write_to(w))?;
        println!("codebook d={} -> {}", cb.dim(), p.display());
        Ok(())
    }

    fn problems(&self, name: &str) -> Result<Vec<Problem>> {
        let p = self.need(name, "gen-data")?;
        problems::read_jsonl(BufReader::new(File::open(p)?))
    }

    fn codebook(&self) -> Result<Codebook> {
        let p = self.need(files::CODEBOOK, "gen-data")?;
        Codebook::read_from(&mut BufReader::new(File::open(p)?))
    }

    fn build_surrogate(&self) -> Result<()> {
        let model = workflow::surrogate(&self.cfg)?;
        let body = SurrogateFile { config: model.config().clone(), seed: model.seed() };
        let p = self.write_json(files::SURROGATE, &body)?;
        println!("surrogate d_h={} L={} -> {}", body.config.d_h, body.config.layers, p.display());
        Ok(())
    }

    fn untrained_model(&self) -> Result<Surrogate> {
        let p = self.need(files::SURROGATE, "build-surrogate")?;
        let f: SurrogateFile = serde_json::from_reader(BufReader::new(File::open(p)?))?;
        Surrogate::build(f.config, f.seed)
    }

    fn train_readout(&self) -> Result<()> {
        let mut model = self.untrained_model()?;
        let problems = self.problems(files::READOUT)?;
        let rep = model.train_readout(&problems, &Default::default())?;
        let p = self.write_json(files::READOUT_FIT, &rep)?;
        for m in &rep.per_type {
            println!("{:18} score {:6.2}%  ce {:.4}", m.ptype.to_string(), m.score, m.ce);
        }
        println!("sharpness {:.4e} -> {}", rep.readout.sharpness, p.display());
        Ok(())
    }

    fn model(&self) -> Result<Surrogate> {
        let mut model = self.untrained_model()?;
        let p = self.need(files::READOUT_FIT, "train-readout")?;
        #[derive(Deserialize)]
        struct Fit {
            readout: Readout,
        }
        let f: Fit = serde_json::from_reader(BufReader::new(File::open(p)?))?;
        model.set_readout(f.readout)?;
        Ok(model)
    }

    fn trace_layers(&self, model: &Surrogate) -> Vec<u16> {
        if self.cfg.probe.all_layers {
            (0..=model.config().layers as u16).collect()
        } else {
            vec![self.cfg.intervention().layer as u16]
        }
    }

    fn export_traces(&self) -> Result<()> {
        let model = self.model()?;
        let layers = self.trace_layers(&model);
        for (src, dst) in [(files::TRAIN, files::TRAIN_TRACES), (files::EVAL, files::EVAL_TRACES)] {
            let set = self.problems(src)?;
            let traces = trace::export_traces(&model, &set, &layers)?;
            let header = TraceHeader {
                d_h: model.config().d_h,
                layers: model.config().layers,
                seed: model.seed(),
                layer_list: layers.clone(),
                provenance: Some(self.cfg.provenance()),
            };
            let p = self.write(dst, |w| trace::write_traces(w, &header, &traces))?;
            println!("{} records -> {}", traces.len(), p.display());
        }
        Ok(())
    }

    /// Traces of one layer with metadata attached.
    fn traces(&self, name: &str, layer: usize) -> Result<Vec<HiddenTrace>> {
        let p = self.need(name, "export-traces")?;
        let (header, all) = trace::read_traces(&mut BufReader::new(File::open(p)?))?;
        if !header.layer_list.contains(&(layer as u16)) {
            return Err(Error::Config(format!("{name} has no layer {layer}; re-run export-traces")));
        }
        let mut traces: Vec<HiddenTrace> = all.into_iter().filter(|t| t.layer as usize == layer).collect();
        let src = if name == files::TRAIN_TRACES { files::TRAIN } else { files::EVAL };
        trace::attach_metadata(&mut traces, &self.problems(src)?)?;
        Ok(traces)
    }

    fn train_encoder(&self) -> Result<()> {
        let cb = self.codebook()?;
        let layer = self.cfg.intervention().layer;
        let train = self.traces(files::TRAIN_TRACES, layer)?;
        let eval = self.traces(files::EVAL_TRACES, layer)?;
        let (enc, mut rep) = probe::train_encoder(&train, &cb, self.cfg.probe.lambda, self.cfg.fit_mode())?;
        let held_out = probe::digit_error(&enc, &eval, &cb)?;
        if self.cfg.probe.all_layers {
            rep.layers = self.layer_curves(&cb)?;
            self.write(files::LAYERS_CSV, |w| write_layers_csv(w, &rep.layers))?;
        }
        self.write(files::ENCODER, |w| enc.write_to(w))?;
        self.write(files::ENCODER_CSV, |w| rep.write_csv(w))?;
        #[derive(Serialize)]
        struct Body<'a> {
            train: &'a TrainReport,
            held_out_digit_error: &'a probe::DigitError,
        }
        self.write_json(files::ENCODER_JSON, &Body { train: &rep, held_out_digit_error: &held_out })?;
        println!("encoder layer {layer}: rmse {:.5}", rep.epochs.last().map_or(f64::NAN, |e| e.loss));
        println!("held-out digit error per slot {:?}", held_out.per_slot);
        Ok(())
    }

    fn layer_curves(&self, cb: &Codebook) -> Result<Vec<LayerRecord>> {
        let p = self.need(files::TRAIN_TRACES, "export-traces")?;
        let (_, train_all) = trace::read_traces(&mut BufReader::new(File::open(p)?))?;
        let p = self.need(files::EVAL_TRACES, "export-traces")?;
        let (header, eval_all) = trace::read_traces(&mut BufReader::new(File::open(p)?))?;
        let (train_p, eval_p) = (self.problems(files::TRAIN)?, self.problems(files::EVAL)?);
        let mut out = Vec::new();
        for &layer in &header.layer_list {
            let mut tr: Vec<HiddenTrace> = train_all.iter().filter(|t| t.layer == layer).cloned().collect();
            let mut ev: Vec<HiddenTrace> = eval_all.iter().filter(|t| t.layer == layer).cloned().collect();
            trace::attach_metadata(&mut tr, &train_p)?;
            trace::attach_metadata(&mut ev, &eval_p)?;
            out.push(probe::layer_record(&tr, &ev, cb, self.cfg.probe.lambda)?);
        }
        Ok(out)
    }

    fn map(&self, name: &str, producer: &'static str) -> Result<LinearMap> {
        let p = self.need(name, producer)?;
        LinearMap::read_from(&mut BufReader::new(File::open(p)?))
    }

    fn train_decoder(&self) -> Result<()> {
        let enc = self.map(files::ENCODER, "train-encoder")?;
        let train = self.traces(files::TRAIN_TRACES, enc.layer)?;
        let (dec, rep) = probe::train_decoder(&enc, &train, self.cfg.probe.lambda, self.cfg.fit_mode())?;
        self.write(files::DECODER, |w| dec.write_to(w))?;
        self.write(files::DECODER_CSV, |w| rep.write_csv(w))?;
        println!("decoder rmse {:.5}", rep.epochs.last().map_or(f64::NAN, |e| e.loss));
        Ok(())
    }

    fn finetune(&self) -> Result<()> {
        let model = self.model()?;
        let cb = self.codebook()?;
        let enc = self.map(files::ENCODER, "train-encoder")?;
        let dec = self.map(files::DECODER, "train-decoder")?;
        let train = workflow::finetune_set(&self.cfg, &self.problems(files::TRAIN)?);
        let eval: Vec<Problem> = self.problems(files::EVAL)?.into_iter().filter(|p| p.ptype.trained()).collect();
        let gate = self.cfg.intervention();
        let result = probe::finetune_decoder(&dec, &model, &enc, &cb, &gate, &train, &eval, &self.cfg.finetune_schedule());
        let (tuned, rep) = match result {
            Err(Error::Diverged { epoch, checkpoint }) => {
                self.write(files::TUNED, |w| checkpoint.write_to(w))?;
                return Err(Error::Numerical(format!(
                    "fine-tuning diverged at epoch {epoch}; last finite decoder saved to {}",
                    self.path(files::TUNED).display()
                )));
            }
            other => other?,
        };
        self.write(files::TUNED, |w| tuned.write_to(w))?;
        self.write(files::FINETUNE_CSV, |w| rep.write_csv(w))?;
        if let (Some(first), Some(last)) = (rep.epochs.first(), rep.epochs.last()) {
            println!("train ce {:.4} -> {:.4} over {} epochs", first.loss, last.loss, last.epoch);
            if let (Some(a), Some(b)) = (first.eval_score, last.eval_score) {
                println!("eval score {a:.2}% -> {b:.2}%");
            }
        }
        Ok(())
    }

    fn evaluate(&self, exact: bool, untuned: bool) -> Result<()> {
        let model = self.model()?;
        let cb = self.codebook()?;
        let enc = self.map(files::ENCODER, "train-encoder")?;
        let dec = if untuned {
            self.map(files::DECODER, "train-decoder")?
        } else {
            self.map(files::TUNED, "finetune-decoder")?
        };
        let eval = self.problems(files::EVAL)?;
        let source = if exact { SymbolSource::Exact } else { SymbolSource::Encoder };
        let rep = pipeline::evaluate(&model, &enc, &dec, &cb, &self.cfg.intervention(), &eval, source)?;
        let stem = match (exact, untuned) {
            (false, false) => "eval".to_string(),
            (true, false) => "eval_exact".to_string(),
            (false, true) => "eval_untuned".to_string(),
            (true, true) => "eval_exact_untuned".to_string(),
        };
        self.write_json(&format!("{stem}.json"), &rep)?;
        self.write(&format!("{stem}.csv"), |w| rep.write_csv(w))?;
        self.write(&format!("{stem}_histogram.csv"), |w| rep.write_histogram_csv(w))?;
        println!("{:18} {:>8} {:>8} {:>12} {:>12} {:>6}", "type", "base %", "score %", "base ce", "ce", "fired");
        for r in &rep.per_type {
            println!(
                "{:18} {:8.2} {:8.2} {:12.4} {:12.4} {:6.3}",
                r.ptype.to_string(),
                r.baseline_score,
                r.score,
                r.baseline_ce,
                r.ce,
                r.intervention_rate
            );
        }
        println!("bypassed {} of {}, bit-identical {}", rep.bypassed, eval.len(), rep.bypass_identical);
        Ok(())
    }

    fn capacity(&self) -> Result<()> {
        let c = &self.cfg.capacity;
        let seeds: Vec<u64> = (0..c.seeds as u64).map(|i| crate::seed::derive_index(self.cfg.seed, "capacity", i)).collect();
        let table = capacity::capacity_curve(&c.dims, &c.ns, &seeds, c.budget)?;
        self.write(files::CAPACITY_CSV, |w| capacity::write_csv(w, &table.rows))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            alpha_fit: f64,
            intercept: f64,
            r_squared: f64,
            points: &'a [(usize, usize, f64, f64)],
        }
        let s = Summary { alpha_fit: table.alpha_fit, intercept: table.intercept, r_squared: table.r_squared, points: &table.points };
        self.write_json(files::CAPACITY_JSON, &s)?;
        for (d, n, eps, _) in &table.points {
            println!("d={d:6} N={n:7} median eps_max={eps:.5}");
        }
        println!("alpha_fit {:.4}  R² {:.4}", table.alpha_fit, table.r_squared);
        Ok(())
    }

    fn sweep(&self, grid: Option<&[f64]>) -> Result<()> {
        let cb = self.codebook()?;
        let enc = self.map(files::ENCODER, "train-encoder")?;
        let traces = self.traces(files::EVAL_TRACES, enc.layer)?;
        let scores = pipeline::gate_scores(&enc, &traces, &cb, &self.cfg.gate.trained_tags)?;
        let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(pipeline::default_grid);
        let table = pipeline::threshold_sweep(&scores, &grid)?;
        self.write(files::SWEEP_CSV, |w| table.write_csv(w))?;
        self.write_json(files::SWEEP_JSON, &table)?;
        println!("recommended threshold {:.3}", table.recommended);
        Ok(())
    }

    fn report(&self, svg: bool) -> Result<()> {
        let read = |name: &str| -> Result<Option<CsvTable>> {
            let p = self.path(name);
            if p.is_file() {
                Ok(Some(CsvTable::read(File::open(p)?)?))
            } else {
                Ok(None)
            }
        };
        let inputs = ReportInputs {
            layers: read(files::LAYERS_CSV)?,
            eval: read("eval.csv")?,
            histogram: read("eval_histogram.csv")?,
            finetune: read(files::FINETUNE_CSV)?,
        };
        if inputs.layers.is_none() && inputs.eval.is_none() && inputs.histogram.is_none() && inputs.finetune.is_none() {
            self.need("eval.csv", "evaluate")?;
        }
        let out = report::build(&inputs, svg)?;
        for (name, body) in &out {
            let p = self.write(&format!("{}/{name}", files::REPORT_DIR), |w| Ok(w.write_all(body.as_bytes())?))?;
            println!("{}", p.display());
        }
        Ok(())
    }
}

fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_layers_csv<W: Write>(w: &mut W, rows: &[LayerRecord]) -> Result<()> {
    writeln!(w, "layer,encoder_rmse,decoder_rmse,err_hundreds,err_tens,err_ones")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.8},{:.8},{:.6},{:.6},{:.6}",
            r.layer, r.encoder_rmse, r.decoder_rmse, r.digit_error[0], r.digit_error[1], r.digit_error[2]
        )?;
    }
    Ok(())
}
