//! The standard chain of steps, from a [`RunConfig`] to a fine-tuned decoder.
//!
//! The CLI runs these one per subcommand with files in between; examples
//! and tests call [`train_all`].

use std::collections::BTreeMap;

use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::error::Result;
use crate::probe::{self, LinearMap, TrainReport};
use crate::problems::{gen_dataset, Dataset, Problem};
use crate::surrogate::{ReadoutReport, ReadoutSchedule, Surrogate};
use crate::trace::{self, HiddenTrace};

pub fn codebook(cfg: &RunConfig) -> Result<Codebook> {
    Codebook::build(cfg.d_s, cfg.seed_for("codebook"))
}

pub fn dataset(cfg: &RunConfig) -> Dataset {
    gen_dataset(&cfg.dataset_spec(), cfg.seed_for("data"))
}

/// Untrained surrogate, deterministic in the config.
pub fn surrogate(cfg: &RunConfig) -> Result<Surrogate> {
    Surrogate::build(cfg.surrogate.clone(), cfg.seed_for("surrogate"))
}

pub fn train_readout(model: &mut Surrogate, data: &Dataset) -> Result<ReadoutReport> {
    model.train_readout(&data.readout, &ReadoutSchedule::default())
}

/// Traces at the intervention layer.
pub fn probe_traces(cfg: &RunConfig, model: &Surrogate, problems: &[Problem]) -> Result<Vec<HiddenTrace>> {
    trace::export_traces(model, problems, &[cfg.intervention().layer as u16])
}

/// The first `samples_per_type` training problems of each type.
pub fn finetune_set(cfg: &RunConfig, train: &[Problem]) -> Vec<Problem> {
    let mut seen: BTreeMap<_, usize> = BTreeMap::new();
    train
        .iter()
        .filter(|p| {
            let n = seen.entry(p.ptype).or_default();
            *n += 1;
            *n <= cfg.finetune.samples_per_type
        })
        .cloned()
        .collect()
}

/// Everything [`train_all`] produces.
pub struct Trained {
    pub codebook: Codebook,
    pub data: Dataset,
    pub model: Surrogate,
    pub readout: ReadoutReport,
    pub encoder: LinearMap,
    pub encoder_report: TrainReport,
    pub decoder: LinearMap,
    pub decoder_report: TrainReport,
    pub tuned: LinearMap,
    pub finetune_report: TrainReport,
}

/// Generate data, fit the readout, fit both probes and fine-tune.
pub fn train_all(cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let codebook = codebook(cfg)?;
    let data = dataset(cfg);
    let mut model = surrogate(cfg)?;
    let readout = train_readout(&mut model, &data)?;
    let traces = probe_traces(cfg, &model, &data.train)?;
    let (encoder, encoder_report) = probe::train_encoder(&traces, &codebook, cfg.probe.lambda, cfg.fit_mode())?;
    let (decoder, decoder_report) = probe::train_decoder(&encoder, &traces, cfg.probe.lambda, cfg.fit_mode())?;
    let ft = finetune_set(cfg, &data.train);
    let trained_eval: Vec<Problem> = data.eval.iter().filter(|p| p.ptype.trained()).cloned().collect();
    let (tuned, finetune_report) = probe::finetune_decoder(
        &decoder,
        &model,
        &encoder,
        &codebook,
        &cfg.intervention(),
        &ft,
        &trained_eval,
        &cfg.finetune_schedule(),
    )?;
    Ok(Trained { codebook, data, model, readout, encoder, encoder_report, decoder, decoder_report, tuned, finetune_report })
}
