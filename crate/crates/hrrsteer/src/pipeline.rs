//! The intervention loop: encode, gate on problem type, solve, decode, mix.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Role};
use crate::error::{Error, Result};
use crate::hrr::{bind_fast, HrrVector};
use crate::probe::LinearMap;
use crate::problems::{self, Problem, ProblemType};
use crate::surrogate::{self, Surrogate};

/// Largest answer a solution vector can carry.
pub const MAX_SOLUTION: u32 = 1999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub threshold: f64,
    pub mix: f64,
    pub layer: usize,
    /// Tags the gate compares against; only these can fire.
    pub trained_tags: Vec<ProblemType>,
}

impl InterventionConfig {
    pub fn new(layer: usize) -> Self {
        InterventionConfig { threshold: 0.8, mix: 0.5, layer, trained_tags: ProblemType::TRAINED.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Config(format!("mix must lie in [0, 1], got {}", self.mix)));
        }
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(Error::Config(format!("gate threshold must be positive, got {}", self.threshold)));
        }
        if self.trained_tags.is_empty() {
            return Err(Error::Config("the gate needs at least one trained tag".into()));
        }
        Ok(())
    }
}

/// Whether a gate score clears a threshold. A threshold of zero or below
/// always fires.
pub fn gate_fires(score: f64, threshold: f64) -> bool {
    threshold <= 0.0 || score >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    Fired,
    BelowThreshold,
    SolverDivisionByZero,
    AnswerOutOfRange,
}

/// What the gate saw and did for one hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub tag: ProblemType,
    pub score: f64,
    pub fired: bool,
    pub reason: GateReason,
    pub n1: Option<u32>,
    pub n2: Option<u32>,
    pub answer: Option<u32>,
}

/// `answer ⊛ number(answer)`, the number with all four places.
///
/// The type tag is left out on purpose. Answers are unevenly spread over
/// digits per type (most gcds are below 10), and a tag term lets a linear
/// decoder learn that skew as a prior that outvotes the digits on rare
/// answers. The type is already in the half of the state that is kept.
pub fn build_solution_vector(answer: u32, cb: &Codebook) -> Result<HrrVector> {
    if answer > MAX_SOLUTION {
        return Err(Error::OutOfRange(format!("solution {answer} above {MAX_SOLUTION}")));
    }
    bind_fast(cb.role(Role::Answer), &cb.encode_four_place_number(answer)?)
}

/// Gate, read operands and solve, given the symbolic reading `s` of a
/// hidden state. Returns the solution vector when the gate fires.
pub fn symbolic_step(s: &HrrVector, cb: &Codebook, config: &InterventionConfig) -> Result<(GateDecision, Option<HrrVector>)> {
    let (tag, score) = cb.query_problem_type(s, &config.trained_tags)?;
    let mut d = GateDecision { tag, score, fired: false, reason: GateReason::BelowThreshold, n1: None, n2: None, answer: None };
    if !gate_fires(score, config.threshold) {
        return Ok((d, None));
    }
    let n1 = cb.query_number(s, Some(Role::N1))?.value;
    let n2 = cb.query_number(s, Some(Role::N2))?.value;
    d.n1 = Some(n1);
    d.n2 = Some(n2);
    let answer = match problems::solve(tag, n1, n2) {
        Ok(a) => a,
        Err(Error::ZeroDivisor(_)) => {
            d.reason = GateReason::SolverDivisionByZero;
            return Ok((d, None));
        }
        Err(Error::OutOfRange(_)) => {
            d.reason = GateReason::AnswerOutOfRange;
            return Ok((d, None));
        }
        Err(e) => return Err(e),
    };
    d.answer = Some(answer);
    if answer > MAX_SOLUTION {
        d.reason = GateReason::AnswerOutOfRange;
        return Ok((d, None));
    }
    d.fired = true;
    d.reason = GateReason::Fired;
    Ok((d, Some(build_solution_vector(answer, cb)?)))
}

/// `mix·decoded + (1 − mix)·original`.
pub fn mix_states(original: &DVector<f64>, decoded: &DVector<f64>, mix: f64) -> DVector<f64> {
    decoded * mix + original * (1.0 - mix)
}

/// Intervene on a hidden state given its symbolic reading. A bypass
/// returns the state untouched.
pub fn intervene_with(
    hidden: DVector<f64>,
    s: &HrrVector,
    decoder: &LinearMap,
    cb: &Codebook,
    config: &InterventionConfig,
) -> Result<(DVector<f64>, GateDecision)> {
    let (d, sv) = symbolic_step(s, cb, config)?;
    match sv {
        Some(sv) => {
            let decoded = decoder.apply(&DVector::from_column_slice(sv.values()));
            if decoded.len() != hidden.len() {
                return Err(Error::DimensionMismatch(decoded.len(), hidden.len()));
            }
            Ok((mix_states(&hidden, &decoded, config.mix), d))
        }
        None => Ok((hidden, d)),
    }
}

/// The full loop on one hidden state, reading it through the encoder.
pub fn intervene(
    hidden: DVector<f64>,
    encoder: &LinearMap,
    decoder: &LinearMap,
    cb: &Codebook,
    config: &InterventionConfig,
) -> Result<(DVector<f64>, GateDecision)> {
    if hidden.len() != encoder.d_in() {
        return Err(Error::DimensionMismatch(hidden.len(), encoder.d_in()));
    }
    let s = encoder.apply_hrr(&hidden)?;
    intervene_with(hidden, &s, decoder, cb, config)
}

/// Where the gate's symbolic vector comes from during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolSource {
    /// Encoder applied to the hidden state.
    Encoder,
    /// The exact problem encoding, bypassing the encoder.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub ptype: ProblemType,
    pub trained: bool,
    pub count: usize,
    pub baseline_score: f64,
    pub baseline_ce: f64,
    pub score: f64,
    pub ce: f64,
    pub intervention_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub problem_id: u64,
    pub ptype: ProblemType,
    #[serde(flatten)]
    pub gate: GateDecision,
    pub predicted: u32,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub trained: usize,
    pub untrained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: SymbolSource,
    pub config: InterventionConfig,
    pub per_type: Vec<TypeRow>,
    pub score: f64,
    pub ce: f64,
    pub baseline_score: f64,
    pub baseline_ce: f64,
    /// Bypassed problems whose logits matched the plain forward pass bit for bit.
    pub bypassed: usize,
    pub bypass_identical: usize,
    /// Untrained-type problems scoring at or above the threshold plus
    /// trained-type problems below it, as a fraction of all problems.
    pub overlap_at_threshold: f64,
    pub histogram: Vec<HistogramBin>,
    pub decisions: Vec<DecisionRecord>,
}

impl EvalReport {
    pub fn row(&self, t: ProblemType) -> Option<&TypeRow> {
        self.per_type.iter().find(|r| r.ptype == t)
    }

    pub fn write_json<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self)?;
        writeln!(w)?;
        Ok(())
    }

    /// One row per problem type.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "type,trained,count,baseline_score,baseline_ce,score,ce,intervention_rate")?;
        for r in &self.per_type {
            writeln!(
                w,
                "{},{},{},{:.4},{:.6},{:.4},{:.6},{:.4}",
                r.ptype, r.trained, r.count, r.baseline_score, r.baseline_ce, r.score, r.ce, r.intervention_rate
            )?;
        }
        Ok(())
    }

    /// `bin,count,split` with bins named by their lower edge.
    pub fn write_histogram_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "bin,count,split")?;
        for b in &self.histogram {
            writeln!(w, "{:.2},{},trained", b.lo, b.trained)?;
            writeln!(w, "{:.2},{},untrained", b.lo, b.untrained)?;
        }
        Ok(())
    }
}

pub const HISTOGRAM_WIDTH: f64 = 0.05;

/// Counts of gate scores per bin of width [`HISTOGRAM_WIDTH`], split by
/// whether the problem type is trained.
pub fn score_histogram(scores: &[(bool, f64)]) -> Vec<HistogramBin> {
    if scores.is_empty() {
        return Vec::new();
    }
    let bin = |s: f64| (s / HISTOGRAM_WIDTH).floor() as i64;
    let lo = scores.iter().map(|s| bin(s.1)).min().expect("nonempty");
    let hi = scores.iter().map(|s| bin(s.1)).max().expect("nonempty");
    let mut out: Vec<HistogramBin> = (lo..=hi)
        .map(|b| HistogramBin {
            lo: b as f64 * HISTOGRAM_WIDTH,
            hi: (b + 1) as f64 * HISTOGRAM_WIDTH,
            trained: 0,
            untrained: 0,
        })
        .collect();
    for &(trained, s) in scores {
        let slot = &mut out[(bin(s) - lo) as usize];
        if trained {
            slot.trained += 1;
        } else {
            slot.untrained += 1;
        }
    }
    out
}

struct Outcome {
    base: (bool, f64),
    out: (bool, f64),
    predicted: u32,
    decision: GateDecision,
    identical: Option<bool>,
}

/// Run every problem through the plain model and through the pipeline.
///
/// Bypassed problems go through `forward_with_hook` with the untouched
/// state, and their logits are compared bit for bit with the plain pass.
pub fn evaluate(
    model: &Surrogate,
    encoder: &LinearMap,
    decoder: &LinearMap,
    cb: &Codebook,
    config: &InterventionConfig,
    problems: &[Problem],
    source: SymbolSource,
) -> Result<EvalReport> {
    config.validate()?;
    if problems.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let d_h = model.config().d_h;
    if encoder.d_in() != d_h || decoder.d_out() != d_h {
        return Err(Error::DimensionMismatch(encoder.d_in(), d_h));
    }
    if encoder.d_out() != cb.dim() || decoder.d_in() != cb.dim() {
        return Err(Error::DimensionMismatch(encoder.d_out(), cb.dim()));
    }
    let outcomes: Vec<Outcome> = problems
        .par_iter()
        .map(|p| {
            let plain = model.forward(&p.prompt)?.logits;
            let base = surrogate::score_logits(&plain, p.answer)?;
            let mut decision = None;
            let mut failure = None;
            let logits = model.forward_with_hook(&p.prompt, config.layer, |h| {
                let s = match source {
                    SymbolSource::Encoder => encoder.apply_hrr(&h),
                    SymbolSource::Exact => cb.encode_problem(p.n1, p.n2, p.ptype),
                };
                let res = s.and_then(|s| intervene_with(h.clone(), &s, decoder, cb, config));
                match res {
                    Ok((h2, d)) => {
                        decision = Some(d);
                        h2
                    }
                    Err(e) => {
                        failure = Some(e);
                        h
                    }
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            let decision = decision.expect("hook ran");
            let identical = (!decision.fired).then(|| {
                plain.len() == logits.len() && plain.iter().zip(logits.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            });
            let out = surrogate::score_logits(&logits, p.answer)?;
            let predicted = argmax(&logits);
            Ok(Outcome { base, out, predicted, decision, identical })
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<usize, Vec<(&Problem, &Outcome)>> = BTreeMap::new();
    for (p, o) in problems.iter().zip(&outcomes) {
        groups.entry(p.ptype.index()).or_default().push((p, o));
    }
    let pct = |k: usize, n: usize| 100.0 * k as f64 / n as f64;
    let per_type = groups
        .values()
        .map(|g| {
            let n = g.len();
            let t = g[0].0.ptype;
            TypeRow {
                ptype: t,
                trained: config.trained_tags.contains(&t),
                count: n,
                baseline_score: pct(g.iter().filter(|x| x.1.base.0).count(), n),
                baseline_ce: g.iter().map(|x| x.1.base.1).sum::<f64>() / n as f64,
                score: pct(g.iter().filter(|x| x.1.out.0).count(), n),
                ce: g.iter().map(|x| x.1.out.1).sum::<f64>() / n as f64,
                intervention_rate: g.iter().filter(|x| x.1.decision.fired).count() as f64 / n as f64,
            }
        })
        .collect();
    let n = outcomes.len();
    let trained_flags: Vec<(bool, f64)> = problems
        .iter()
        .zip(&outcomes)
        .map(|(p, o)| (config.trained_tags.contains(&p.ptype), o.decision.score))
        .collect();
    let overlap = trained_flags.iter().filter(|(t, s)| *t != gate_fires(*s, config.threshold)).count();
    let mut decisions: Vec<DecisionRecord> = problems
        .iter()
        .zip(&outcomes)
        .map(|(p, o)| DecisionRecord {
            problem_id: p.id,
            ptype: p.ptype,
            gate: o.decision.clone(),
            predicted: o.predicted,
            correct: o.out.0,
        })
        .collect();
    decisions.sort_by_key(|d| d.problem_id);
    Ok(EvalReport {
        source,
        config: config.clone(),
        per_type,
        score: pct(outcomes.iter().filter(|o| o.out.0).count(), n),
        ce: outcomes.iter().map(|o| o.out.1).sum::<f64>() / n as f64,
        baseline_score: pct(outcomes.iter().filter(|o| o.base.0).count(), n),
        baseline_ce: outcomes.iter().map(|o| o.base.1).sum::<f64>() / n as f64,
        bypassed: outcomes.iter().filter(|o| o.identical.is_some()).count(),
        bypass_identical: outcomes.iter().filter(|o| o.identical == Some(true)).count(),
        overlap_at_threshold: overlap as f64 / n as f64,
        histogram: score_histogram(&trained_flags),
        decisions,
    })
}

fn argmax(z: &DVector<f64>) -> u32 {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &v)| if v > bm { (i, v) } else { (bi, bm) })
        .0 as u32
}

/// Gate score of one recorded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateScore {
    pub problem_id: u64,
    pub ptype: ProblemType,
    pub trained: bool,
    pub tag: ProblemType,
    pub score: f64,
}

/// Encoder reading and best trained-tag score for each trace.
pub fn gate_scores(
    encoder: &LinearMap,
    traces: &[crate::trace::HiddenTrace],
    cb: &Codebook,
    trained_tags: &[ProblemType],
) -> Result<Vec<GateScore>> {
    traces
        .par_iter()
        .map(|t| {
            let meta = t.meta.as_ref().ok_or_else(|| {
                Error::format("trace", format!("problem {} has no metadata; attach the dataset", t.problem_id))
            })?;
            let h = DVector::from_iterator(t.vector.len(), t.vector.iter().map(|&x| x as f64));
            let s = encoder.apply_hrr(&h)?;
            let (tag, score) = cb.query_problem_type(&s, trained_tags)?;
            Ok(GateScore { problem_id: t.problem_id, ptype: meta.ptype, trained: trained_tags.contains(&meta.ptype), tag, score })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    /// Fraction of fired problems that are of a trained type; `None` when
    /// nothing fires.
    pub precision: Option<f64>,
    /// Fraction of trained-type problems that fire.
    pub recall: f64,
    /// Fraction of untrained-type problems that bypass.
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Best balanced accuracy; ties go to the middle of the tied run.
    pub recommended: f64,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "threshold,precision,recall,specificity,balanced_accuracy,recommended")?;
        for r in &self.rows {
            let p = r.precision.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                w,
                "{:.4},{},{:.6},{:.6},{:.6},{}",
                r.threshold,
                p,
                r.recall,
                r.specificity,
                r.balanced_accuracy,
                r.threshold == self.recommended
            )?;
        }
        Ok(())
    }
}

/// `0, 0.05, …, 1.5`.
pub fn default_grid() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 0.05).collect()
}

/// Gate quality per candidate threshold, treating "fires" as the positive
/// prediction and "trained type" as the positive class.
pub fn threshold_sweep(scores: &[GateScore], grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("threshold grid has non-finite entries".into()));
    }
    let pos = scores.iter().filter(|s| s.trained).count();
    let neg = scores.len() - pos;
    let rows: Vec<SweepRow> = grid
        .iter()
        .map(|&t| {
            let tp = scores.iter().filter(|s| s.trained && gate_fires(s.score, t)).count();
            let fp = scores.iter().filter(|s| !s.trained && gate_fires(s.score, t)).count();
            let rate = |k: usize, n: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
            let recall = rate(tp, pos);
            let specificity = rate(neg - fp, neg);
            SweepRow {
                threshold: t,
                precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
                recall,
                specificity,
                balanced_accuracy: 0.5 * (recall + specificity),
            }
        })
        .collect();
    let best = rows.iter().map(|r| r.balanced_accuracy).fold(f64::NEG_INFINITY, f64::max);
    // Middle of the first run of best rows.
    let first = rows.iter().position(|r| r.balanced_accuracy == best).expect("nonempty");
    let len = rows[first..].iter().take_while(|r| r.balanced_accuracy == best).count();
    let recommended = rows[first + (len - 1) / 2].threshold;
    Ok(SweepTable { rows, recommended })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Place;

    fn cb() -> Codebook {
        Codebook::build(2048, 5).unwrap()
    }

    #[test]
    fn solution_vector_roundtrip() {
        let cb = cb();
        for a in [0, 7, 42, 664, 999, 1023, 1999] {
            let v = build_solution_vector(a, &cb).unwrap();
            assert_eq!(cb.query_wide_number(&v, Some(Role::Answer)).unwrap(), a);
            let th = cb.query_digit(&v, Some(Role::Answer), Place::Thousands).unwrap();
            assert_eq!(th.index as u32, a / 1000);
        }
        let zero = build_solution_vector(0, &cb).unwrap();
        let q = cb.query_number(&zero, Some(Role::Answer)).unwrap();
        assert!(q.places.iter().all(|p| p.index == 0));
        assert!(build_solution_vector(2000, &cb).is_err());
    }

    #[test]
    fn mixing_algebra() {
        let o = DVector::from_vec(vec![0.3, -1.7, 2.25, 1e-9]);
        let d = DVector::from_vec(vec![-4.0, 0.1, 0.0, 7.5]);
        assert_eq!(mix_states(&o, &o, 0.5), o);
        assert_eq!(mix_states(&o, &d, 0.0), o);
        assert_eq!(mix_states(&o, &d, 1.0), d);
        let m = mix_states(&o, &d, 0.25);
        for i in 0..4 {
            assert_eq!(m[i], d[i] * 0.25 + o[i] * 0.75);
        }
    }

    #[test]
    fn gate_on_exact_vectors() {
        let cb = cb();
        let cfg = InterventionConfig::new(4);
        let s = cb.encode_problem(932, 152, ProblemType::Multiplication).unwrap();
        let (d, sv) = symbolic_step(&s, &cb, &cfg).unwrap();
        assert!(d.fired && sv.is_some());
        assert_eq!((d.n1, d.n2, d.answer), (Some(932), Some(152), Some(664)));
        let s = cb.encode_problem(12, 7, ProblemType::IntegerDivision).unwrap();
        let (d, sv) = symbolic_step(&s, &cb, &cfg).unwrap();
        assert!(!d.fired && sv.is_none());
        assert_eq!(d.reason, GateReason::BelowThreshold);
        // Division by zero degrades to a bypass.
        let s = cb.encode_problem(12, 0, ProblemType::Modulo).unwrap();
        let (d, sv) = symbolic_step(&s, &cb, &cfg).unwrap();
        assert_eq!(d.reason, GateReason::SolverDivisionByZero);
        assert!(sv.is_none());
    }

    #[test]
    fn config_checks() {
        let mut c = InterventionConfig::new(2);
        assert!(c.validate().is_ok());
        c.mix = 1.5;
        assert!(c.validate().is_err());
        c.mix = 0.5;
        c.threshold = 0.0;
        assert!(c.validate().is_err());
        assert!(gate_fires(-3.0, 0.0));
        assert!(!gate_fires(0.79, 0.8));
        assert!(gate_fires(0.8, 0.8));
    }

    fn gs(trained: bool, score: f64) -> GateScore {
        let t = if trained { ProblemType::Gcd } else { ProblemType::Addition };
        GateScore { problem_id: 0, ptype: t, trained, tag: ProblemType::Gcd, score }
    }

    #[test]
    fn sweep_extremes() {
        let scores = vec![gs(true, 1.02), gs(true, 0.95), gs(false, 0.5), gs(false, 0.42)];
        let table = threshold_sweep(&scores, &default_grid()).unwrap();
        let at = |t: f64| table.rows.iter().find(|r| (r.threshold - t).abs() < 1e-12).unwrap();
        let zero = at(0.0);
        assert_eq!((zero.recall, zero.specificity), (1.0, 0.0));
        let top = at(1.5);
        assert_eq!((top.recall, top.specificity, top.precision), (0.0, 1.0, None));
        assert_eq!(at(0.8).balanced_accuracy, 1.0);
        assert!(table.recommended > 0.5 && table.recommended <= 0.95);
        assert!(threshold_sweep(&scores, &[]).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = score_histogram(&[(true, 1.0264), (false, 0.5666), (false, 0.57), (true, 1.01)]);
        assert_eq!(h.first().unwrap().untrained, 2);
        assert_eq!(h.last().unwrap().trained, 2);
        assert_eq!(h.iter().map(|b| b.trained + b.untrained).sum::<usize>(), 4);
        assert!(score_histogram(&[]).is_empty());
    }
}
