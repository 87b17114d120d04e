//! Linear probes between hidden states and symbolic vectors.
//!
//! The encoder maps a hidden state to an HRR problem vector, the decoder maps
//! an HRR vector back to a hidden state. Both are ridge regressions; the
//! decoder is then fine-tuned on answer cross-entropy by gradient descent
//! through the remaining surrogate blocks.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, Place, Role, NUMBER_PLACES};
use crate::error::{Error, Result};
use crate::hrr::HrrVector;
use crate::pipeline::{self, InterventionConfig};
use crate::problems::Problem;
use crate::seed;
use crate::surrogate::{self, Surrogate, OUTPUT_CHANNELS};
use crate::trace::HiddenTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Encoder,
    Decoder,
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Encoder => "encoder",
            Direction::Decoder => "decoder",
        }
    }
}

/// `y = matrix·x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub matrix: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub direction: Direction,
    pub layer: usize,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>, bias: DVector<f64>, direction: Direction, layer: usize) -> Result<Self> {
        if bias.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch(bias.len(), matrix.nrows()));
        }
        if matrix.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("linear map has non-finite entries".into()));
        }
        Ok(LinearMap { matrix, bias, direction, layer })
    }

    pub fn d_in(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.bias
    }

    pub fn apply_hrr(&self, x: &DVector<f64>) -> Result<HrrVector> {
        HrrVector::new(self.apply(x).data.into())
    }

    /// Apply to every row of `x` (N × d_in), giving N × d_out.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.matrix.transpose();
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        y
    }

    /// `HRRMAP <d_out> <d_in> <direction> <layer>\n`, then the row-major
    /// matrix and the bias as little-endian f32.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "HRRMAP {} {} {} {}", self.d_out(), self.d_in(), self.direction.name(), self.layer)?;
        let mut buf = Vec::with_capacity(4 * (self.d_out() * (self.d_in() + 1)));
        for r in 0..self.d_out() {
            for c in 0..self.d_in() {
                buf.extend_from_slice(&(self.matrix[(r, c)] as f32).to_le_bytes());
            }
        }
        for &b in self.bias.iter() {
            buf.extend_from_slice(&(b as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let ["HRRMAP", d_out, d_in, dir, layer] = f.as_slice() else {
            return Err(Error::format("HRRMAP", format!("bad header {line:?}")));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("HRRMAP", format!("bad number {s}")));
        let (d_out, d_in, layer) = (parse(d_out)?, parse(d_in)?, parse(layer)?);
        let direction = match *dir {
            "encoder" => Direction::Encoder,
            "decoder" => Direction::Decoder,
            other => return Err(Error::format("HRRMAP", format!("unknown direction {other}"))),
        };
        let mut raw = vec![0u8; 4 * d_out * (d_in + 1)];
        r.read_exact(&mut raw)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let matrix = DMatrix::from_row_slice(d_out, d_in, &vals[..d_out * d_in]);
        let bias = DVector::from_column_slice(&vals[d_out * d_in..]);
        LinearMap::new(matrix, bias, direction, layer)
    }
}

/// How to solve the ridge problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMode {
    /// Normal equations via Cholesky.
    ClosedForm,
    /// Shuffled mini-batch gradient descent.
    Sgd { epochs: usize, batch: usize, seed: u64 },
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// RMSE for encoder/decoder fits, mean cross-entropy for fine-tuning.
    pub loss: f64,
    pub step: Option<f64>,
    pub eval_score: Option<f64>,
    pub eval_ce: Option<f64>,
}

/// Fraction of wrong digits per operand slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitError {
    /// n1 hundreds, tens, ones, then n2 hundreds, tens, ones.
    pub per_slot: [f64; 6],
    /// Hundreds, tens, ones averaged over both operands.
    pub per_place: [f64; 3],
    pub samples: usize,
}

impl DigitError {
    pub fn max(&self) -> f64 {
        self.per_slot.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub encoder_rmse: f64,
    pub decoder_rmse: f64,
    pub digit_error: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub epochs: Vec<EpochRecord>,
    pub digit_error: Option<DigitError>,
    pub layers: Vec<LayerRecord>,
    /// Samples left out (untrained types, gate misses).
    pub skipped: usize,
}

impl TrainReport {
    fn new(kind: &str) -> Self {
        TrainReport { kind: kind.into(), epochs: Vec::new(), digit_error: None, layers: Vec::new(), skipped: 0 }
    }

    /// Per-epoch CSV: epoch, loss, step, eval_score, eval_ce.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,loss,step,eval_score,eval_ce")?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.8}")).unwrap_or_default();
        for e in &self.epochs {
            writeln!(w, "{},{:.8},{},{},{}", e.epoch, e.loss, opt(e.step), opt(e.eval_score), opt(e.eval_ce))?;
        }
        Ok(())
    }
}

/// Root of the mean squared error over all entries.
pub fn rmse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    ((pred - target).norm_squared() / (pred.len() as f64)).sqrt()
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

/// Ridge fit of `y ≈ x·Wᵀ + 1·bᵀ` minimizing `mean‖residual‖² + λ‖W‖²`
/// (bias unpenalized). Returns W (d_out × d_in), b and the RMSE history.
pub fn fit_ridge(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    mode: FitMode,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<f64>)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("ridge fit without samples"));
    }
    if y.nrows() != n {
        return Err(Error::DimensionMismatch(y.nrows(), n));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("ridge λ must be finite and nonnegative, got {lambda}")));
    }
    let xm = column_means(x);
    let ym = column_means(y);
    let xc = centered(x, &xm);
    let yc = centered(y, &ym);
    let nf = n as f64;

    let (w, history) = match mode {
        FitMode::ClosedForm => {
            let rank_err = || {
                Error::Numerical(format!(
                    "normal equations are singular (λ = {lambda}); the inputs are rank-deficient, use λ > 0"
                ))
            };
            let w = if n >= x.ncols() {
                let xt = xc.transpose();
                let mut g = &xt * &xc / nf;
                for i in 0..g.nrows() {
                    g[(i, i)] += lambda;
                }
                let rhs = &xt * &yc / nf;
                let chol = g.cholesky().ok_or_else(rank_err)?;
                chol.solve(&rhs).transpose()
            } else {
                // Dual form: Wᵀ = Xcᵀ (Xc Xcᵀ/N + λI)⁻¹ Yc/N.
                let mut k = &xc * xc.transpose() / nf;
                for i in 0..n {
                    k[(i, i)] += lambda;
                }
                let chol = k.cholesky().ok_or_else(rank_err)?;
                let alpha = chol.solve(&(&yc / nf));
                (xc.transpose() * alpha).transpose()
            };
            (w, Vec::new())
        }
        FitMode::Sgd { epochs, batch, seed } => sgd_ridge(&xc, &yc, lambda, epochs, batch.max(1), seed)?,
    };
    let b = &ym - &w * &xm;
    if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("ridge solution is not finite".into()));
    }
    let mut history = history;
    let pred = &xc * w.transpose();
    history.push(rmse(&pred, &yc));
    Ok((w, b, history))
}

/// Largest eigenvalue of XᵀX/N + λI by power iteration.
fn top_eigenvalue(xc: &DMatrix<f64>, lambda: f64) -> f64 {
    let nf = xc.nrows() as f64;
    let mut v = DVector::from_element(xc.ncols(), 1.0 / (xc.ncols() as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..100 {
        let u = xc.transpose() * (xc * &v) / nf + &v * lambda;
        let norm = u.norm();
        if norm == 0.0 {
            return lambda.max(1e-12);
        }
        let converged = (norm - est).abs() <= 1e-9 * norm;
        est = norm;
        v = u / norm;
        if converged {
            break;
        }
    }
    est
}

fn sgd_ridge(
    xc: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    lambda: f64,
    epochs: usize,
    batch: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = xc.nrows();
    // Step 1/L for the smooth objective; batches see the same curvature on average.
    let step = 0.5 / top_eigenvalue(xc, lambda);
    let mut w = DMatrix::<f64>::zeros(yc.ncols(), xc.ncols());
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed, "sgd-ridge");
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        // Decay so minibatch noise does not set a floor on the loss.
        let lr = 2.0 * step / (1.0 + epoch as f64 / 2.0);
        for chunk in order.chunks(batch) {
            let xb = xc.select_rows(chunk);
            let yb = yc.select_rows(chunk);
            let resid = &xb * w.transpose() - yb;
            // ∇ = (2/B)·residᵀ·X + 2λW; the factor 2 is folded into lr.
            let grad = resid.transpose() * xb / chunk.len() as f64 + &w * lambda;
            w -= grad * lr;
        }
        let r = rmse(&(xc * w.transpose()), yc);
        if !r.is_finite() {
            return Err(Error::Numerical("gradient descent diverged".into()));
        }
        history.push(r);
    }
    Ok((w, history))
}

fn rows_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> DMatrix<f64> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * width);
    for r in rows {
        flat.extend_from_slice(r);
    }
    DMatrix::from_row_slice(n, width, &flat)
}

fn trace_matrix(traces: &[&HiddenTrace]) -> Result<DMatrix<f64>> {
    let d = traces.first().map(|t| t.vector.len()).ok_or(Error::Empty("no traces"))?;
    let mut flat = Vec::with_capacity(traces.len() * d);
    for t in traces {
        if t.vector.len() != d {
            return Err(Error::DimensionMismatch(t.vector.len(), d));
        }
        flat.extend(t.vector.iter().map(|&x| x as f64));
    }
    Ok(DMatrix::from_row_slice(traces.len(), d, &flat))
}

/// Traces of trained types from a single layer.
fn usable_traces(traces: &[HiddenTrace]) -> Result<(Vec<&HiddenTrace>, usize, usize)> {
    let first = traces.first().ok_or(Error::Empty("no traces"))?;
    let layer = first.layer;
    if traces.iter().any(|t| t.layer != layer) {
        return Err(Error::Config("probe training needs traces from a single layer".into()));
    }
    let mut keep = Vec::with_capacity(traces.len());
    for t in traces {
        let meta = t.meta.as_ref().ok_or_else(|| {
            Error::format("trace", format!("problem {} has no metadata; attach the dataset", t.problem_id))
        })?;
        if meta.ptype.trained() {
            keep.push(t);
        }
    }
    if keep.is_empty() {
        return Err(Error::Empty("no traces of trained problem types"));
    }
    let skipped = traces.len() - keep.len();
    Ok((keep, layer as usize, skipped))
}

/// Fit the hidden → problem-vector encoder on traces from one layer.
/// Traces of untrained types are skipped.
pub fn train_encoder(
    traces: &[HiddenTrace],
    cb: &Codebook,
    lambda: f64,
    mode: FitMode,
) -> Result<(LinearMap, TrainReport)> {
    let (keep, layer, skipped) = usable_traces(traces)?;
    let x = trace_matrix(&keep)?;
    let targets: Vec<HrrVector> = keep
        .par_iter()
        .map(|t| {
            let m = t.meta.as_ref().expect("checked");
            cb.encode_problem(m.n1, m.n2, m.ptype)
        })
        .collect::<Result<_>>()?;
    let y = rows_matrix(targets.iter().map(|v| v.values()), cb.dim());
    let (w, b, history) = fit_ridge(&x, &y, lambda, mode)?;
    let map = LinearMap::new(w, b, Direction::Encoder, layer)?;
    let mut report = TrainReport::new("encoder");
    report.skipped = skipped;
    report.epochs = epochs_from(&history);
    report.digit_error = Some(digit_error(&map, traces, cb)?);
    Ok((map, report))
}

fn epochs_from(history: &[f64]) -> Vec<EpochRecord> {
    history
        .iter()
        .enumerate()
        .map(|(i, &l)| EpochRecord { epoch: i + 1, loss: l, step: None, eval_score: None, eval_ce: None })
        .collect()
}

/// Digit-classification error of an encoder on traces of trained types.
pub fn digit_error(encoder: &LinearMap, traces: &[HiddenTrace], cb: &Codebook) -> Result<DigitError> {
    let (keep, _, _) = usable_traces(traces)?;
    let wrong: Vec<[bool; 6]> = keep
        .par_iter()
        .map(|t| {
            let m = t.meta.as_ref().expect("checked");
            let h = DVector::from_iterator(t.vector.len(), t.vector.iter().map(|&x| x as f64));
            let s = encoder.apply_hrr(&h)?;
            let mut out = [false; 6];
            for (r, (role, n)) in [(Role::N1, m.n1), (Role::N2, m.n2)].into_iter().enumerate() {
                let q = cb.query_number(&s, Some(role))?;
                let truth = [n / 100, n / 10 % 10, n % 10];
                for (i, c) in q.places.iter().enumerate() {
                    out[3 * r + i] = c.index as u32 != truth[i];
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = wrong.len() as f64;
    let mut per_slot = [0.0; 6];
    for w in &wrong {
        for (acc, &bad) in per_slot.iter_mut().zip(w) {
            *acc += bad as u8 as f64;
        }
    }
    per_slot.iter_mut().for_each(|v| *v /= n);
    let per_place = [0, 1, 2].map(|i| 0.5 * (per_slot[i] + per_slot[i + 3]));
    debug_assert_eq!(NUMBER_PLACES[0], Place::Hundreds);
    Ok(DigitError { per_slot, per_place, samples: wrong.len() })
}

/// Fit the symbolic → hidden decoder on (encoder(h), h) pairs.
pub fn train_decoder(
    encoder: &LinearMap,
    traces: &[HiddenTrace],
    lambda: f64,
    mode: FitMode,
) -> Result<(LinearMap, TrainReport)> {
    let (keep, layer, skipped) = usable_traces(traces)?;
    let h = trace_matrix(&keep)?;
    if h.ncols() != encoder.d_in() {
        return Err(Error::DimensionMismatch(h.ncols(), encoder.d_in()));
    }
    let s = encoder.apply_rows(&h);
    let (w, b, history) = fit_ridge(&s, &h, lambda, mode)?;
    let map = LinearMap::new(w, b, Direction::Decoder, layer)?;
    let mut report = TrainReport::new("decoder");
    report.skipped = skipped;
    report.epochs = epochs_from(&history);
    Ok((map, report))
}

/// Encoder RMSE, decoder∘encoder reconstruction RMSE and per-place digit
/// error of a probe pair fitted on `train` and scored on `eval` (traces of
/// one layer).
pub fn layer_record(train: &[HiddenTrace], eval: &[HiddenTrace], cb: &Codebook, lambda: f64) -> Result<LayerRecord> {
    let (enc, _) = train_encoder(train, cb, lambda, FitMode::ClosedForm)?;
    let (dec, _) = train_decoder(&enc, train, lambda, FitMode::ClosedForm)?;
    let (keep, layer, _) = usable_traces(eval)?;
    let h = trace_matrix(&keep)?;
    let targets: Vec<HrrVector> = keep
        .par_iter()
        .map(|t| {
            let m = t.meta.as_ref().expect("checked");
            cb.encode_problem(m.n1, m.n2, m.ptype)
        })
        .collect::<Result<_>>()?;
    let y = rows_matrix(targets.iter().map(|v| v.values()), cb.dim());
    let s = enc.apply_rows(&h);
    let recon = dec.apply_rows(&s);
    Ok(LayerRecord {
        layer,
        encoder_rmse: rmse(&s, &y),
        decoder_rmse: rmse(&recon, &h),
        digit_error: digit_error(&enc, eval, cb)?.per_place,
    })
}

/// [`layer_record`] at each of `layers`, recording fresh traces.
pub fn layer_curves(
    model: &Surrogate,
    train: &[Problem],
    eval: &[Problem],
    cb: &Codebook,
    lambda: f64,
    layers: &[usize],
) -> Result<Vec<LayerRecord>> {
    layers
        .iter()
        .map(|&layer| {
            let tr = crate::trace::export_traces(model, train, &[layer as u16])?;
            let ev = crate::trace::export_traces(model, eval, &[layer as u16])?;
            layer_record(&tr, &ev, cb, lambda)
        })
        .collect()
}

/// Controls for [`finetune_decoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub step: f64,
    /// Epochs without relative improvement before the step is halved.
    pub patience: usize,
    pub min_improvement: f64,
    /// Evaluate the held-out set every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule { epochs: 150, step: 1e-3, patience: 10, min_improvement: 1e-4, eval_every: 25 }
    }
}

/// Fixed inputs of the fine-tuning objective for one problem set.
struct CeBatch {
    /// Cone coordinates of the intervention-layer state (k × N).
    h_orig: DMatrix<f64>,
    /// Solution vectors (d_s × N), factored as `basis · coef`.
    sv: Factored,
    answers: Vec<u32>,
    /// Problems the gate bypasses: (correct, ce) of the plain forward pass.
    bypassed: Vec<(bool, f64)>,
}

fn prepare_batch(
    model: &Surrogate,
    cone: &surrogate::Cone,
    encoder: &LinearMap,
    cb: &Codebook,
    config: &InterventionConfig,
    problems: &[Problem],
) -> Result<CeBatch> {
    let layer = config.layer;
    let states = model.states_at(problems, layer)?;
    let prepared: Vec<(Option<HrrVector>, &DVector<f64>, &Problem)> = states
        .par_iter()
        .zip(problems.par_iter())
        .map(|(h, p)| {
            let s = encoder.apply_hrr(h)?;
            let (_, sv) = pipeline::symbolic_step(&s, cb, config)?;
            Ok((sv, h, p))
        })
        .collect::<Result<_>>()?;
    let mut h_rows = Vec::new();
    let mut sv_rows = Vec::new();
    let mut answers = Vec::new();
    let mut bypassed_idx = Vec::new();
    for (sv, h, p) in &prepared {
        match sv {
            Some(v) => {
                h_rows.push(cone.coords.iter().map(|&c| h[c]).collect::<Vec<_>>());
                sv_rows.push(v.values().to_vec());
                answers.push(p.answer);
            }
            None => bypassed_idx.push((*h, *p)),
        }
    }
    let bypassed = bypassed_idx
        .par_iter()
        .map(|(h, p)| surrogate::score_logits(&model.logits(&model.run_from(layer, (*h).clone())), p.answer))
        .collect::<Result<_>>()?;
    Ok(CeBatch {
        h_orig: columns_matrix(&h_rows, cone.coords.len()),
        sv: Factored::new(&sv_rows, cb.dim()),
        answers,
        bypassed,
    })
}

/// Columns `basis · coef`, where `basis` has orthonormal columns spanning
/// the data. Solution vectors are sums of a few dozen fixed bindings, so the
/// rank is small and every product with the solution batch runs in the
/// span instead of the full symbolic dimension. `basis` is `None` when the
/// columns are too close to full rank for this to pay off.
struct Factored {
    basis: Option<DMatrix<f64>>,
    coef: DMatrix<f64>,
}

impl Factored {
    fn new(cols: &[Vec<f64>], height: usize) -> Self {
        let max_rank = height / 4;
        let mut distinct: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut slot = Vec::with_capacity(cols.len());
        let mut uniq: Vec<&Vec<f64>> = Vec::new();
        for c in cols {
            let key: Vec<u64> = c.iter().map(|x| x.to_bits()).collect();
            let next = uniq.len();
            let i = *distinct.entry(key).or_insert(next);
            if i == next {
                uniq.push(c);
            }
            slot.push(i);
        }
        // Gram-Schmidt, twice per column, dropping columns already in the span.
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for c in &uniq {
            let mut v = DVector::from_column_slice(c);
            let norm0 = v.norm();
            for _ in 0..2 {
                for q in &basis {
                    let d = q.dot(&v);
                    v.axpy(-d, q, 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-9 * norm0.max(f64::MIN_POSITIVE) {
                if basis.len() == max_rank {
                    return Factored { basis: None, coef: columns_matrix(cols, height) };
                }
                basis.push(v / norm);
            }
        }
        if basis.is_empty() {
            return Factored { basis: None, coef: columns_matrix(cols, height) };
        }
        let q = DMatrix::from_columns(&basis);
        let u = columns_matrix(&uniq.iter().map(|c| c.to_vec()).collect::<Vec<_>>(), height);
        let cu = q.transpose() * u;
        let coef = DMatrix::from_fn(basis.len(), cols.len(), |r, j| cu[(r, slot[j])]);
        Factored { basis: Some(q), coef }
    }
}

fn columns_matrix(cols: &[Vec<f64>], height: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(height, cols.len(), cols.iter().flatten().copied())
}

const CHUNK: usize = 512;

/// Mean CE over the batch's intervened problems, optionally with the
/// gradient with respect to the decoder's cone rows and bias.
#[allow(clippy::type_complexity)]
fn ce_and_grad(
    model: &Surrogate,
    cone: &surrogate::Cone,
    dec_rows: &DMatrix<f64>,
    dec_bias: &DVector<f64>,
    mix: f64,
    batch: &CeBatch,
    want_grad: bool,
) -> Result<(f64, usize, Option<(DMatrix<f64>, DVector<f64>)>)> {
    let n = batch.answers.len();
    // Decoder rows seen through the span of the solution vectors.
    let projected;
    let rows = match &batch.sv.basis {
        Some(q) => {
            projected = dec_rows * q;
            &projected
        }
        None => dec_rows,
    };
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<(f64, usize, Option<(DMatrix<f64>, DVector<f64>)>)> = starts
        .par_iter()
        .map(|&s0| {
            let m = CHUNK.min(n - s0);
            let sv = batch.sv.coef.columns(s0, m);
            let mut h = rows * sv;
            for mut col in h.column_iter_mut() {
                col += dec_bias;
            }
            h *= mix;
            h += batch.h_orig.columns(s0, m) * (1.0 - mix);
            let (fin, cache) = cone.forward(h);
            let (ce, hits, g_fin) = cone.readout_ce(model, &fin, &batch.answers[s0..s0 + m], want_grad)?;
            let grad = match g_fin {
                Some(g) => {
                    let g0 = cone.backward(&cache, g) * mix;
                    let gb = g0.column_sum();
                    Some((g0 * sv.transpose(), gb))
                }
                None => None,
            };
            Ok((ce, hits, grad))
        })
        .collect::<Result<_>>()?;
    let mut ce = 0.0;
    let mut hits = 0;
    let mut grad: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for (c, h, g) in parts {
        ce += c;
        hits += h;
        if let Some((gw, gb)) = g {
            grad = Some(match grad {
                Some((aw, ab)) => (aw + gw, ab + gb),
                None => (gw, gb),
            });
        }
    }
    let nf = n.max(1) as f64;
    let grad = grad.map(|(w, b)| {
        let w = match &batch.sv.basis {
            Some(q) => w * q.transpose(),
            None => w,
        };
        (w / nf, b / nf)
    });
    Ok((ce / nf, hits, grad))
}

/// Score and mean CE on a prepared set, counting bypassed problems too.
fn batch_metrics(
    model: &Surrogate,
    cone: &surrogate::Cone,
    dec_rows: &DMatrix<f64>,
    dec_bias: &DVector<f64>,
    mix: f64,
    batch: &CeBatch,
) -> Result<(f64, f64)> {
    let (ce, hits, _) = ce_and_grad(model, cone, dec_rows, dec_bias, mix, batch, false)?;
    let n_int = batch.answers.len();
    let total = n_int + batch.bypassed.len();
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    let by_hits = batch.bypassed.iter().filter(|b| b.0).count();
    let by_ce: f64 = batch.bypassed.iter().map(|b| b.1).sum();
    let score = 100.0 * (hits + by_hits) as f64 / total as f64;
    Ok((score, (ce * n_int as f64 + by_ce) / total as f64))
}

/// Gradient descent on answer cross-entropy with respect to the decoder.
///
/// For each training problem the encoder reads the intervention-layer
/// state, the gate and solver build a solution vector, and the decoded
/// vector is mixed into the state; problems the gate bypasses do not depend
/// on the decoder and are left out. Gradients flow back from the readout
/// through the surrogate blocks. Only decoder rows inside the readout's
/// dependency cone can change the loss; every other row has an exactly zero
/// gradient and is left untouched.
///
/// The step halves whenever the training loss fails to improve by
/// `min_improvement` (relative) for `patience` epochs. Training stops
/// early once the loss is exactly zero. A non-finite loss aborts with the
/// last finite decoder in the error.
#[allow(clippy::too_many_arguments)]
pub fn finetune_decoder(
    decoder: &LinearMap,
    model: &Surrogate,
    encoder: &LinearMap,
    cb: &Codebook,
    config: &InterventionConfig,
    train: &[Problem],
    eval: &[Problem],
    schedule: &FinetuneSchedule,
) -> Result<(LinearMap, TrainReport)> {
    config.validate()?;
    if decoder.d_out() != model.config().d_h || decoder.d_in() != cb.dim() {
        return Err(Error::DimensionMismatch(decoder.d_in(), cb.dim()));
    }
    let cone = model.readout_cone(config.layer);
    let train_b = prepare_batch(model, &cone, encoder, cb, config, train)?;
    if train_b.answers.is_empty() {
        return Err(Error::Empty("no training problem passes the gate"));
    }
    let eval_b = if eval.is_empty() || schedule.eval_every == 0 {
        None
    } else {
        Some(prepare_batch(model, &cone, encoder, cb, config, eval)?)
    };

    let mut rows = decoder.matrix.select_rows(&cone.coords);
    let mut bias = DVector::from_iterator(cone.coords.len(), cone.coords.iter().map(|&c| decoder.bias[c]));
    let mut step = schedule.step;
    let mut report = TrainReport::new("finetune");
    report.skipped = train_b.bypassed.len();

    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    let mut checkpoint = (rows.clone(), bias.clone());
    let record_eval = |rows: &DMatrix<f64>, bias: &DVector<f64>| -> Result<(Option<f64>, Option<f64>)> {
        match &eval_b {
            Some(b) => {
                let (s, c) = batch_metrics(model, &cone, rows, bias, config.mix, b)?;
                Ok((Some(s), Some(c)))
            }
            None => Ok((None, None)),
        }
    };
    for epoch in 0..=schedule.epochs {
        let last = epoch == schedule.epochs;
        let (ce, _, grad) = ce_and_grad(model, &cone, &rows, &bias, config.mix, &train_b, !last)?;
        if !ce.is_finite() {
            let dec = write_rows(decoder, &cone.coords, &checkpoint.0, &checkpoint.1)?;
            return Err(Error::Diverged { epoch, checkpoint: Box::new(dec) });
        }
        checkpoint = (rows.clone(), bias.clone());
        // A zero loss has a zero gradient; further epochs change nothing.
        let done = last || ce == 0.0;
        let due = schedule.eval_every > 0 && (epoch % schedule.eval_every == 0 || done);
        let (eval_score, eval_ce) = if due { record_eval(&rows, &bias)? } else { (None, None) };
        report.epochs.push(EpochRecord { epoch, loss: ce, step: Some(step), eval_score, eval_ce });
        if done {
            break;
        }
        if ce < best * (1.0 - schedule.min_improvement) {
            best = ce;
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                step *= 0.5;
                stale = 0;
            }
        }
        let (gw, gb) = grad.expect("gradient requested");
        rows -= gw * step;
        bias -= gb * step;
    }
    let tuned = write_rows(decoder, &cone.coords, &rows, &bias)?;
    Ok((tuned, report))
}

fn write_rows(base: &LinearMap, coords: &[usize], rows: &DMatrix<f64>, bias: &DVector<f64>) -> Result<LinearMap> {
    let mut out = base.clone();
    for (i, &c) in coords.iter().enumerate() {
        out.matrix.row_mut(c).copy_from(&rows.row(i));
        out.bias[c] = bias[i];
    }
    LinearMap::new(out.matrix, out.bias, out.direction, out.layer)
}

/// Output-channel block of a cone state (for tests and diagnostics).
pub fn output_channels(h: &DVector<f64>, model: &Surrogate) -> DVector<f64> {
    h.rows(model.config().output_start(), OUTPUT_CHANNELS).into_owned()
}
