//! A small deterministic layered model standing in for a language model.
//!
//! The hidden state of width `d_h` is split into three bands:
//!
//! * value channels, one per prompt position: a number token at position p
//!   writes `n / 1000` into channel p;
//! * forty output channels (four places × ten digits) that the answer
//!   readout projects through a fixed orthonormal unembedding;
//! * mixing coordinates carrying word, digit and position identity.
//!
//! The layer-0 state is the sum of token embeddings. Each of the `L` blocks
//! adds `f_n(h) = W2·tanh(W1·h + b1)` to the residual stream. Most hidden
//! units read everything and write only mixing coordinates; a small set of
//! readout units reads and writes only the output channels. On ordinary
//! prompts the output channels therefore stay exactly zero and the value
//! channels pass through untouched, so the readout is a linear function of
//! the operands: good at addition, hopeless at everything else. Anything
//! written into the output channels at an intermediate layer (by an
//! intervention) is carried to the readout through the readout units.
//!
//! The answer readout scores token k as
//! `γ·u_k·h_out + β·(2k·ŝ − k²)`, with `ŝ = c·h_value`. The unembedding rows
//! `u_k` sum one orthonormal direction per (place, digit) of k; `c` and `β`
//! are fitted by [`Surrogate::train_readout`].

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{Problem, ProblemType};
use crate::seed;

/// Number of answer tokens (0..1999).
pub const ANSWER_VOCAB: usize = 2000;
// The readout walks tokens digit by digit.
const _: () = assert!(ANSWER_VOCAB.is_multiple_of(1000));
/// Output channels: thousands, hundreds, tens, ones × ten digits.
pub const OUTPUT_CHANNELS: usize = 40;
/// Fewest mixing coordinates a configuration may leave.
pub const MIN_MIXING: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub d_h: usize,
    pub layers: usize,
    pub mlp_width: usize,
    /// Longest prompt in tokens; one value channel per position.
    pub positions: usize,
    /// Hidden units per block reserved for the output channels.
    pub readout_units: usize,
    pub input_gain: f64,
    pub output_gain: f64,
    pub bias_std: f64,
    /// γ, the gain on the output-channel logits. It only matters once a
    /// decoder writes the output channels. Large values keep those rows
    /// about as stiff as the value rows, so plain gradient descent on the
    /// decoder is well conditioned.
    pub logit_gain: f64,
    pub intervention_layer: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            d_h: 256,
            layers: 8,
            mlp_width: 512,
            positions: 16,
            readout_units: 64,
            input_gain: 1.0,
            output_gain: 0.25,
            bias_std: 0.1,
            logit_gain: 100_000.0,
            intervention_layer: 8 * 17 / 32,
        }
    }
}

impl SurrogateConfig {
    /// floor(L·17/32), the relative depth of layer 17 in a 32-layer model.
    pub fn default_intervention_layer(layers: usize) -> usize {
        (layers * 17 / 32).max(1)
    }

    /// First output channel.
    pub fn output_start(&self) -> usize {
        self.positions
    }

    /// First mixing coordinate.
    pub fn mixing_start(&self) -> usize {
        self.positions + OUTPUT_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_h < 32 {
            return err(format!("d_h = {} is below 32", self.d_h));
        }
        if self.d_h < self.mixing_start() + MIN_MIXING {
            return err(format!(
                "d_h = {} leaves fewer than {MIN_MIXING} mixing coordinates after {} value and {OUTPUT_CHANNELS} output channels",
                self.d_h, self.positions
            ));
        }
        if self.layers == 0 {
            return err("need at least one layer".into());
        }
        if !(1..=self.layers).contains(&self.intervention_layer) {
            return err(format!("intervention layer {} outside 1..={}", self.intervention_layer, self.layers));
        }
        if self.readout_units == 0 || self.readout_units >= self.mlp_width {
            return err(format!("readout units {} must lie in 1..{}", self.readout_units, self.mlp_width));
        }
        if self.positions < 8 {
            return err(format!("{} positions cannot hold the prompt templates", self.positions));
        }
        for (name, v) in [
            ("input_gain", self.input_gain),
            ("output_gain", self.output_gain),
            ("bias_std", self.bias_std),
            ("logit_gain", self.logit_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return err(format!("{name} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Fitted answer head: `ŝ = center·h_value`, sharpness β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub center: Vec<f64>,
    pub sharpness: f64,
}

/// Controls for [`Surrogate::train_readout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutSchedule {
    /// Ridge term of the least-squares center fit.
    pub ridge: f64,
    pub max_iters: usize,
    /// Stop when the Newton step on β falls below this relative size.
    pub tol: f64,
}

impl Default for ReadoutSchedule {
    fn default() -> Self {
        ReadoutSchedule { ridge: 1e-9, max_iters: 100, tol: 1e-12 }
    }
}

/// Score (% argmax-correct) and mean cross-entropy for one problem type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub ptype: ProblemType,
    pub count: usize,
    pub score: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutReport {
    pub readout: Readout,
    /// Training cross-entropy after each Newton step on β.
    pub ce_trace: Vec<f64>,
    pub per_type: Vec<TypeMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Word(usize),
    Number(u32),
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub(crate) w1: DMatrix<f64>,
    pub(crate) b1: DVector<f64>,
    pub(crate) w2: DMatrix<f64>,
}

impl Block {
    fn delta(&self, h: &DVector<f64>) -> DVector<f64> {
        let mut pre = &self.w1 * h;
        pre += &self.b1;
        pre.apply(|x| *x = x.tanh());
        &self.w2 * pre
    }
}

/// Per-layer states of the final token and the answer logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `L + 1` states; index 0 is the embedding sum.
    pub states: Vec<DVector<f64>>,
    pub logits: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    config: SurrogateConfig,
    seed: u64,
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    word_emb: Vec<DVector<f64>>,
    /// [place][digit], place 0 = hundreds.
    digit_emb: Vec<Vec<DVector<f64>>>,
    pos_sign: Vec<DVector<f64>>,
    pub(crate) blocks: Vec<Block>,
    /// ANSWER_VOCAB × OUTPUT_CHANNELS.
    unembed: DMatrix<f64>,
    /// The orthonormal (place, digit) directions the unembedding rows sum;
    /// column `place·10 + digit`.
    digit_dirs: DMatrix<f64>,
    readout: Readout,
}

/// Prompt words known to the tokenizer, in sorted order.
pub fn template_words() -> Vec<String> {
    let mut words: Vec<String> = ProblemType::ALL
        .iter()
        .flat_map(|t| split_prompt(t.template()))
        .filter(|w| !w.starts_with('{'))
        .map(str::to_string)
        .collect();
    words.sort();
    words.dedup();
    words
}

/// Whitespace split with a trailing `?` as its own token.
fn split_prompt(prompt: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in prompt.split_whitespace() {
        match w.strip_suffix('?') {
            Some(stem) if !stem.is_empty() => {
                out.push(stem);
                out.push("?");
            }
            _ => out.push(w),
        }
    }
    out
}

fn gaussian(label: &str, master: u64, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let mut rng = seed::rng(master, label);
    let normal = Normal::new(0.0, std).expect("finite std");
    // Row-major draw order so the layout does not depend on storage order.
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

impl Surrogate {
    /// Build the model. Weights are fixed random draws; the readout starts
    /// at zero, which makes every answer token equally likely.
    pub fn build(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_h;
        let m0 = config.mixing_start();
        let nm = d - m0;
        let mix_std = 1.0 / (nm as f64).sqrt();
        let mixing = |label: &str| -> DVector<f64> {
            let draw = gaussian(label, seed, nm, 1, mix_std);
            let mut v = DVector::zeros(d);
            v.rows_mut(m0, nm).copy_from(&draw.column(0));
            v
        };

        let words = template_words();
        let vocab = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let word_emb = words.iter().map(|w| mixing(&format!("word:{w}"))).collect();
        let digit_emb = (0..3)
            .map(|p| (0..10).map(|k| mixing(&format!("digit-embed:{p}:{k}"))).collect())
            .collect();
        let pos_sign = (0..config.positions)
            .map(|p| {
                let g = gaussian(&format!("position:{p}"), seed, d, 1, 1.0);
                g.column(0).map(|x| if x < 0.0 { -1.0 } else { 1.0 })
            })
            .collect();

        let blocks = (0..config.layers).map(|n| Self::build_block(&config, seed, n)).collect();

        let q = gaussian("unembed", seed, OUTPUT_CHANNELS, OUTPUT_CHANNELS, 1.0).qr().q();
        let mut unembed = DMatrix::zeros(ANSWER_VOCAB, OUTPUT_CHANNELS);
        for k in 0..ANSWER_VOCAB {
            for (place, digit) in answer_digits(k as u32).into_iter().enumerate() {
                let col = q.column(place * 10 + digit as usize);
                let mut row = unembed.row_mut(k);
                row += col.transpose();
            }
        }

        let readout = Readout { center: vec![0.0; config.positions], sharpness: 0.0 };
        Ok(Surrogate { config, seed, vocab, words, word_emb, digit_emb, pos_sign, blocks, unembed, digit_dirs: q, readout })
    }

    fn build_block(c: &SurrogateConfig, seed: u64, n: usize) -> Block {
        let (d, m) = (c.d_h, c.mlp_width);
        let mu = m - c.readout_units;
        let (o0, m0) = (c.output_start(), c.mixing_start());
        let label = |part: &str| format!("block:{n}:{part}");

        let mut w1 = gaussian(&label("w1"), seed, mu, d, c.input_gain / (d as f64).sqrt());
        let mut b1 = gaussian(&label("b1"), seed, mu, 1, c.bias_std).column(0).into_owned();
        let w2_mix = gaussian(&label("w2"), seed, d - m0, mu, c.output_gain / (m as f64).sqrt());
        let r1 = gaussian(&label("r1"), seed, c.readout_units, OUTPUT_CHANNELS, c.input_gain / (OUTPUT_CHANNELS as f64).sqrt());
        let r2 = gaussian(&label("r2"), seed, OUTPUT_CHANNELS, c.readout_units, c.output_gain / (c.readout_units as f64).sqrt());

        // Mixing units first, readout units last.
        w1 = w1.insert_rows(mu, c.readout_units, 0.0);
        w1.view_mut((mu, o0), (c.readout_units, OUTPUT_CHANNELS)).copy_from(&r1);
        b1 = b1.insert_rows(mu, c.readout_units, 0.0);
        let mut w2 = DMatrix::zeros(d, m);
        w2.view_mut((m0, 0), (d - m0, mu)).copy_from(&w2_mix);
        w2.view_mut((o0, mu), (OUTPUT_CHANNELS, c.readout_units)).copy_from(&r2);
        Block { w1, b1, w2 }
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn readout(&self) -> &Readout {
        &self.readout
    }

    pub fn set_readout(&mut self, readout: Readout) -> Result<()> {
        if readout.center.len() != self.config.positions {
            return Err(Error::DimensionMismatch(readout.center.len(), self.config.positions));
        }
        if !readout.sharpness.is_finite() || readout.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("readout parameters must be finite".into()));
        }
        self.readout = readout;
        Ok(())
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<Token>> {
        let toks: Vec<Token> = split_prompt(prompt)
            .into_iter()
            .map(|w| {
                if let Some(&i) = self.vocab.get(w) {
                    return Ok(Token::Word(i));
                }
                let canonical = !w.is_empty() && w.len() <= 3 && w.bytes().all(|b| b.is_ascii_digit())
                    && (w.len() == 1 || !w.starts_with('0'));
                if canonical {
                    return Ok(Token::Number(w.parse().expect("digits")));
                }
                Err(Error::UnknownToken(w.to_string()))
            })
            .collect::<Result<_>>()?;
        if toks.len() > self.config.positions {
            return Err(Error::OutOfRange(format!(
                "prompt has {} tokens, model holds {}",
                toks.len(),
                self.config.positions
            )));
        }
        Ok(toks)
    }

    /// Layer-0 state: the sum of position-signed token embeddings.
    pub fn embed(&self, prompt: &str) -> Result<DVector<f64>> {
        let mut h = DVector::zeros(self.config.d_h);
        for (pos, tok) in self.tokenize(prompt)?.into_iter().enumerate() {
            match tok {
                Token::Word(i) => h += self.word_emb[i].component_mul(&self.pos_sign[pos]),
                Token::Number(n) => {
                    let [hd, td, od] = [n / 100, n / 10 % 10, n % 10].map(|x| x as usize);
                    let e = &self.digit_emb[0][hd] + &self.digit_emb[1][td] + &self.digit_emb[2][od];
                    h += e.component_mul(&self.pos_sign[pos]);
                    // The value channel is not position-signed.
                    h[pos] += n as f64 / 1000.0;
                }
            }
        }
        Ok(h)
    }

    /// f_n(h), the residual update of block `n`.
    pub fn block_update(&self, n: usize, h: &DVector<f64>) -> DVector<f64> {
        self.blocks[n].delta(h)
    }

    /// Run blocks `from..L` starting from `h` (the state before block `from`).
    pub fn run_from(&self, from: usize, mut h: DVector<f64>) -> DVector<f64> {
        for n in from..self.config.layers {
            h += self.blocks[n].delta(&h);
        }
        h
    }

    /// Answer logits of a final state.
    pub fn logits(&self, h: &DVector<f64>) -> DVector<f64> {
        let c = &self.config;
        let h_out = h.rows(c.output_start(), OUTPUT_CHANNELS);
        let mut z = (&self.unembed * h_out) * c.logit_gain;
        let s_hat = self.center_estimate(h);
        let beta = self.readout.sharpness;
        if beta != 0.0 {
            for (k, zk) in z.iter_mut().enumerate() {
                let k = k as f64;
                *zk += beta * (2.0 * k * s_hat - k * k);
            }
        }
        z
    }

    /// ŝ = center·h_value.
    pub fn center_estimate(&self, h: &DVector<f64>) -> f64 {
        self.readout.center.iter().zip(h.iter()).map(|(c, x)| c * x).sum()
    }

    /// All `L + 1` states of the final token and the logits.
    pub fn forward(&self, prompt: &str) -> Result<Forward> {
        let mut states = Vec::with_capacity(self.config.layers + 1);
        let mut h = self.embed(prompt)?;
        for n in 0..self.config.layers {
            let next = &h + self.blocks[n].delta(&h);
            states.push(h);
            h = next;
        }
        let logits = self.logits(&h);
        states.push(h);
        Ok(Forward { states, logits })
    }

    /// Forward pass with the state entering block `layer` replaced by
    /// `hook(state)`; `layer == L` rewrites the readout input.
    pub fn forward_with_hook<F>(&self, prompt: &str, layer: usize, hook: F) -> Result<DVector<f64>>
    where
        F: FnOnce(DVector<f64>) -> DVector<f64>,
    {
        if layer > self.config.layers {
            return Err(Error::OutOfRange(format!("hook layer {layer} beyond {}", self.config.layers)));
        }
        let mut h = self.embed(prompt)?;
        for n in 0..layer {
            h += self.blocks[n].delta(&h);
        }
        let h = hook(h);
        if h.len() != self.config.d_h {
            return Err(Error::DimensionMismatch(h.len(), self.config.d_h));
        }
        Ok(self.logits(&self.run_from(layer, h)))
    }

    /// States at one layer for many prompts, in input order.
    pub fn states_at(&self, problems: &[Problem], layer: usize) -> Result<Vec<DVector<f64>>> {
        if layer > self.config.layers {
            return Err(Error::OutOfRange(format!("layer {layer} beyond {}", self.config.layers)));
        }
        problems
            .par_iter()
            .map(|p| {
                let mut h = self.embed(&p.prompt)?;
                for n in 0..layer {
                    h += self.blocks[n].delta(&h);
                }
                Ok(h)
            })
            .collect()
    }

    /// Score and cross-entropy per type of the plain forward pass.
    pub fn baseline_metrics(&self, problems: &[Problem]) -> Result<Vec<TypeMetrics>> {
        let outcomes: Vec<(ProblemType, bool, f64)> = problems
            .par_iter()
            .map(|p| {
                let f = self.forward(&p.prompt)?;
                let (correct, ce) = score_logits(&f.logits, p.answer)?;
                Ok((p.ptype, correct, ce))
            })
            .collect::<Result<_>>()?;
        Ok(aggregate(&outcomes))
    }

    /// Fit the readout on addition and integer-division problems.
    ///
    /// The center weights are the least-squares map from value channels to
    /// the answer; β then minimizes training cross-entropy. Cross-entropy is
    /// convex in β (logits are affine in it), so a safeguarded Newton
    /// iteration from β = 0 converges to the global minimum.
    pub fn train_readout(&mut self, problems: &[Problem], schedule: &ReadoutSchedule) -> Result<ReadoutReport> {
        let train: Vec<&Problem> = problems
            .iter()
            .filter(|p| matches!(p.ptype, ProblemType::Addition | ProblemType::IntegerDivision))
            .collect();
        if train.is_empty() {
            return Err(Error::Empty("readout training needs addition or integer-division problems"));
        }
        let c = self.config.clone();
        let p = c.positions;
        let finals: Vec<DVector<f64>> = train
            .par_iter()
            .map(|pr| Ok(self.run_from(0, self.embed(&pr.prompt)?)))
            .collect::<Result<_>>()?;

        let mut gram = DMatrix::<f64>::identity(p, p) * schedule.ridge;
        let mut rhs = DVector::<f64>::zeros(p);
        for (h, pr) in finals.iter().zip(&train) {
            let v = h.rows(0, p);
            gram += v * v.transpose();
            rhs += v * pr.answer as f64;
        }
        let center = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("readout normal equations not positive definite".into()))?
            .solve(&rhs);
        let center: Vec<f64> = center.iter().copied().collect();

        // Fixed part of each logit vector (output channels) and ŝ.
        let fixed: Vec<(DVector<f64>, f64, usize)> = finals
            .iter()
            .zip(&train)
            .map(|(h, pr)| {
                let base = (&self.unembed * h.rows(c.output_start(), OUTPUT_CHANNELS)) * c.logit_gain;
                let s: f64 = center.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
                (base, s, pr.answer as usize)
            })
            .collect();

        let mut beta = 0.0;
        let (mut ce, mut grad, mut curv) = sharpness_objective(&fixed, beta);
        let mut trace = vec![ce];
        for _ in 0..schedule.max_iters {
            if !ce.is_finite() {
                return Err(Error::Numerical(format!("readout loss diverged; last stable sharpness {beta}")));
            }
            if curv <= 0.0 {
                break;
            }
            let mut step = grad / curv;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = (beta - step).max(0.0);
                let (c2, g2, h2) = sharpness_objective(&fixed, cand);
                if c2.is_finite() && c2 <= ce {
                    let moved = (cand - beta).abs();
                    beta = cand;
                    (ce, grad, curv) = (c2, g2, h2);
                    accepted = moved > schedule.tol * beta.abs().max(1e-300);
                    break;
                }
                step *= 0.5;
            }
            trace.push(ce);
            if !accepted {
                break;
            }
        }

        self.set_readout(Readout { center, sharpness: beta })?;
        let per_type = self.baseline_metrics(&train.into_iter().cloned().collect::<Vec<_>>())?;
        Ok(ReadoutReport { readout: self.readout.clone(), ce_trace: trace, per_type })
    }

    /// The coordinates and hidden units that the logits depend on when a
    /// state is injected before block `from`.
    ///
    /// Starting from the channels the readout reads, the set is closed under
    /// "a unit writes into the set, so every coordinate it reads joins the
    /// set" over blocks `from..L`. The result is derived from the weights'
    /// nonzero pattern, so it is exact for any weights, though it only pays
    /// off when the pattern is sparse.
    pub fn readout_cone(&self, from: usize) -> Cone {
        let c = &self.config;
        let d = c.d_h;
        let mut inside = vec![false; d];
        for i in (0..c.positions).chain(c.output_start()..c.output_start() + OUTPUT_CHANNELS) {
            inside[i] = true;
        }
        let blocks = &self.blocks[from.min(c.layers)..];
        let mut units: Vec<Vec<usize>>;
        loop {
            units = blocks
                .iter()
                .map(|b| {
                    (0..b.w2.ncols())
                        .filter(|&u| (0..d).any(|i| inside[i] && b.w2[(i, u)] != 0.0))
                        .collect()
                })
                .collect();
            let mut grew = false;
            for (b, us) in blocks.iter().zip(&units) {
                for &u in us {
                    for (j, seen) in inside.iter_mut().enumerate() {
                        if !*seen && b.w1[(u, j)] != 0.0 {
                            *seen = true;
                            grew = true;
                        }
                    }
                }
            }
            if !grew {
                break;
            }
        }
        let coords: Vec<usize> = (0..d).filter(|&i| inside[i]).collect();
        let at = |i: usize| coords.binary_search(&i).expect("readout channel inside the cone");
        let cone_blocks = blocks
            .iter()
            .zip(&units)
            .map(|(b, us)| {
                let w1 = b.w1.select_rows(us).select_columns(&coords);
                let w2 = b.w2.select_rows(&coords).select_columns(us);
                ConeBlock { w1t: w1.transpose(), w2t: w2.transpose(), w1, b1: b.b1.select_rows(us), w2 }
            })
            .collect();
        Cone {
            value_idx: (0..c.positions).map(at).collect(),
            output_idx: (c.output_start()..c.output_start() + OUTPUT_CHANNELS).map(at).collect(),
            coords,
            blocks: cone_blocks,
        }
    }
}

#[derive(Debug, Clone)]
struct ConeBlock {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    // Transposes for the backward pass.
    w1t: DMatrix<f64>,
    w2t: DMatrix<f64>,
}

/// The part of the network between an injection layer and the logits,
/// restricted to the coordinates the logits depend on. Works on batches
/// stored one state per column.
#[derive(Debug, Clone)]
pub struct Cone {
    /// Hidden coordinates inside the cone, ascending.
    pub coords: Vec<usize>,
    value_idx: Vec<usize>,
    output_idx: Vec<usize>,
    blocks: Vec<ConeBlock>,
}

/// Activations kept by [`Cone::forward`] for the backward pass.
pub struct ConeCache {
    acts: Vec<DMatrix<f64>>,
}

impl Cone {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Run the cone blocks on a batch (len × N) of injected states.
    pub fn forward(&self, mut h: DMatrix<f64>) -> (DMatrix<f64>, ConeCache) {
        let mut acts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut a = &b.w1 * &h;
            for mut col in a.column_iter_mut() {
                col += &b.b1;
                col.apply(|x| *x = x.tanh());
            }
            h.gemm(1.0, &b.w2, &a, 1.0);
            acts.push(a);
        }
        (h, ConeCache { acts })
    }

    /// Gradient with respect to the injected states, given the gradient at
    /// the final states.
    pub fn backward(&self, cache: &ConeCache, mut g: DMatrix<f64>) -> DMatrix<f64> {
        for (b, a) in self.blocks.iter().zip(&cache.acts).rev() {
            let mut gp = &b.w2t * &g;
            gp.zip_apply(a, |x, t| *x *= 1.0 - t * t);
            g.gemm(1.0, &b.w1t, &gp, 1.0);
        }
        g
    }

    /// Summed cross-entropy and number of argmax hits of final cone states,
    /// with the gradient of the summed cross-entropy if asked.
    pub fn readout_ce(
        &self,
        model: &Surrogate,
        fin: &DMatrix<f64>,
        answers: &[u32],
        want_grad: bool,
    ) -> Result<(f64, usize, Option<DMatrix<f64>>)> {
        let n = fin.ncols();
        if answers.len() != n {
            return Err(Error::DimensionMismatch(answers.len(), n));
        }
        let gamma = model.config.logit_gain;
        let beta = model.readout.sharpness;
        let center = &model.readout.center;
        // u_k·h is the sum of one projection per (place, digit) of k, so
        // the logits are assembled from forty numbers per state.
        let y = model.digit_dirs.transpose() * fin.select_rows(&self.output_idx) * gamma;
        let mut dy = DMatrix::zeros(OUTPUT_CHANNELS, if want_grad { n } else { 0 });
        let mut ds = vec![0.0; n];
        let lin: Vec<f64> = (0..ANSWER_VOCAB).map(|k| 2.0 * beta * k as f64).collect();
        let quad: Vec<f64> = (0..ANSWER_VOCAB).map(|k| -beta * (k * k) as f64).collect();
        let mut z = vec![0.0; ANSWER_VOCAB];
        let mut ce = 0.0;
        let mut hits = 0;
        for r in 0..n {
            let a = answers[r] as usize;
            if a >= ANSWER_VOCAB {
                return Err(Error::OutOfRange(format!("answer {a} outside the vocabulary")));
            }
            let yc = y.column(r);
            let s_hat: f64 = center.iter().zip(&self.value_idx).map(|(c, &j)| c * fin[(j, r)]).sum();
            // Token k = 1000·th + 100·h + 10·t + o.
            let mut k = 0;
            for th in 0..ANSWER_VOCAB / 1000 {
                for h in 0..10 {
                    let base = yc[th] + yc[10 + h];
                    for t in 0..10 {
                        let base = base + yc[20 + t];
                        for o in 0..10 {
                            z[k] = base + yc[30 + o] + lin[k] * s_hat + quad[k];
                            k += 1;
                        }
                    }
                }
            }
            let (arg, m) = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &v)| if v > bm { (i, v) } else { (bi, bm) });
            if !m.is_finite() {
                return Err(Error::Numerical("non-finite logits".into()));
            }
            let za = z[a];
            let mut sum = 0.0;
            for v in z.iter_mut() {
                // Terms below e^-50 are under the rounding of a sum that is at least 1.
                let d = *v - m;
                *v = if d > -50.0 { d.exp() } else { 0.0 };
                sum += *v;
            }
            ce += m + sum.ln() - za;
            hits += (arg == a) as usize;
            if want_grad {
                // z becomes softmax − onehot.
                let inv = 1.0 / sum;
                for v in z.iter_mut() {
                    *v *= inv;
                }
                z[a] -= 1.0;
                let mut d = [0.0; OUTPUT_CHANNELS];
                let mut k = 0;
                for th in 0..ANSWER_VOCAB / 1000 {
                    for h in 0..10 {
                        for t in 0..10 {
                            let mut run = 0.0;
                            for o in 0..10 {
                                d[30 + o] += z[k];
                                run += z[k];
                                k += 1;
                            }
                            d[20 + t] += run;
                            d[10 + h] += run;
                            d[th] += run;
                        }
                    }
                }
                dy.column_mut(r).copy_from_slice(&d);
                ds[r] = lin.iter().zip(&z).map(|(l, p)| l * p).sum::<f64>();
            }
        }
        if !want_grad {
            return Ok((ce, hits, None));
        }
        let g_out = (&model.digit_dirs * dy) * gamma;
        let mut g = DMatrix::zeros(self.len(), n);
        for r in 0..n {
            for (c, &j) in self.output_idx.iter().enumerate() {
                g[(j, r)] = g_out[(c, r)];
            }
            for (c, &j) in center.iter().zip(&self.value_idx) {
                g[(j, r)] += ds[r] * c;
            }
        }
        Ok((ce, hits, Some(g)))
    }
}

/// Mean CE over samples as a function of β, with first and second derivative.
fn sharpness_objective(fixed: &[(DVector<f64>, f64, usize)], beta: f64) -> (f64, f64, f64) {
    let parts: Vec<(f64, f64, f64)> = fixed
        .par_iter()
        .map(|(base, s, ans)| {
            let f = |k: usize| 2.0 * k as f64 * s - (k * k) as f64;
            let z: Vec<f64> = base.iter().enumerate().map(|(k, b)| b + beta * f(k)).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let (mut e1, mut e2) = (0.0, 0.0);
            for (k, zk) in z.iter().enumerate() {
                let w = (zk - m).exp();
                sum += w;
                e1 += w * f(k);
                e2 += w * f(k) * f(k);
            }
            let (e1, e2) = (e1 / sum, e2 / sum);
            let ce = m + sum.ln() - z[*ans];
            (ce, e1 - f(*ans), (e2 - e1 * e1).max(0.0))
        })
        .collect();
    let n = fixed.len() as f64;
    let (a, b, c) = parts.iter().fold((0.0, 0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    (a / n, b / n, c / n)
}

/// Thousands, hundreds, tens and ones digit of an answer token.
pub fn answer_digits(k: u32) -> [u32; 4] {
    [k / 1000 % 10, k / 100 % 10, k / 10 % 10, k % 10]
}

/// (argmax correct, cross-entropy of the correct token). Ties in the argmax
/// go to the lower token.
pub fn score_logits(logits: &DVector<f64>, answer: u32) -> Result<(bool, f64)> {
    let a = answer as usize;
    if a >= logits.len() {
        return Err(Error::OutOfRange(format!("answer {answer} outside the {}-token vocabulary", logits.len())));
    }
    let (arg, m) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &z)| if z > bm { (i, z) } else { (bi, bm) });
    if !m.is_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok((arg == a, lse - logits[a]))
}

/// Collapse per-problem outcomes into per-type metrics in canonical type order.
pub fn aggregate(outcomes: &[(ProblemType, bool, f64)]) -> Vec<TypeMetrics> {
    ProblemType::ALL
        .iter()
        .filter_map(|&t| {
            let rows: Vec<_> = outcomes.iter().filter(|o| o.0 == t).collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len();
            let hits = rows.iter().filter(|o| o.1).count();
            let ce = rows.iter().map(|o| o.2).sum::<f64>() / n as f64;
            Some(TypeMetrics { ptype: t, count: n, score: 100.0 * hits as f64 / n as f64, ce })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gen_dataset, DatasetSpec};

    fn model() -> Surrogate {
        Surrogate::build(SurrogateConfig::default(), 7).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SurrogateConfig::default().validate().is_ok());
        assert_eq!(SurrogateConfig::default().intervention_layer, 4);
        let bad = [
            SurrogateConfig { d_h: 16, ..Default::default() },
            SurrogateConfig { d_h: 60, ..Default::default() },
            SurrogateConfig { intervention_layer: 0, ..Default::default() },
            SurrogateConfig { intervention_layer: 9, ..Default::default() },
            SurrogateConfig { readout_units: 512, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(Surrogate::build(c, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn tokenizer() {
        let m = model();
        let toks = m.tokenize("What is 842 mod 910?").unwrap();
        assert_eq!(toks.len(), 6);
        assert_eq!(toks[2], Token::Number(842));
        assert_eq!(toks[4], Token::Number(910));
        assert!(matches!(m.tokenize("What is 842 modulo 910?"), Err(Error::UnknownToken(_))));
        assert!(matches!(m.tokenize("What is 0842 mod 1?"), Err(Error::UnknownToken(_))));
        assert!(m.tokenize("What is 1000 mod 1?").is_ok());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = model();
        let f = m.forward("What is 12 AND 7?").unwrap();
        assert_eq!(f.states.len(), 9);
        assert_eq!(f.logits.len(), ANSWER_VOCAB);
        assert_eq!(f, model().forward("What is 12 AND 7?").unwrap());
        assert_eq!(f.states[0], m.embed("What is 12 AND 7?").unwrap());
        // h_{n+1} − h_n reproduces f_n(h_n) up to the rounding of the one addition.
        for n in 0..8 {
            let diff = &f.states[n + 1] - &f.states[n];
            let upd = m.block_update(n, &f.states[n]);
            assert_eq!(&f.states[n] + &upd, f.states[n + 1]);
            for i in 0..diff.len() {
                let tol = f64::EPSILON * f.states[n + 1][i].abs().max(f.states[n][i].abs());
                assert!((diff[i] - upd[i]).abs() <= tol);
            }
        }
        let g = m.forward("What is 13 AND 7?").unwrap();
        assert_ne!(f.states[0], g.states[0]);
    }

    #[test]
    fn untrained_readout_is_uniform() {
        let m = model();
        let f = m.forward("What is 5 times 9 mod 1000?").unwrap();
        assert!(f.logits.iter().all(|&z| z == 0.0));
        let (_, ce) = score_logits(&f.logits, 45).unwrap();
        assert!((ce - (ANSWER_VOCAB as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn hooks() {
        let m = model();
        let p = "What is the GCD of 12 and 18?";
        let base = m.forward(p).unwrap().logits;
        for layer in [0, 4, 8] {
            assert_eq!(m.forward_with_hook(p, layer, |h| h).unwrap(), base);
        }
        let mut rng_state = m.forward(p).unwrap().states[4].clone();
        rng_state[m.config().output_start()] += 1.0;
        let nudged = m.forward_with_hook(p, 4, |_| rng_state).unwrap();
        assert_ne!(nudged, base);
        assert!(m.forward_with_hook(p, 9, |h| h).is_err());
    }

    fn cone_fixture() -> (Surrogate, Vec<DVector<f64>>, Vec<u32>) {
        let mut m = model();
        let p = m.config.positions;
        let center: Vec<f64> = (0..p).map(|i| if i % 3 == 0 { 0.5 } else { -0.1 * i as f64 }).collect();
        m.set_readout(Readout { center, sharpness: 2e-3 }).unwrap();
        let problems = crate::problems::generate(&ProblemType::ALL.iter().map(|&t| (t, 2)).collect(), 3, "cone", 0);
        let mut states = m.states_at(&problems, 4).unwrap();
        for (i, h) in states.iter_mut().enumerate() {
            for c in 0..OUTPUT_CHANNELS {
                h[m.config.output_start() + c] += 0.02 * ((i * 7 + c * 3) % 11) as f64 - 0.1;
            }
        }
        (m, states, problems.iter().map(|p| p.answer).collect())
    }

    #[test]
    fn cone_matches_full_model() {
        let (m, states, answers) = cone_fixture();
        let cone = m.readout_cone(4);
        assert_eq!(cone.len(), m.config.positions + OUTPUT_CHANNELS);
        let rows: Vec<f64> = states.iter().flat_map(|h| cone.coords.iter().map(|&c| h[c])).collect();
        let batch = DMatrix::from_column_slice(cone.len(), states.len(), &rows);
        let (fin, _) = cone.forward(batch);
        let (ce, hits, _) = cone.readout_ce(&m, &fin, &answers, false).unwrap();
        let mut want = (0.0, 0);
        for (h, &a) in states.iter().zip(&answers) {
            let (ok, c) = score_logits(&m.logits(&m.run_from(4, h.clone())), a).unwrap();
            want.0 += c;
            want.1 += ok as usize;
        }
        assert!((ce - want.0).abs() <= 1e-9 * want.0.max(1.0), "{ce} vs {}", want.0);
        assert_eq!(hits, want.1);
    }

    #[test]
    fn cone_gradient_matches_differences() {
        let (m, states, answers) = cone_fixture();
        let cone = m.readout_cone(4);
        let k = cone.len();
        let rows: Vec<f64> = states.iter().take(3).flat_map(|h| cone.coords.iter().map(|&c| h[c])).collect();
        let x = DMatrix::from_column_slice(k, 3, &rows);
        let ans = &answers[..3];
        let loss = |x: &DMatrix<f64>| {
            let (fin, _) = cone.forward(x.clone());
            cone.readout_ce(&m, &fin, ans, false).unwrap().0
        };
        let (fin, cache) = cone.forward(x.clone());
        let g_fin = cone.readout_ce(&m, &fin, ans, true).unwrap().2.unwrap();
        let g = cone.backward(&cache, g_fin);
        let eps = 1e-6;
        for (r, c) in [(0, 0), (1, 3), (2, k - 1), (0, m.config.positions + 5), (1, m.config.positions)] {
            let mut xp = x.clone();
            xp[(c, r)] += eps;
            let mut xm = x.clone();
            xm[(c, r)] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let tol = 1e-5 * fd.abs().max(1.0);
            assert!((fd - g[(c, r)]).abs() <= tol, "({r},{c}): {fd} vs {}", g[(c, r)]);
        }
    }

    #[test]
    fn readout_learns_addition_only() {
        let mut m = model();
        let mut spec = DatasetSpec::default();
        spec.eval.insert(ProblemType::Addition, 400);
        spec.eval.insert(ProblemType::IntegerDivision, 400);
        spec.eval.insert(ProblemType::Multiplication, 200);
        let ds = gen_dataset(&spec, 1);
        let rep = m.train_readout(&ds.eval, &ReadoutSchedule::default()).unwrap();
        assert!(rep.readout.sharpness > 0.0);
        assert!(rep.ce_trace.windows(2).all(|w| w[1] <= w[0]));
        let held = gen_dataset(&spec, 2).eval;
        let metrics = m.baseline_metrics(&held).unwrap();
        let get = |t| metrics.iter().find(|x| x.ptype == t).unwrap().score;
        assert!(get(ProblemType::Addition) >= 95.0);
        assert!(get(ProblemType::Multiplication) <= 20.0);
        assert!(m.train_readout(&gen_dataset(&DatasetSpec::uniform(3, 0), 0).train, &ReadoutSchedule::default()).is_err());
        assert!(m.train_readout(&gen_dataset(&DatasetSpec::uniform(30, 0), 0).readout, &ReadoutSchedule::default()).is_ok());
    }
}
