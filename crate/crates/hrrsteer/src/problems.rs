//! Arithmetic problem types, rule-based solvers, prompt templates and the
//! seeded dataset generator.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Largest operand value (three digits).
pub const MAX_OPERAND: u32 = 999;

/// Ids of evaluation problems start here so they never collide with training ids.
pub const EVAL_ID_BASE: u64 = 1_000_000_000;
/// First id of the readout split.
pub const READOUT_ID_BASE: u64 = 2_000_000_000;

/// The ten problem types, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemType {
    Modulo,
    Multiplication,
    Gcd,
    Lcm,
    SquareMod,
    BitwiseAnd,
    BitwiseXor,
    BitwiseOr,
    Addition,
    IntegerDivision,
}

impl ProblemType {
    pub const ALL: [ProblemType; 10] = [
        ProblemType::Modulo,
        ProblemType::Multiplication,
        ProblemType::Gcd,
        ProblemType::Lcm,
        ProblemType::SquareMod,
        ProblemType::BitwiseAnd,
        ProblemType::BitwiseXor,
        ProblemType::BitwiseOr,
        ProblemType::Addition,
        ProblemType::IntegerDivision,
    ];

    /// The eight types the probes are trained on.
    pub const TRAINED: [ProblemType; 8] = [
        ProblemType::Modulo,
        ProblemType::Multiplication,
        ProblemType::Gcd,
        ProblemType::Lcm,
        ProblemType::SquareMod,
        ProblemType::BitwiseAnd,
        ProblemType::BitwiseXor,
        ProblemType::BitwiseOr,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ProblemType::Modulo => "modulo",
            ProblemType::Multiplication => "multiplication",
            ProblemType::Gcd => "gcd",
            ProblemType::Lcm => "lcm",
            ProblemType::SquareMod => "square_mod",
            ProblemType::BitwiseAnd => "bitwise_and",
            ProblemType::BitwiseXor => "bitwise_xor",
            ProblemType::BitwiseOr => "bitwise_or",
            ProblemType::Addition => "addition",
            ProblemType::IntegerDivision => "integer_division",
        }
    }

    /// False exactly for addition and integer division.
    pub fn trained(self) -> bool {
        !matches!(self, ProblemType::Addition | ProblemType::IntegerDivision)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Smallest valid value of (n1, n2).
    pub fn operand_minimum(self) -> (u32, u32) {
        match self {
            ProblemType::Gcd | ProblemType::Lcm => (1, 1),
            ProblemType::Modulo | ProblemType::SquareMod | ProblemType::IntegerDivision => (0, 1),
            _ => (0, 0),
        }
    }

    /// Prompt template; `{a}` and `{b}` are replaced by the operands.
    pub fn template(self) -> &'static str {
        match self {
            ProblemType::Modulo => "What is {a} mod {b}?",
            ProblemType::Multiplication => "What is {a} times {b} mod 1000?",
            ProblemType::Gcd => "What is the GCD of {a} and {b}?",
            ProblemType::Lcm => "What is the LCM of {a} and {b} mod 1000?",
            ProblemType::SquareMod => "What is {a} squared mod {b}?",
            ProblemType::BitwiseAnd => "What is {a} AND {b}?",
            ProblemType::BitwiseXor => "What is {a} XOR {b}?",
            ProblemType::BitwiseOr => "What is {a} OR {b}?",
            ProblemType::Addition => "What is {a} plus {b}?",
            ProblemType::IntegerDivision => "What is rounded down quotient {a} over {b}?",
        }
    }
}

impl fmt::Display for ProblemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ProblemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemType::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::UnknownSymbol(s.to_string()))
    }
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Apply the rule for `ptype` to the operands.
///
/// Multiplication and lcm are reduced mod 1000; addition and integer
/// division are not truncated, so addition answers reach 1998 and the
/// bitwise or/xor of two three-digit numbers can reach 1023.
pub fn solve(ptype: ProblemType, n1: u32, n2: u32) -> Result<u32> {
    if n1 > MAX_OPERAND || n2 > MAX_OPERAND {
        return Err(Error::OutOfRange(format!("operands ({n1}, {n2}) exceed {MAX_OPERAND}")));
    }
    let divides = matches!(
        ptype,
        ProblemType::Modulo | ProblemType::SquareMod | ProblemType::IntegerDivision
    );
    if divides && n2 == 0 {
        return Err(Error::ZeroDivisor(ptype.tag()));
    }
    let (lo1, lo2) = ptype.operand_minimum();
    if n1 < lo1 || n2 < lo2 {
        return Err(Error::OutOfRange(format!("{ptype} needs positive operands, got ({n1}, {n2})")));
    }
    let (a, b) = (n1 as u64, n2 as u64);
    let out = match ptype {
        ProblemType::Modulo => a % b,
        ProblemType::Multiplication => a * b % 1000,
        ProblemType::Gcd => gcd(a, b),
        ProblemType::Lcm => a / gcd(a, b) * b % 1000,
        ProblemType::SquareMod => a * a % b,
        ProblemType::BitwiseAnd => a & b,
        ProblemType::BitwiseXor => a ^ b,
        ProblemType::BitwiseOr => a | b,
        ProblemType::Addition => a + b,
        ProblemType::IntegerDivision => a / b,
    };
    Ok(out as u32)
}

/// Fill the template of `ptype` with the operands.
pub fn render_prompt(ptype: ProblemType, n1: u32, n2: u32) -> String {
    ptype
        .template()
        .replace("{a}", &n1.to_string())
        .replace("{b}", &n2.to_string())
}

/// One generated task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: u64,
    #[serde(rename = "type")]
    pub ptype: ProblemType,
    pub n1: u32,
    pub n2: u32,
    pub answer: u32,
    pub prompt: String,
}

impl Problem {
    pub fn new(id: u64, ptype: ProblemType, n1: u32, n2: u32) -> Result<Self> {
        let answer = solve(ptype, n1, n2)?;
        Ok(Problem { id, ptype, n1, n2, answer, prompt: render_prompt(ptype, n1, n2) })
    }

    /// Check every invariant: answer, operand ranges, prompt text.
    pub fn validate(&self) -> Result<()> {
        let expect = solve(self.ptype, self.n1, self.n2)?;
        if expect != self.answer {
            return Err(Error::format(
                "problem",
                format!("id {}: answer {} but solver gives {expect}", self.id, self.answer),
            ));
        }
        if self.prompt != render_prompt(self.ptype, self.n1, self.n2) {
            return Err(Error::format("problem", format!("id {}: prompt mismatch", self.id)));
        }
        Ok(())
    }
}

/// Draw one problem of the given type; operands uniform over their valid ranges.
pub fn sample_problem<R: Rng>(rng: &mut R, id: u64, ptype: ProblemType) -> Problem {
    let (lo1, lo2) = ptype.operand_minimum();
    let n1 = rng.random_range(lo1..=MAX_OPERAND);
    let n2 = rng.random_range(lo2..=MAX_OPERAND);
    Problem::new(id, ptype, n1, n2).expect("sampled operands are in range")
}

/// Problems of each type in canonical order; ids run from `first_id`.
///
/// Each problem draws from its own stream keyed by (seed, stream, id), so
/// any partition of the id range generates identical problems.
pub fn generate(
    counts: &BTreeMap<ProblemType, usize>,
    seed: u64,
    stream: &str,
    first_id: u64,
) -> Vec<Problem> {
    let mut out = Vec::with_capacity(counts.values().sum());
    let mut id = first_id;
    for (&ptype, &n) in counts {
        for _ in 0..n {
            let mut rng = seed::rng_from(seed::derive_index(seed, stream, id));
            out.push(sample_problem(&mut rng, id, ptype));
            id += 1;
        }
    }
    out
}

/// Per-type counts for the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSpec {
    pub train: BTreeMap<ProblemType, usize>,
    pub eval: BTreeMap<ProblemType, usize>,
    /// Problems for fitting the surrogate's own readout.
    pub readout: BTreeMap<ProblemType, usize>,
}

impl DatasetSpec {
    /// `train_per_type` for each trained type and each readout type,
    /// `eval_per_type` for all ten.
    pub fn uniform(train_per_type: usize, eval_per_type: usize) -> Self {
        DatasetSpec {
            train: ProblemType::TRAINED.iter().map(|&t| (t, train_per_type)).collect(),
            eval: ProblemType::ALL.iter().map(|&t| (t, eval_per_type)).collect(),
            readout: ProblemType::ALL.iter().filter(|t| !t.trained()).map(|&t| (t, train_per_type)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Problem>,
    pub eval: Vec<Problem>,
    pub readout: Vec<Problem>,
}

/// Generate all splits. Untrained types are dropped from the train split
/// and trained types from the readout split, whatever the counts say.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64) -> Dataset {
    let keep = |counts: &BTreeMap<ProblemType, usize>, trained: bool| -> BTreeMap<ProblemType, usize> {
        counts.iter().filter(|(t, _)| t.trained() == trained).map(|(&t, &n)| (t, n)).collect()
    };
    Dataset {
        train: generate(&keep(&spec.train, true), seed, "train", 0),
        eval: generate(&spec.eval, seed, "eval", EVAL_ID_BASE),
        readout: generate(&keep(&spec.readout, false), seed, "readout", READOUT_ID_BASE),
    }
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(w: &mut W, problems: &[Problem]) -> Result<()> {
    for p in problems {
        serde_json::to_writer(&mut *w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse and validate a JSONL dataset.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Problem>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", lineno + 1)))?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoted_examples() {
        // 932 · 152 = 141664. The frequently quoted residue 816 is a slip;
        // the product's last three digits are 664.
        assert_eq!(932u64 * 152, 141_664);
        assert_eq!(solve(ProblemType::Multiplication, 932, 152).unwrap(), 664);
        assert_eq!(solve(ProblemType::Modulo, 842, 910).unwrap(), 842);
        assert_eq!(render_prompt(ProblemType::Modulo, 842, 910), "What is 842 mod 910?");
        assert_eq!(
            render_prompt(ProblemType::Multiplication, 932, 152),
            "What is 932 times 152 mod 1000?"
        );
    }

    #[test]
    fn invalid_operands() {
        assert!(matches!(solve(ProblemType::Modulo, 5, 0), Err(Error::ZeroDivisor(_))));
        assert!(matches!(solve(ProblemType::IntegerDivision, 5, 0), Err(Error::ZeroDivisor(_))));
        assert!(matches!(solve(ProblemType::Gcd, 0, 5), Err(Error::OutOfRange(_))));
        assert!(matches!(solve(ProblemType::Addition, 1000, 5), Err(Error::OutOfRange(_))));
        assert_eq!(solve(ProblemType::Addition, 0, 0).unwrap(), 0);
    }

    #[test]
    fn tags_roundtrip() {
        for t in ProblemType::ALL {
            assert_eq!(t.tag().parse::<ProblemType>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.tag()));
        }
        assert_eq!(ProblemType::ALL.iter().filter(|t| !t.trained()).count(), 2);
    }

    #[test]
    fn counts_and_split() {
        let mut spec = DatasetSpec::default();
        spec.train.insert(ProblemType::Modulo, 100);
        spec.train.insert(ProblemType::Addition, 50);
        spec.eval.insert(ProblemType::Addition, 7);
        let ds = gen_dataset(&spec, 3);
        assert_eq!(ds.train.len(), 100);
        assert!(ds.train.iter().all(|p| p.ptype == ProblemType::Modulo && p.n2 >= 1));
        assert_eq!(ds.eval.len(), 7);
        assert!(ds.eval.iter().all(|p| p.id >= EVAL_ID_BASE));
        assert!(ds.readout.is_empty());
        let u = gen_dataset(&DatasetSpec::uniform(4, 1), 3);
        assert_eq!((u.train.len(), u.eval.len(), u.readout.len()), (32, 10, 8));
        assert!(u.readout.iter().all(|p| !p.ptype.trained() && p.id >= READOUT_ID_BASE));
    }

    #[test]
    fn jsonl_roundtrip_and_determinism() {
        let ds = gen_dataset(&DatasetSpec::uniform(5, 3), 42);
        let mut a = Vec::new();
        write_jsonl(&mut a, &ds.eval).unwrap();
        let mut b = Vec::new();
        write_jsonl(&mut b, &gen_dataset(&DatasetSpec::uniform(5, 3), 42).eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(read_jsonl(&a[..]).unwrap(), ds.eval);
        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        for key in ["id", "type", "n1", "n2", "answer", "prompt"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let bad = first.replace("\"answer\":", "\"answer\":1");
        assert!(read_jsonl(bad.as_bytes()).is_err());
    }

    #[test]
    fn partitioned_generation_is_identical() {
        let counts: BTreeMap<_, _> = [(ProblemType::Gcd, 10)].into_iter().collect();
        let all = generate(&counts, 9, "train", 0);
        let tail: BTreeMap<_, _> = [(ProblemType::Gcd, 4)].into_iter().collect();
        assert_eq!(generate(&tail, 9, "train", 6), all[6..].to_vec());
    }
}
