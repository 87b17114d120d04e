//! The symbol atlas and the compositional number/problem encodings.
//!
//! Digits are binding powers of one unitary vector (digit0 is the impulse),
//! places are binding powers of another (`tens = ones⊛ones`, and so on), and
//! roles and type tags are independent unitary vectors. A number is
//! `hundreds⊛h + tens⊛t + ones⊛o`; a problem binds its operands to the `n1`
//! and `n2` roles and its type tag to the `problem_type` role.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::hrr::{self, HrrVector};
use crate::problems::ProblemType;
use crate::seed;

/// Digit vectors must be pairwise less similar than this.
pub const DIGIT_SEPARATION: f64 = 0.1;
/// Resampling budget for the digit generator.
pub const MAX_DIGIT_RESAMPLES: u32 = 100;
/// A thousands digit is only read back when its cleanup score clears this.
pub const THOUSANDS_PRESENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Place {
    Ones,
    Tens,
    Hundreds,
    /// Only used for answers of 1000 and above.
    Thousands,
}

impl Place {
    /// Binding power of `ones` that realizes the place.
    fn power(self) -> u32 {
        match self {
            Place::Ones => 1,
            Place::Tens => 2,
            Place::Hundreds => 3,
            Place::Thousands => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Place::Ones => "ones",
            Place::Tens => "tens",
            Place::Hundreds => "hundreds",
            Place::Thousands => "thousands",
        }
    }
}

/// Hundreds, tens, ones: the order digits are written in.
pub const NUMBER_PLACES: [Place; 3] = [Place::Hundreds, Place::Tens, Place::Ones];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    N1,
    N2,
    ProblemType,
    Answer,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::N1, Role::N2, Role::ProblemType, Role::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Role::N1 => "n1",
            Role::N2 => "n2",
            Role::ProblemType => "problem_type",
            Role::Answer => "answer",
        }
    }
}

/// Outcome of a nearest-symbol lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanupResult {
    pub name: String,
    /// Position of the winner in the candidate list (the digit value for digits).
    pub index: usize,
    pub score: f64,
    pub runner_up_score: f64,
}

/// A number read back from a vector together with its per-place cleanups.
#[derive(Debug, Clone, PartialEq)]
pub struct NumberQuery {
    pub value: u32,
    /// Hundreds, tens, ones.
    pub places: [CleanupResult; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    d: usize,
    master_seed: u64,
    digits: Vec<HrrVector>,
    ones: HrrVector,
    tens: HrrVector,
    hundreds: HrrVector,
    thousands: HrrVector,
    roles: Vec<HrrVector>,
    types: Vec<HrrVector>,
}

/// Argmax with ties going to the earlier candidate.
fn cleanup<'a>(query: &HrrVector, candidates: impl Iterator<Item = (String, &'a HrrVector)>) -> CleanupResult {
    let mut best = CleanupResult {
        name: String::new(),
        index: 0,
        score: f64::NEG_INFINITY,
        runner_up_score: f64::NEG_INFINITY,
    };
    for (i, (name, v)) in candidates.enumerate() {
        let s = hrr::dot(query.values(), v.values());
        if s > best.score {
            best.runner_up_score = best.score;
            best.score = s;
            best.index = i;
            best.name = name;
        } else if s > best.runner_up_score {
            best.runner_up_score = s;
        }
    }
    best
}

fn max_digit_crosstalk(digits: &[HrrVector]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..digits.len() {
        for j in (i + 1)..digits.len() {
            worst = worst.max(hrr::dot(digits[i].values(), digits[j].values()).abs());
        }
    }
    worst
}

impl Codebook {
    /// Build the atlas for dimension `d` from a master seed.
    ///
    /// Each symbol's seed is derived from its name; digit1 is redrawn under
    /// the labels `digit1/1`, `digit1/2`, ... until the ten digits are
    /// separated by less than [`DIGIT_SEPARATION`].
    pub fn build(d: usize, master_seed: u64) -> Result<Self> {
        if d < 64 {
            return Err(Error::InvalidDimension(d, 64));
        }
        let mut best = f64::INFINITY;
        let mut digits = None;
        for attempt in 0..MAX_DIGIT_RESAMPLES {
            let label = if attempt == 0 { "digit1".to_string() } else { format!("digit1/{attempt}") };
            let one = hrr::unitary_vector(d, seed::derive(master_seed, &label))?;
            let candidate: Vec<_> = (0..10).map(|k| hrr::bind_power(&one, k)).collect();
            let sep = max_digit_crosstalk(&candidate);
            best = best.min(sep);
            if sep < DIGIT_SEPARATION {
                digits = Some(candidate);
                break;
            }
        }
        let digits = digits.ok_or_else(|| {
            Error::Numerical(format!(
                "digit separation {best:.4} not below {DIGIT_SEPARATION} after {MAX_DIGIT_RESAMPLES} draws"
            ))
        })?;
        let ones = hrr::unitary_vector(d, seed::derive(master_seed, "ones"))?;
        let roles = Role::ALL
            .iter()
            .map(|r| hrr::unitary_vector(d, seed::derive(master_seed, r.name())))
            .collect::<Result<Vec<_>>>()?;
        let types = ProblemType::ALL
            .iter()
            .map(|t| hrr::unitary_vector(d, seed::derive(master_seed, &format!("type:{}", t.tag()))))
            .collect::<Result<Vec<_>>>()?;
        let tens = hrr::bind_power(&ones, Place::Tens.power());
        let hundreds = hrr::bind_power(&ones, Place::Hundreds.power());
        Ok(Self::assemble(d, master_seed, digits, [ones, tens, hundreds], roles, types))
    }

    fn assemble(
        d: usize,
        master_seed: u64,
        digits: Vec<HrrVector>,
        [ones, tens, hundreds]: [HrrVector; 3],
        roles: Vec<HrrVector>,
        types: Vec<HrrVector>,
    ) -> Self {
        Codebook {
            d,
            master_seed,
            thousands: hrr::bind_power(&ones, Place::Thousands.power()),
            digits,
            ones,
            tens,
            hundreds,
            roles,
            types,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn digit(&self, k: u32) -> &HrrVector {
        &self.digits[k as usize]
    }

    pub fn place(&self, p: Place) -> &HrrVector {
        match p {
            Place::Ones => &self.ones,
            Place::Tens => &self.tens,
            Place::Hundreds => &self.hundreds,
            Place::Thousands => &self.thousands,
        }
    }

    pub fn role(&self, r: Role) -> &HrrVector {
        &self.roles[r as usize]
    }

    pub fn type_vector(&self, t: ProblemType) -> &HrrVector {
        &self.types[t.index()]
    }

    /// Named symbols in serialization order. The thousands place is derived
    /// from `ones` and not listed.
    pub fn symbols(&self) -> Vec<(String, &HrrVector)> {
        let mut out: Vec<(String, &HrrVector)> = Vec::with_capacity(27);
        for (k, v) in self.digits.iter().enumerate() {
            out.push((format!("digit{k}"), v));
        }
        for p in [Place::Ones, Place::Tens, Place::Hundreds] {
            out.push((p.name().to_string(), self.place(p)));
        }
        for r in Role::ALL {
            out.push((r.name().to_string(), self.role(r)));
        }
        for t in ProblemType::ALL {
            out.push((t.tag().to_string(), self.type_vector(t)));
        }
        out
    }

    /// Look a symbol up by name.
    pub fn get(&self, name: &str) -> Result<&HrrVector> {
        self.symbols()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::UnknownSymbol(name.to_string()))
    }

    /// Largest |similarity| between two distinct digit vectors.
    pub fn digit_separation(&self) -> f64 {
        max_digit_crosstalk(&self.digits)
    }

    /// hundreds⊛h + tens⊛t + ones⊛o, leading zeros included.
    pub fn encode_number(&self, n: u32) -> Result<HrrVector> {
        if n > 999 {
            return Err(Error::OutOfRange(format!("number {n} has more than three digits")));
        }
        let digits = [n / 100, n / 10 % 10, n % 10];
        let terms = NUMBER_PLACES
            .iter()
            .zip(digits)
            .map(|(&p, k)| hrr::bind_fast(self.place(p), self.digit(k)))
            .collect::<Result<Vec<_>>>()?;
        hrr::bundle(&terms)
    }

    /// Like [`encode_number`](Self::encode_number) for 0..=9999, adding a
    /// thousands term only when the value has a thousands digit.
    pub fn encode_wide_number(&self, n: u32) -> Result<HrrVector> {
        if n > 9999 {
            return Err(Error::OutOfRange(format!("number {n} has more than four digits")));
        }
        let mut v = self.encode_number(n % 1000)?;
        if n >= 1000 {
            v.add_assign(&hrr::bind_fast(&self.thousands, self.digit(n / 1000))?)?;
        }
        Ok(v)
    }

    /// Four places for 0..=9999, the thousands term always present, so a
    /// zero thousands digit is stated rather than implied by absence.
    pub fn encode_four_place_number(&self, n: u32) -> Result<HrrVector> {
        if n > 9999 {
            return Err(Error::OutOfRange(format!("number {n} has more than four digits")));
        }
        let mut v = self.encode_number(n % 1000)?;
        v.add_assign(&hrr::bind_fast(&self.thousands, self.digit(n / 1000))?)?;
        Ok(v)
    }

    /// n1⊛num(n1) + n2⊛num(n2) + problem_type⊛tag.
    pub fn encode_problem(&self, n1: u32, n2: u32, ptype: ProblemType) -> Result<HrrVector> {
        let terms = [
            hrr::bind_fast(self.role(Role::N1), &self.encode_number(n1)?)?,
            hrr::bind_fast(self.role(Role::N2), &self.encode_number(n2)?)?,
            hrr::bind_fast(self.role(Role::ProblemType), self.type_vector(ptype))?,
        ];
        hrr::bundle(&terms)
    }

    fn check(&self, v: &HrrVector) -> Result<()> {
        if v.dim() != self.d {
            return Err(Error::DimensionMismatch(v.dim(), self.d));
        }
        Ok(())
    }

    fn digit_candidates(&self) -> impl Iterator<Item = (String, &HrrVector)> {
        self.digits.iter().enumerate().map(|(k, v)| (format!("digit{k}"), v))
    }

    /// Unbind `role` (if any) and `place`, then clean up over the ten digits.
    pub fn query_digit(&self, v: &HrrVector, role: Option<Role>, place: Place) -> Result<CleanupResult> {
        self.check(v)?;
        let filler = match role {
            Some(r) => hrr::unbind(v, self.role(r))?,
            None => v.clone(),
        };
        let r = hrr::unbind(&filler, self.place(place))?;
        Ok(cleanup(&r, self.digit_candidates()))
    }

    /// Read a three-digit number bound to `role` (or unbound if `None`).
    pub fn query_number(&self, v: &HrrVector, role: Option<Role>) -> Result<NumberQuery> {
        self.check(v)?;
        let filler = match role {
            Some(r) => hrr::unbind(v, self.role(r))?,
            None => v.clone(),
        };
        let mut value = 0;
        let mut places = Vec::with_capacity(3);
        for p in NUMBER_PLACES {
            let c = self.query_digit(&filler, None, p)?;
            value = value * 10 + c.index as u32;
            places.push(c);
        }
        let places: [CleanupResult; 3] = places.try_into().expect("three places");
        Ok(NumberQuery { value, places })
    }

    /// Read a number that may carry a thousands digit.
    pub fn query_wide_number(&self, v: &HrrVector, role: Option<Role>) -> Result<u32> {
        let filler = match role {
            Some(r) => hrr::unbind(v, self.role(r))?,
            None => v.clone(),
        };
        let low = self.query_number(&filler, None)?.value;
        let th = self.query_digit(&filler, None, Place::Thousands)?;
        let high = if th.score >= THOUSANDS_PRESENCE { th.index as u32 } else { 0 };
        Ok(high * 1000 + low)
    }

    /// Unbind the type role and return the best tag among `tags` with its score.
    /// Ties go to the tag listed first.
    pub fn query_problem_type(&self, v: &HrrVector, tags: &[ProblemType]) -> Result<(ProblemType, f64)> {
        let scores = self.problem_type_scores(v, tags)?;
        let (i, s) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bs), (i, &(_, s))| if s > bs { (i, s) } else { (bi, bs) });
        Ok((tags[i], s))
    }

    /// Similarity of the unbound type filler with every tag in `tags`.
    pub fn problem_type_scores(&self, v: &HrrVector, tags: &[ProblemType]) -> Result<Vec<(ProblemType, f64)>> {
        if tags.is_empty() {
            return Err(Error::Empty("tag set for problem-type query"));
        }
        self.check(v)?;
        let r = hrr::unbind(v, self.role(Role::ProblemType))?;
        Ok(tags.iter().map(|&t| (t, hrr::dot(r.values(), self.type_vector(t).values()))).collect())
    }

    /// `HRRCB <d> <seed>\n` then `name: ` + an HRRV record per symbol.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "HRRCB {} {}", self.d, self.master_seed)?;
        for (name, v) in self.symbols() {
            write!(w, "{name}: ")?;
            hrr::write_hrrv(w, v)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let ["HRRCB", d, s] = fields.as_slice() else {
            return Err(Error::format("HRRCB", format!("bad header {line:?}")));
        };
        let d: usize = d.parse().map_err(|_| Error::format("HRRCB", "bad dimension"))?;
        let master_seed: u64 = s.parse().map_err(|_| Error::format("HRRCB", "bad seed"))?;
        let expected: Vec<String> = Codebook::symbol_names();
        let mut vecs = Vec::with_capacity(expected.len());
        for name in &expected {
            line.clear();
            r.read_line(&mut line)?;
            let Some((got, header)) = line.split_once(": ") else {
                return Err(Error::format("HRRCB", format!("expected entry `{name}`")));
            };
            if got != name {
                return Err(Error::format("HRRCB", format!("expected `{name}`, found `{got}`")));
            }
            let (vd, unitary) = hrr::parse_hrrv_header(header)?;
            if vd != d {
                return Err(Error::DimensionMismatch(vd, d));
            }
            vecs.push(hrr::read_hrrv_body(r, vd, unitary)?);
        }
        let mut it = vecs.into_iter();
        let digits: Vec<_> = it.by_ref().take(10).collect();
        let places: Vec<_> = it.by_ref().take(3).collect();
        let places: [HrrVector; 3] = places.try_into().expect("three places");
        let roles: Vec<_> = it.by_ref().take(4).collect();
        let types: Vec<_> = it.collect();
        Ok(Self::assemble(d, master_seed, digits, places, roles, types))
    }

    fn symbol_names() -> Vec<String> {
        let mut names: Vec<String> = (0..10).map(|k| format!("digit{k}")).collect();
        names.extend(["ones", "tens", "hundreds"].map(String::from));
        names.extend(Role::ALL.map(|r| r.name().to_string()));
        names.extend(ProblemType::ALL.map(|t| t.tag().to_string()));
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &HrrVector, b: &HrrVector, tol: f64) -> bool {
        a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn structural_invariants() {
        let cb = Codebook::build(512, 3).unwrap();
        let one = cb.digit(1);
        assert!(hrr::is_unitary(one, 1e-8));
        assert_eq!(cb.digit(0), &HrrVector::impulse(512));
        let three = hrr::bind(one, &hrr::bind(one, one).unwrap()).unwrap();
        assert!(close(cb.digit(3), &three, 1e-10));
        let tens = hrr::bind(cb.place(Place::Ones), cb.place(Place::Ones)).unwrap();
        assert!(close(cb.place(Place::Tens), &tens, 1e-10));
        for r in Role::ALL {
            assert!(hrr::is_unitary(cb.role(r), 1e-8));
        }
        for t in ProblemType::ALL {
            assert!(hrr::is_unitary(cb.type_vector(t), 1e-8));
        }
        assert!(cb.digit_separation() < DIGIT_SEPARATION);
        assert_eq!(cb.symbols().len(), 27);
    }

    #[test]
    fn neighbouring_digit_similarity_is_constant() {
        let cb = Codebook::build(1024, 5).unwrap();
        let s0 = hrr::similarity(cb.digit(0), cb.digit(1)).unwrap();
        for k in 1..9 {
            let s = hrr::similarity(cb.digit(k), cb.digit(k + 1)).unwrap();
            assert!((s - s0).abs() < 1e-6);
        }
    }

    #[test]
    fn worked_example() {
        let cb = Codebook::build(2048, 0).unwrap();
        let x = cb.encode_problem(842, 910, ProblemType::Modulo).unwrap();
        assert!(x.norm_sq() > 2.5);
        assert_eq!(cb.query_digit(&x, Some(Role::N2), Place::Hundreds).unwrap().index, 9);
        assert_eq!(cb.query_digit(&x, Some(Role::N1), Place::Ones).unwrap().index, 2);
        assert_eq!(cb.query_number(&x, Some(Role::N1)).unwrap().value, 842);
        assert_eq!(cb.query_number(&x, Some(Role::N2)).unwrap().value, 910);
        let (t, s) = cb.query_problem_type(&x, &ProblemType::TRAINED).unwrap();
        assert_eq!(t, ProblemType::Modulo);
        assert!((s - 1.0).abs() < 0.25);
        let seven = cb.query_digit(&cb.encode_number(7).unwrap(), None, Place::Ones).unwrap();
        assert_eq!(seven.index, 7);
        assert!(seven.score - seven.runner_up_score >= 0.3);
    }

    #[test]
    fn zero_vector_ties_to_digit_zero() {
        let cb = Codebook::build(256, 1).unwrap();
        let c = cb.query_digit(&HrrVector::zeros(256), Some(Role::N1), Place::Tens).unwrap();
        assert_eq!((c.index, c.score, c.runner_up_score), (0, 0.0, 0.0));
        let (t, s) = cb.query_problem_type(&HrrVector::zeros(256), &ProblemType::TRAINED).unwrap();
        assert_eq!((t, s), (ProblemType::Modulo, 0.0));
        assert!(cb.query_problem_type(&HrrVector::zeros(256), &[]).is_err());
    }

    #[test]
    fn wide_numbers() {
        let cb = Codebook::build(2048, 2).unwrap();
        for n in [0, 7, 999, 1000, 1023, 1998] {
            let v = hrr::bind_fast(cb.role(Role::Answer), &cb.encode_wide_number(n).unwrap()).unwrap();
            assert_eq!(cb.query_wide_number(&v, Some(Role::Answer)).unwrap(), n);
        }
        assert!(cb.encode_number(1000).is_err());
    }

    #[test]
    fn serialization_roundtrip() {
        let cb = Codebook::build(128, 9).unwrap();
        let mut a = Vec::new();
        cb.write_to(&mut a).unwrap();
        let mut b = Vec::new();
        Codebook::build(128, 9).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"HRRCB 128 9\ndigit0: HRRV 128 1\n"));
        let back = Codebook::read_from(&mut &a[..]).unwrap();
        let mut c = Vec::new();
        back.write_to(&mut c).unwrap();
        assert_eq!(a, c);
        assert!(Codebook::read_from(&mut &a[..40]).is_err());
    }

    #[test]
    fn small_dimension_rejected() {
        assert!(matches!(Codebook::build(32, 0), Err(Error::InvalidDimension(32, 64))));
    }
}
