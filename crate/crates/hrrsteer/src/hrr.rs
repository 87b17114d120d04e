//! Holographic reduced representations.
//!
//! Vectors are real, fixed dimension `d`, binding is circular convolution and
//! similarity is the raw dot product. Two convolution paths exist: [`bind`]
//! evaluates the defining sum directly in O(d²) and serves as the oracle,
//! [`bind_fast`] goes through the frequency domain in O(d log d).
//!
//! Vectors carry a `unitary` flag. Construction via [`unitary_vector`] sets it,
//! binding two unitary vectors keeps it, anything that mixes magnitudes
//! (bundling, scaling, random draws) clears it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::seed;

/// A real vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct HrrVector {
    values: Vec<f64>,
    unitary: bool,
}

impl HrrVector {
    /// Wrap raw values. Fails on empty input or non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDimension(0, 1));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite entry at index {i}")));
        }
        Ok(HrrVector { values, unitary: false })
    }

    pub fn zeros(d: usize) -> Self {
        HrrVector { values: vec![0.0; d], unitary: false }
    }

    /// The identity of binding: (1, 0, ..., 0).
    pub fn impulse(d: usize) -> Self {
        let mut values = vec![0.0; d];
        values[0] = 1.0;
        HrrVector { values, unitary: true }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Whether the vector is flagged unitary (not a spectral check, see [`is_unitary`]).
    pub fn flagged_unitary(&self) -> bool {
        self.unitary
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn scaled(&self, s: f64) -> HrrVector {
        HrrVector {
            values: self.values.iter().map(|v| v * s).collect(),
            unitary: false,
        }
    }

    /// In-place `self += other`. Clears the unitary flag.
    pub fn add_assign(&mut self, other: &HrrVector) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.unitary = false;
        Ok(())
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(a, b));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Entries iid N(0, 1/d), so the expected squared norm is 1.
pub fn random_vector(d: usize, seed: u64) -> Result<HrrVector> {
    if d < 2 {
        return Err(Error::InvalidDimension(d, 2));
    }
    let mut rng = seed::rng_from(seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    let values = (0..d).map(|_| normal.sample(&mut rng)).collect();
    Ok(HrrVector { values, unitary: false })
}

/// A real vector whose spectrum has unit magnitude everywhere.
///
/// Phases are uniform on the circle, conjugate symmetric so the inverse
/// transform is real; the DC (and for even d the Nyquist) bin is ±1.
pub fn unitary_vector(d: usize, seed: u64) -> Result<HrrVector> {
    if d < 2 {
        return Err(Error::InvalidDimension(d, 2));
    }
    let mut rng = seed::rng_from(seed);
    let mut spec = vec![Complex::new(0.0, 0.0); d];
    spec[0] = Complex::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0);
    for k in 1..=(d - 1) / 2 {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let c = Complex::from_polar(1.0, theta);
        spec[k] = c;
        spec[d - k] = c.conj();
    }
    if d.is_multiple_of(2) {
        spec[d / 2] = Complex::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0);
    }
    Ok(HrrVector { values: inverse_real(spec), unitary: true })
}

/// Circular convolution evaluated directly: z_i = Σ_j x_j · y_{(i−j) mod d}.
pub fn bind(x: &HrrVector, y: &HrrVector) -> Result<HrrVector> {
    check_dims(x.dim(), y.dim())?;
    let d = x.dim();
    let (xv, yv) = (&x.values, &y.values);
    let mut z = vec![0.0; d];
    for (i, zi) in z.iter_mut().enumerate() {
        // j ≤ i pairs with y[i−j]; j > i wraps to y[d+i−j].
        let mut acc = 0.0;
        for j in 0..=i {
            acc += xv[j] * yv[i - j];
        }
        for j in (i + 1)..d {
            acc += xv[j] * yv[d + i - j];
        }
        *zi = acc;
    }
    Ok(HrrVector { values: z, unitary: x.unitary && y.unitary })
}

/// Circular convolution through the frequency domain.
pub fn bind_fast(x: &HrrVector, y: &HrrVector) -> Result<HrrVector> {
    check_dims(x.dim(), y.dim())?;
    let fx = spectrum(x);
    let fy = spectrum(y);
    let prod = fx.iter().zip(&fy).map(|(a, b)| a * b).collect();
    Ok(HrrVector { values: inverse_real(prod), unitary: x.unitary && y.unitary })
}

/// Elementwise sum, unnormalized.
pub fn bundle(vs: &[HrrVector]) -> Result<HrrVector> {
    let first = vs.first().ok_or(Error::Empty("bundle of zero vectors"))?;
    let mut out = first.values.clone();
    for v in &vs[1..] {
        check_dims(first.dim(), v.dim())?;
        for (a, b) in out.iter_mut().zip(&v.values) {
            *a += b;
        }
    }
    // A single-element bundle is the element itself, flag included.
    let unitary = vs.len() == 1 && first.unitary;
    Ok(HrrVector { values: out, unitary })
}

/// Raw dot product.
pub fn similarity(x: &HrrVector, y: &HrrVector) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    Ok(dot(&x.values, &y.values))
}

/// (y1, yd, y(d−1), ..., y2): keeps the first entry, reverses the rest.
pub fn pseudo_inverse(y: &HrrVector) -> HrrVector {
    let mut values = Vec::with_capacity(y.dim());
    values.push(y.values[0]);
    values.extend(y.values[1..].iter().rev());
    HrrVector { values, unitary: y.unitary }
}

/// Approximate retrieval: z ⊛ y†.
pub fn unbind(z: &HrrVector, y: &HrrVector) -> Result<HrrVector> {
    bind_fast(z, &pseudo_inverse(y))
}

/// k-fold self-binding via spectral exponentiation; k = 0 gives the impulse.
pub fn bind_power(x: &HrrVector, k: u32) -> HrrVector {
    if k == 0 {
        return HrrVector::impulse(x.dim());
    }
    if k == 1 {
        return x.clone();
    }
    let spec = spectrum(x).into_iter().map(|c| c.powu(k)).collect();
    HrrVector { values: inverse_real(spec), unitary: x.unitary }
}

/// True iff every spectral magnitude lies within `tol` of 1.
pub fn is_unitary(x: &HrrVector, tol: f64) -> bool {
    spectrum(x).iter().all(|c| (c.norm() - 1.0).abs() <= tol)
}

/// Discrete Fourier transform of the vector (unnormalized forward transform).
pub fn spectrum(x: &HrrVector) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan(x.dim(), false).process(&mut buf);
    buf
}

fn inverse_real(mut spec: Vec<Complex<f64>>) -> Vec<f64> {
    let d = spec.len();
    plan(d, true).process(&mut spec);
    let inv = 1.0 / d as f64;
    spec.iter().map(|c| c.re * inv).collect()
}

type PlanCache = (FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>);

thread_local! {
    static PLANS: RefCell<PlanCache> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(d: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((d, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(d)
                } else {
                    planner.plan_fft_forward(d)
                }
            })
            .clone()
    })
}

/// Write `HRRV <d> <unitary>\n` followed by little-endian f32 values.
pub fn write_hrrv<W: Write>(w: &mut W, v: &HrrVector) -> Result<()> {
    writeln!(w, "HRRV {} {}", v.dim(), v.unitary as u8)?;
    let mut buf = Vec::with_capacity(4 * v.dim());
    for &x in &v.values {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read one vector written by [`write_hrrv`]. The unitary flag is taken
/// from the header as is; values come back at f32 precision.
pub fn read_hrrv<R: BufRead>(r: &mut R) -> Result<HrrVector> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let (d, unitary) = parse_hrrv_header(&header)?;
    read_hrrv_body(r, d, unitary)
}

pub(crate) fn parse_hrrv_header(header: &str) -> Result<(usize, bool)> {
    let fields: Vec<&str> = header.split_whitespace().collect();
    let ["HRRV", d, u] = fields.as_slice() else {
        return Err(Error::format("HRRV", format!("bad header {header:?}")));
    };
    let d: usize = d.parse().map_err(|_| Error::format("HRRV", "bad dimension"))?;
    if d == 0 {
        return Err(Error::InvalidDimension(0, 1));
    }
    match *u {
        "0" => Ok((d, false)),
        "1" => Ok((d, true)),
        _ => Err(Error::format("HRRV", "unitary flag must be 0 or 1")),
    }
}

pub(crate) fn read_hrrv_body<R: BufRead>(r: &mut R, d: usize, unitary: bool) -> Result<HrrVector> {
    let mut raw = vec![0u8; 4 * d];
    r.read_exact(&mut raw)?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let v = HrrVector::new(values)?;
    Ok(HrrVector { unitary, ..v })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> HrrVector {
        HrrVector::new(xs.to_vec()).unwrap()
    }

    fn max_abs_diff(a: &HrrVector, b: &HrrVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn impulse_is_identity() {
        let y = v(&[0.3, -1.0, 2.0, 0.5]);
        assert_eq!(bind(&HrrVector::impulse(4), &y).unwrap().values(), y.values());
        assert!(max_abs_diff(&bind_fast(&HrrVector::impulse(4), &y).unwrap(), &y) < 1e-15);
    }

    #[test]
    fn shift_property() {
        let e1 = v(&[0.0, 1.0, 0.0]);
        assert_eq!(bind(&e1, &e1).unwrap().values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_computed_convolution() {
        // z0 = 1·4 + 2·6 + 3·5, z1 = 1·5 + 2·4 + 3·6, z2 = 1·6 + 2·5 + 3·4
        let z = bind(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(z.values(), &[31.0, 31.0, 28.0]);
    }

    #[test]
    fn pseudo_inverse_example() {
        assert_eq!(pseudo_inverse(&v(&[1.0, 2.0, 3.0, 4.0])).values(), &[1.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(random_vector(1, 0), Err(Error::InvalidDimension(1, 2))));
        assert!(matches!(unitary_vector(0, 0), Err(Error::InvalidDimension(0, 2))));
        let a = HrrVector::zeros(3);
        let b = HrrVector::zeros(4);
        assert!(bind(&a, &b).is_err());
        assert!(bind_fast(&a, &b).is_err());
        assert!(similarity(&a, &b).is_err());
        assert!(bundle(&[]).is_err());
        assert!(HrrVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn random_vector_statistics() {
        let a = random_vector(1024, 1).unwrap();
        let b = random_vector(1024, 2).unwrap();
        assert_eq!(a, random_vector(1024, 1).unwrap());
        assert!((0.8..=1.2).contains(&a.norm_sq()));
        assert!(similarity(&a, &b).unwrap().abs() < 0.15);
    }

    #[test]
    fn unitary_properties() {
        for d in [2, 3, 64, 255, 1024] {
            let u = unitary_vector(d, 11).unwrap();
            assert!(u.flagged_unitary());
            assert!(is_unitary(&u, 1e-8), "d={d}");
            assert!((u.norm_sq() - 1.0).abs() < 1e-8);
            let id = bind_fast(&u, &pseudo_inverse(&u)).unwrap();
            assert!(max_abs_diff(&id, &HrrVector::impulse(d)) < 1e-8);
        }
        assert!(!is_unitary(&HrrVector::zeros(8), 1e-8));
        let w = bind(&unitary_vector(128, 1).unwrap(), &unitary_vector(128, 2).unwrap()).unwrap();
        assert!(w.flagged_unitary() && is_unitary(&w, 1e-8));
    }

    #[test]
    fn bundle_and_similarity() {
        let a = random_vector(1024, 3).unwrap();
        let b = random_vector(1024, 4).unwrap();
        assert_eq!(bundle(std::slice::from_ref(&a)).unwrap(), a);
        let zero = bundle(&[a.clone(), a.scaled(-1.0)]).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
        let s = similarity(&bundle(&[a.clone(), b]).unwrap(), &a).unwrap();
        assert!((s - a.norm_sq()).abs() < 0.2);
        assert_eq!(similarity(&a, &HrrVector::zeros(1024)).unwrap(), 0.0);
    }

    #[test]
    fn unbind_recovers_filler() {
        let x = random_vector(1024, 5).unwrap();
        let u = unitary_vector(1024, 6).unwrap();
        let r = unbind(&bind_fast(&x, &u).unwrap(), &u).unwrap();
        let cos = similarity(&r, &x).unwrap() / (r.norm_sq() * x.norm_sq()).sqrt();
        assert!(cos >= 0.999);
        assert!(max_abs_diff(&unbind(&x, &HrrVector::impulse(1024)).unwrap(), &x) < 1e-12);
    }

    #[test]
    fn power_matches_repeated_binding() {
        let x = unitary_vector(256, 9).unwrap();
        assert_eq!(bind_power(&x, 0), HrrVector::impulse(256));
        let rep = bind(&x, &bind(&x, &x).unwrap()).unwrap();
        assert!(max_abs_diff(&bind_power(&x, 3), &rep) < 1e-10);
    }

    #[test]
    fn hrrv_roundtrip() {
        let u = unitary_vector(64, 3).unwrap();
        let mut buf = Vec::new();
        write_hrrv(&mut buf, &u).unwrap();
        assert!(buf.starts_with(b"HRRV 64 1\n"));
        let back = read_hrrv(&mut &buf[..]).unwrap();
        assert!(back.flagged_unitary());
        assert!(max_abs_diff(&back, &u) < 1e-7);
        let mut again = Vec::new();
        write_hrrv(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        assert!(read_hrrv(&mut &b"HRRV x 1\n"[..]).is_err());
        assert!(read_hrrv(&mut &b"HRRV 4 1\n\0\0"[..]).is_err());
    }
}
