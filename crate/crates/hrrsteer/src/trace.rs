//! Hidden-state traces and their binary file format.
//!
//! A trace file starts with one text line `HST1 <json>` naming the hidden
//! width, the layer count, the seed and the recorded layers, followed by
//! fixed-width records: problem id (u64 LE), layer (u16 LE) and `d_h`
//! little-endian f32 values. Problem metadata is not stored; it comes from
//! the dataset file with matching ids. Any model can produce these files,
//! so traces of a real network can stand in for the surrogate's.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{Problem, ProblemType};
use crate::provenance::Provenance;
use crate::surrogate::Surrogate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub ptype: ProblemType,
    pub n1: u32,
    pub n2: u32,
    pub answer: u32,
}

impl From<&Problem> for TraceMeta {
    fn from(p: &Problem) -> Self {
        TraceMeta { ptype: p.ptype, n1: p.n1, n2: p.n2, answer: p.answer }
    }
}

/// One recorded state of the final prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub problem_id: u64,
    pub layer: u16,
    pub vector: Vec<f32>,
    pub meta: Option<TraceMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub d_h: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub seed: u64,
    pub layer_list: Vec<u16>,
    /// Nested rather than flattened: its master seed would clash with the
    /// model seed above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Record the requested layers for every problem, problem-major.
pub fn export_traces(model: &Surrogate, problems: &[Problem], layers: &[u16]) -> Result<Vec<HiddenTrace>> {
    let top = model.config().layers;
    if let Some(&l) = layers.iter().find(|&&l| l as usize > top) {
        return Err(Error::OutOfRange(format!("layer {l} beyond {top}")));
    }
    let per_problem: Vec<Vec<HiddenTrace>> = problems
        .par_iter()
        .map(|p| {
            let f = model.forward(&p.prompt)?;
            Ok(layers
                .iter()
                .map(|&l| HiddenTrace {
                    problem_id: p.id,
                    layer: l,
                    vector: f.states[l as usize].iter().map(|&x| x as f32).collect(),
                    meta: Some(p.into()),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_problem.into_iter().flatten().collect())
}

pub fn write_traces<W: Write>(w: &mut W, header: &TraceHeader, traces: &[HiddenTrace]) -> Result<()> {
    write!(w, "HST1 ")?;
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(10 + 4 * header.d_h);
    for t in traces {
        if t.vector.len() != header.d_h {
            return Err(Error::DimensionMismatch(t.vector.len(), header.d_h));
        }
        if t.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite trace for problem {}", t.problem_id)));
        }
        buf.clear();
        buf.extend_from_slice(&t.problem_id.to_le_bytes());
        buf.extend_from_slice(&t.layer.to_le_bytes());
        for x in &t.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Read a trace file; records come back without metadata.
pub fn read_traces<R: BufRead>(r: &mut R) -> Result<(TraceHeader, Vec<HiddenTrace>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let json = line
        .strip_prefix("HST1 ")
        .ok_or_else(|| Error::format("trace", "missing HST1 header"))?;
    let header: TraceHeader = serde_json::from_str(json.trim_end())
        .map_err(|e| Error::format("trace", format!("header: {e}")))?;
    let width = 10 + 4 * header.d_h;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % width != 0 {
        return Err(Error::format("trace", format!("{} bytes is not a whole number of records", body.len())));
    }
    let traces = body
        .chunks_exact(width)
        .map(|rec| {
            let problem_id = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
            let layer = u16::from_le_bytes([rec[8], rec[9]]);
            let vector = rec[10..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            HiddenTrace { problem_id, layer, vector, meta: None }
        })
        .collect();
    Ok((header, traces))
}

/// Fill in metadata from the dataset records with matching ids.
pub fn attach_metadata(traces: &mut [HiddenTrace], problems: &[Problem]) -> Result<()> {
    let by_id: HashMap<u64, &Problem> = problems.iter().map(|p| (p.id, p)).collect();
    for t in traces {
        let p = by_id
            .get(&t.problem_id)
            .ok_or_else(|| Error::format("trace", format!("problem {} not in dataset", t.problem_id)))?;
        t.meta = Some((*p).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gen_dataset, DatasetSpec};
    use crate::surrogate::SurrogateConfig;

    #[test]
    fn export_roundtrip() {
        let model = Surrogate::build(SurrogateConfig::default(), 1).unwrap();
        let ds = gen_dataset(&DatasetSpec::uniform(2, 0), 5);
        let traces = export_traces(&model, &ds.train, &[0, 4, 8]).unwrap();
        assert_eq!(traces.len(), ds.train.len() * 3);
        let f = model.forward(&ds.train[0].prompt).unwrap();
        let expect: Vec<f32> = f.states[4].iter().map(|&x| x as f32).collect();
        assert_eq!(traces[1].vector, expect);

        let header = TraceHeader { d_h: 256, layers: 8, seed: 1, layer_list: vec![0, 4, 8], provenance: None };
        let mut bytes = Vec::new();
        write_traces(&mut bytes, &header, &traces).unwrap();
        let (h2, mut back) = read_traces(&mut &bytes[..]).unwrap();
        assert_eq!(h2, header);
        let mut again = Vec::new();
        write_traces(&mut again, &h2, &back).unwrap();
        assert_eq!(bytes, again);
        attach_metadata(&mut back, &ds.train).unwrap();
        assert_eq!(back, traces);
        assert!(attach_metadata(&mut back, &[]).is_err());
        assert!(read_traces(&mut &bytes[..bytes.len() - 1]).is_err());
        assert!(export_traces(&model, &ds.train, &[9]).is_err());
    }
}
