//! Collate run CSVs into summary tables and static SVG charts.

use std::fmt::Write as _;
use std::io::Read;

use crate::error::{Error, Result};

/// A CSV file held as text cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd
            .headers()
            .map_err(|e| Error::format("csv", e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rd
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("csv", e.to_string()))?;
        Ok(CsvTable { header, rows })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format("csv", format!("no column `{name}`")))
    }

    pub fn strings(&self, name: &str) -> Result<Vec<&str>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r.get(i).map(String::as_str).unwrap_or("")).collect())
    }

    /// Numeric column; empty cells are skipped together with their row index.
    pub fn numbers(&self, name: &str) -> Result<Vec<(usize, f64)>> {
        let i = self.index(name)?;
        let mut out = Vec::new();
        for (k, r) in self.rows.iter().enumerate() {
            let cell = r.get(i).map(String::as_str).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let v = cell
                .parse::<f64>()
                .map_err(|_| Error::format("csv", format!("column `{name}` row {}: `{cell}` is not a number", k + 1)))?;
            out.push((k, v));
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str, y: (f64, f64)) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 16.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
    );
    for i in 0..=4 {
        let v = y.0 + (y.1 - y.0) * i as f64 / 4.0;
        let py = H - PAD - (H - 2.0 * PAD) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{py:.1}" text-anchor="end">{}</text>"#, PAD - 6.0, tick(v));
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Line chart with shared axes. Errors when there is nothing to draw.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::Empty("chart has no data"));
    }
    if pts.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Numerical(format!("non-finite point in chart `{title}`")));
    }
    let x = span(pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min), pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max));
    let y = span(
        pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0),
        pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |v: f64| PAD + (W - 2.0 * PAD) * (v - x.0) / (x.1 - x.0);
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - y.0) / (y.1 - y.0);
    let mut svg = String::new();
    frame(&mut svg, title, x_label, y_label, y);
    for i in 0..=4 {
        let v = x.0 + (x.1 - x.0) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(v), H - PAD + 16.0, tick(v));
    }
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = s.points.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(a, b) in &s.points {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(a), py(b));
        }
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - PAD - 120.0, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> Result<String> {
    if categories.is_empty() || series.is_empty() {
        return Err(Error::Empty("chart has no data"));
    }
    if let Some((name, _)) = series.iter().find(|s| s.1.len() != categories.len()) {
        return Err(Error::format("chart", format!("series `{name}` does not match the categories")));
    }
    if series.iter().flat_map(|s| &s.1).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite bar in chart `{title}`")));
    }
    let hi = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::max);
    let lo = series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::min);
    let y = span(lo, hi);
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - y.0) / (y.1 - y.0);
    let mut svg = String::new();
    frame(&mut svg, title, "", y_label, y);
    let group = (W - 2.0 * PAD) / categories.len() as f64;
    let bar = group * 0.8 / series.len() as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = PAD + group * c as f64 + group * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            let (top, bottom) = (py(vals[c].max(0.0)), py(vals[c].min(0.0)));
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * k as f64,
                bar,
                bottom - top,
                COLORS[k % COLORS.len()]
            );
        }
        let cx = gx + group * 0.4;
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{}" text-anchor="end" transform="rotate(-35 {cx:.1} {})">{}</text>"#,
            H - PAD + 14.0,
            H - PAD + 14.0,
            escape(cat)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * k as f64,
            COLORS[k % COLORS.len()],
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Inputs a run directory may hold; each is optional on its own.
#[derive(Debug, Default)]
pub struct ReportInputs {
    /// `layer,encoder_rmse,decoder_rmse,err_hundreds,err_tens,err_ones`
    pub layers: Option<CsvTable>,
    /// Per-type evaluation table.
    pub eval: Option<CsvTable>,
    /// `bin,count,split`
    pub histogram: Option<CsvTable>,
    /// Fine-tuning epochs.
    pub finetune: Option<CsvTable>,
}

/// Output file name and contents.
pub type ReportFile = (String, String);

fn series(t: &CsvTable, x: &str, y: &str, name: &str) -> Result<Series> {
    let xs = t.numbers(x)?;
    let ys = t.numbers(y)?;
    let points = ys
        .iter()
        .filter_map(|&(k, v)| xs.iter().find(|p| p.0 == k).map(|p| (p.1, v)))
        .collect();
    Ok(Series { name: name.to_string(), points })
}

fn nonempty<'a>(t: &'a Option<CsvTable>, what: &'static str) -> Result<Option<&'a CsvTable>> {
    match t {
        Some(t) if t.rows.is_empty() => Err(Error::Empty(what)),
        other => Ok(other.as_ref()),
    }
}

/// Build the summary table and charts. At least one input must be present
/// and every present input must have rows.
pub fn build(inputs: &ReportInputs, svg: bool) -> Result<Vec<ReportFile>> {
    let layers = nonempty(&inputs.layers, "layer curve csv has no rows")?;
    let eval = nonempty(&inputs.eval, "evaluation csv has no rows")?;
    let hist = nonempty(&inputs.histogram, "histogram csv has no rows")?;
    let ft = nonempty(&inputs.finetune, "fine-tuning csv has no rows")?;
    if layers.is_none() && eval.is_none() && hist.is_none() && ft.is_none() {
        return Err(Error::Empty("no report inputs found"));
    }
    let mut out = Vec::new();
    if let Some(t) = eval {
        let types: Vec<String> = t.strings("type")?.into_iter().map(str::to_string).collect();
        let col = |name: &str| -> Result<Vec<f64>> { Ok(t.numbers(name)?.into_iter().map(|p| p.1).collect()) };
        let (bs, bc, s, c) = (col("baseline_score")?, col("baseline_ce")?, col("score")?, col("ce")?);
        if [bs.len(), bc.len(), s.len(), c.len()].iter().any(|&n| n != types.len()) {
            return Err(Error::format("csv", "evaluation table has blank cells"));
        }
        let mut table = CsvTable {
            header: ["type", "standard_score", "steered_score", "standard_ce", "steered_ce", "ce_reduction"]
                .map(String::from)
                .to_vec(),
            rows: Vec::new(),
        };
        for i in 0..types.len() {
            let red = if bc[i] > 0.0 { 1.0 - c[i] / bc[i] } else { 0.0 };
            table.rows.push(vec![
                types[i].clone(),
                format!("{:.2}", bs[i]),
                format!("{:.2}", s[i]),
                format!("{:.4}", bc[i]),
                format!("{:.4}", c[i]),
                format!("{red:.4}"),
            ]);
        }
        out.push(("score_table.csv".into(), table.to_csv()));
        if svg {
            let chart = bar_chart("Score by problem type", "score (%)", &types, &[("standard".into(), bs), ("steered".into(), s)])?;
            out.push(("score_by_type.svg".into(), chart));
        }
    }
    if let Some(t) = layers {
        out.push(("layer_curves.csv".into(), t.to_csv()));
        if svg {
            let rmse = [series(t, "layer", "encoder_rmse", "encoder")?, series(t, "layer", "decoder_rmse", "decoder")?];
            out.push(("layer_rmse.svg".into(), line_chart("Probe RMSE by layer", "layer", "RMSE", &rmse)?));
            let err = [
                series(t, "layer", "err_hundreds", "hundreds")?,
                series(t, "layer", "err_tens", "tens")?,
                series(t, "layer", "err_ones", "ones")?,
            ];
            out.push(("layer_digit_error.svg".into(), line_chart("Digit error by layer", "layer", "error rate", &err)?));
        }
    }
    if let Some(t) = hist {
        out.push(("gate_histogram.csv".into(), t.to_csv()));
        if svg {
            let split = t.strings("split")?;
            let bins = t.strings("bin")?;
            let counts: Vec<f64> = t.numbers("count")?.into_iter().map(|p| p.1).collect();
            if counts.len() != bins.len() {
                return Err(Error::format("csv", "histogram has blank counts"));
            }
            let mut cats: Vec<String> = Vec::new();
            for b in &bins {
                if !cats.iter().any(|c| c == b) {
                    cats.push(b.to_string());
                }
            }
            let mut tr = vec![0.0; cats.len()];
            let mut un = vec![0.0; cats.len()];
            for i in 0..bins.len() {
                let c = cats.iter().position(|c| c == bins[i]).expect("collected");
                match split[i] {
                    "trained" => tr[c] += counts[i],
                    _ => un[c] += counts[i],
                }
            }
            let chart = bar_chart("Gate score by split", "problems", &cats, &[("trained".into(), tr), ("untrained".into(), un)])?;
            out.push(("gate_histogram.svg".into(), chart));
        }
    }
    if let Some(t) = ft {
        out.push(("finetune_curve.csv".into(), t.to_csv()));
        if svg {
            let loss = [series(t, "epoch", "loss", "train ce")?, series(t, "epoch", "eval_ce", "eval ce")?];
            out.push(("finetune_loss.svg".into(), line_chart("Fine-tuning loss", "epoch", "cross-entropy", &loss)?));
            let score = series(t, "epoch", "eval_score", "eval score")?;
            if !score.points.is_empty() {
                out.push(("finetune_score.svg".into(), line_chart("Fine-tuning score", "epoch", "score (%)", &[score])?));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> CsvTable {
        CsvTable::read(text.as_bytes()).unwrap()
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(build(&ReportInputs::default(), true), Err(Error::Empty(_))));
        let inputs = ReportInputs { histogram: Some(table("bin,count,split\n")), ..Default::default() };
        assert!(matches!(build(&inputs, true), Err(Error::Empty(_))));
        assert!(line_chart("t", "x", "y", &[]).is_err());
        assert!(bar_chart("t", "y", &[], &[]).is_err());
    }

    #[test]
    fn builds_charts() {
        let inputs = ReportInputs {
            eval: Some(table(
                "type,trained,count,baseline_score,baseline_ce,score,ce,intervention_rate\n\
                 modulo,true,10,0.0,500.0,100.0,0.01,1.0\naddition,false,10,100.0,3.0,100.0,3.0,0.0\n",
            )),
            histogram: Some(table("bin,count,split\n0.55,0,trained\n0.55,4,untrained\n1.00,5,trained\n1.00,0,untrained\n")),
            finetune: Some(table("epoch,loss,step,eval_score,eval_ce\n0,400,0.001,1.0,390\n1,200,0.001,,\n2,10,0.001,80,12\n")),
            layers: None,
        };
        let files = build(&inputs, true).unwrap();
        let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
        assert!(names.contains(&"score_table.csv") && names.contains(&"gate_histogram.svg"));
        let table_csv = &files.iter().find(|f| f.0 == "score_table.csv").unwrap().1;
        assert!(table_csv.contains("modulo,0.00,100.00,500.0000,0.0100,1.0000"));
        for (name, body) in &files {
            if name.ends_with(".svg") {
                assert!(body.starts_with("<svg") && body.trim_end().ends_with("</svg>"));
            }
        }
        assert_eq!(build(&inputs, false).unwrap().len(), 3);
    }
}
