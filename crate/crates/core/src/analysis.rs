//! Criticality sweeps and modality-correlation profiles over trained
//! checkpoints, with CSV and SVG report emission.

use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, EOS};
use crate::error::AnalysisError;
use crate::eval;
use crate::model::{Model, ModelConfig, ModelKind, SampleInput};
use crate::tensor::Tensor;

/// Default interpolation grid for criticality sweeps.
pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Selects checkpoint tensors by name prefix, e.g. "decoder.1.".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSelector {
    pub prefix: String,
}

impl ModuleSelector {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into() }
    }

    pub fn matches(&self, name: &str) -> bool {
        name.starts_with(&self.prefix)
    }
}

/// Matched tensors become (1−rho)·trained + rho·pretrained; everything else
/// is copied from `trained` unchanged. rho = 1 therefore means the pretrained
/// values are used. The endpoints reproduce their source tensors exactly.
pub fn interpolate_module(
    trained: &Checkpoint,
    pretrained: &Checkpoint,
    sel: &ModuleSelector,
    rho: f64,
) -> Result<Checkpoint, AnalysisError> {
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(AnalysisError::Contract(format!("rho {rho} outside [0, 1]")));
    }
    let matched: Vec<String> = trained
        .tensor_names()
        .filter(|n| sel.matches(n))
        .map(str::to_string)
        .collect();
    if matched.is_empty() {
        return Err(AnalysisError::Contract(format!(
            "selector {:?} matches no tensors",
            sel.prefix
        )));
    }
    let mut out = Checkpoint::new();
    let names: Vec<String> = trained.names().map(str::to_string).collect();
    for name in names {
        let rec = trained.get(&name).expect("name listed");
        if matched.iter().any(|m| m == &name) {
            let src = pretrained.get(&name).ok_or_else(|| {
                AnalysisError::Contract(format!("pretrained checkpoint lacks {name}"))
            })?;
            if src.shape != rec.shape {
                return Err(AnalysisError::Contract(format!(
                    "shape mismatch for {name}: trained {:?}, pretrained {:?}",
                    rec.shape, src.shape
                )));
            }
            let data: Vec<f32> = if rho == 0.0 {
                rec.data.clone()
            } else if rho == 1.0 {
                src.data.clone()
            } else {
                rec.data
                    .iter()
                    .zip(&src.data)
                    .map(|(&t, &p)| ((1.0 - rho) * t as f64 + rho * p as f64) as f32)
                    .collect()
            };
            out.insert(&name, rec.shape.clone(), data).map_err(AnalysisError::Model)?;
        } else {
            out.insert(&name, rec.shape.clone(), rec.data.clone())
                .map_err(AnalysisError::Model)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityPoint {
    pub ratio: f64,
    pub bleu: f64,
    /// BLEU at this ratio minus BLEU of the untouched model.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityCurve {
    pub selector: String,
    pub points: Vec<CriticalityPoint>,
}

fn references(kind: ModelKind, ds: &Dataset) -> Vec<Vec<usize>> {
    ds.samples
        .iter()
        .map(|s| match kind {
            ModelKind::Asr => s.src.clone(),
            _ => s.tgt.clone(),
        })
        .collect()
}

fn bleu_of_checkpoint(
    mcfg: &ModelConfig,
    kind: ModelKind,
    ckpt: &Checkpoint,
    dev: &Dataset,
    refs: &[Vec<usize>],
    beam: usize,
) -> Result<f64, AnalysisError> {
    let mut model = Model::new(mcfg.clone(), kind, 0).map_err(AnalysisError::Model)?;
    model.load_checkpoint(ckpt).map_err(AnalysisError::Model)?;
    let rows = eval::decode_dataset(&model, dev, beam).map_err(AnalysisError::Model)?;
    let hyps: Vec<Vec<usize>> = rows.into_iter().map(|(_, t)| t).collect();
    eval::corpus_bleu(&hyps, refs).map_err(AnalysisError::Model)
}

/// Rolls each selected module back toward its pretrained source over the
/// ratio grid and scores the result on the dev set. `pretrained_map` pairs a
/// tensor-name prefix with the checkpoint supplying the rollback values; the
/// longest matching prefix wins per tensor. Ratio 0 reuses the baseline
/// decode, so its delta is exactly zero by construction.
#[allow(clippy::too_many_arguments)]
pub fn criticality_sweep(
    mcfg: &ModelConfig,
    kind: ModelKind,
    trained: &Checkpoint,
    pretrained_map: &[(String, &Checkpoint)],
    selectors: &[ModuleSelector],
    ratios: &[f64],
    dev: &Dataset,
    beam: usize,
) -> Result<Vec<CriticalityCurve>, AnalysisError> {
    if selectors.is_empty() {
        return Err(AnalysisError::Contract("no selectors given".into()));
    }
    if ratios.is_empty() {
        return Err(AnalysisError::Contract("no ratios given".into()));
    }
    if dev.is_empty() {
        return Err(AnalysisError::Contract("empty dev set".into()));
    }
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) || !r.is_finite() {
            return Err(AnalysisError::Contract(format!("ratio {r} outside [0, 1]")));
        }
    }
    let mut by_len: Vec<&(String, &Checkpoint)> = pretrained_map.iter().collect();
    by_len.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));

    let refs = references(kind, dev);
    let baseline = bleu_of_checkpoint(mcfg, kind, trained, dev, &refs, beam)?;

    let mut curves = Vec::with_capacity(selectors.len());
    for sel in selectors {
        // Assemble the rollback source for this selector's tensors.
        let mut source = Checkpoint::new();
        for name in trained.tensor_names() {
            if !sel.matches(name) {
                continue;
            }
            let (_, ckpt) = by_len
                .iter()
                .find(|(p, _)| name.starts_with(p.as_str()))
                .ok_or_else(|| {
                    AnalysisError::Contract(format!("no pretrained source covers {name}"))
                })?;
            let rec = ckpt.get(name).ok_or_else(|| {
                AnalysisError::Contract(format!("pretrained source lacks {name}"))
            })?;
            source
                .insert(name, rec.shape.clone(), rec.data.clone())
                .map_err(AnalysisError::Model)?;
        }
        let mut points = Vec::with_capacity(ratios.len());
        for &rho in ratios {
            let bleu = if rho == 0.0 {
                baseline
            } else {
                let rolled = interpolate_module(trained, &source, sel, rho)?;
                bleu_of_checkpoint(mcfg, kind, &rolled, dev, &refs, beam)?
            };
            points.push(CriticalityPoint { ratio: rho, bleu, delta: bleu - baseline });
        }
        curves.push(CriticalityCurve { selector: sel.prefix.clone(), points });
    }
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// Mean of the per-component coefficients; degenerate components count
    /// as zero, keeping the divisor at the full component count.
    pub r_mean: f64,
    pub components: Vec<f64>,
    /// True where a component had zero variance on either side.
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationProfile {
    pub layers: Vec<LayerCorrelation>,
    pub n_points: usize,
}

/// Two-pass Pearson correlation: means first, then centered moments. The
/// flag marks a degenerate pair (either series has zero variance), reported
/// as r = 0.
pub fn pearson(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        (0.0, true)
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt()), false)
    }
}

/// Per-layer Pearson profile over aligned (speech, text) decoder-state pairs.
/// Each pair holds one tensor per decoder layer with matching row counts.
fn profile_from_pairs(pairs: &[(Vec<Tensor>, Vec<Tensor>)]) -> Result<CorrelationProfile, AnalysisError> {
    let first = pairs
        .first()
        .ok_or_else(|| AnalysisError::Contract("no aligned state pairs".into()))?;
    let n_layers = first.0.len();
    if n_layers == 0 {
        return Err(AnalysisError::Contract("zero decoder layers".into()));
    }
    let d = first.0[0].shape()[1];
    let mut n_points = 0usize;
    for (s, t) in pairs {
        if s.len() != n_layers || t.len() != n_layers {
            return Err(AnalysisError::Contract("layer count mismatch across pairs".into()));
        }
        for l in 0..n_layers {
            if s[l].shape() != t[l].shape() || s[l].shape()[1] != d {
                return Err(AnalysisError::Contract(format!(
                    "state shape mismatch at layer {l}"
                )));
            }
        }
        n_points += s[0].shape()[0];
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut components = Vec::with_capacity(d);
        let mut degenerate = Vec::with_capacity(d);
        let mut xs = Vec::with_capacity(n_points);
        let mut ys = Vec::with_capacity(n_points);
        for comp in 0..d {
            xs.clear();
            ys.clear();
            for (s, t) in pairs {
                let rows = s[l].shape()[0];
                for r in 0..rows {
                    xs.push(s[l].data()[r * d + comp]);
                    ys.push(t[l].data()[r * d + comp]);
                }
            }
            let (r, flag) = pearson(&xs, &ys);
            components.push(r);
            degenerate.push(flag);
        }
        let r_mean = components.iter().sum::<f64>() / d as f64;
        layers.push(LayerCorrelation { layer: l, r_mean, components, degenerate });
    }
    Ok(CorrelationProfile { layers, n_points })
}

/// Teacher-forces the same target through the speech path and the text path
/// and correlates the decoder layer states per hidden component, pooling all
/// (sample, position) pairs. Runs in eval mode.
pub fn modality_correlation(model: &Model, dev: &Dataset) -> Result<CorrelationProfile, AnalysisError> {
    match model.kind() {
        ModelKind::Joint(s) if s.has_text_branch() => {}
        _ => {
            return Err(AnalysisError::Contract(
                "modality correlation needs a joint model with a text branch".into(),
            ))
        }
    }
    if dev.is_empty() {
        return Err(AnalysisError::Contract("empty dev set".into()));
    }
    let mut pairs = Vec::with_capacity(dev.samples.len());
    for s in &dev.samples {
        let feats = s.speech.as_ref().ok_or_else(|| {
            AnalysisError::Contract(format!("sample {} has no speech features", s.id))
        })?;
        let mut y = s.tgt.clone();
        y.push(EOS);
        let ts = model
            .forward_trace(SampleInput::Speech(feats), &y)
            .map_err(AnalysisError::Model)?;
        let tt = model
            .forward_trace(SampleInput::Text(&s.src), &y)
            .map_err(AnalysisError::Model)?;
        pairs.push((ts.layer_states, tt.layer_states));
    }
    profile_from_pairs(&pairs)
}

fn audit_extrema(layer: &LayerCorrelation) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (r, &flag) in layer.components.iter().zip(&layer.degenerate) {
        if !flag {
            min = min.min(*r);
            max = max.max(*r);
        }
    }
    if min > max {
        (0.0, 0.0)
    } else {
        (min, max)
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2",
];

/// Fixed-size line chart with labeled axes; output bytes are a pure function
/// of the input.
fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (70.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut x0, mut x1) = (lo(&xs), hi(&xs));
    let (mut y0, mut y1) = (lo(&ys), hi(&ys));
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        ml + pw / 2.0
    ));
    s.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#555\"/>\n"
    ));
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let yp = py(yv);
        s.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{yp:.2}\" x2=\"{:.2}\" y2=\"{yp:.2}\" stroke=\"#ddd\"/>\n",
            ml + pw
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{yv:.4}</text>\n",
            ml - 6.0,
            yp + 4.0
        ));
    }
    let mut xticks: Vec<f64> = xs.clone();
    xticks.sort_by(f64::total_cmp);
    xticks.dedup();
    for xv in &xticks {
        let xp = px(*xv);
        s.push_str(&format!(
            "<line x1=\"{xp:.2}\" y1=\"{:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n",
            mt,
            mt + ph
        ));
        s.push_str(&format!(
            "<text x=\"{xp:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xv:.2}</text>\n",
            mt + ph + 16.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x_label}</text>\n",
        ml + pw / 2.0,
        h - 14.0
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{y_label}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        for (x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                px(*x),
                py(*y)
            ));
        }
        let ly = mt + 14.0 + 16.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            ml + pw + 8.0,
            ml + pw + 28.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{label}</text>\n",
            ml + pw + 32.0,
            ly + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes criticality.csv and criticality.svg into `dir`.
pub fn emit_criticality_report(curves: &[CriticalityCurve], dir: &Path) -> Result<(), AnalysisError> {
    if curves.is_empty() {
        return Err(AnalysisError::Contract("no curves to report".into()));
    }
    fs::create_dir_all(dir)?;
    let mut csv = String::from("selector,ratio,bleu,bleu_delta\n");
    for c in curves {
        for p in &c.points {
            csv.push_str(&format!("{},{},{:.6},{:.6}\n", c.selector, p.ratio, p.bleu, p.delta));
        }
    }
    fs::write(dir.join("criticality.csv"), csv)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|c| {
            (
                c.selector.clone(),
                c.points.iter().map(|p| (p.ratio, p.delta)).collect(),
            )
        })
        .collect();
    let svg = svg_line_chart(
        "Module criticality",
        "rollback ratio",
        "BLEU delta",
        &series,
    );
    fs::write(dir.join("criticality.svg"), svg)?;
    Ok(())
}

/// Writes correlation.csv and correlation.svg into `dir`.
pub fn emit_correlation_report(profile: &CorrelationProfile, dir: &Path) -> Result<(), AnalysisError> {
    if profile.layers.is_empty() {
        return Err(AnalysisError::Contract("empty correlation profile".into()));
    }
    fs::create_dir_all(dir)?;
    let mut csv = String::from("layer,r_mean,r_min_component,r_max_component,n_points\n");
    for l in &profile.layers {
        let (min, max) = audit_extrema(l);
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            l.layer, l.r_mean, min, max, profile.n_points
        ));
    }
    fs::write(dir.join("correlation.csv"), csv)?;
    let pts: Vec<(f64, f64)> = profile
        .layers
        .iter()
        .map(|l| (l.layer as f64, l.r_mean))
        .collect();
    let svg = svg_line_chart(
        "Speech/text decoder-state correlation",
        "decoder layer",
        "mean Pearson r",
        &[("r_mean".to_string(), pts)],
    );
    fs::write(dir.join("correlation.svg"), svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusSpec};
    use crate::model::Scheme;
    use crate::rng::rng_from;
    use rand::Rng;

    fn scalar_ckpt(v: f32) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("m.w", vec![1], vec![v]).unwrap();
        c.insert("other.b", vec![2], vec![7.0, 8.0]).unwrap();
        c
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let trained = scalar_ckpt(2.0);
        let pretrained = scalar_ckpt(4.0);
        let sel = ModuleSelector::new("m.");
        let at0 = interpolate_module(&trained, &pretrained, &sel, 0.0).unwrap();
        assert_eq!(at0.to_bytes(), trained.to_bytes());
        let at1 = interpolate_module(&trained, &pretrained, &sel, 1.0).unwrap();
        assert_eq!(at1.get("m.w").unwrap().data, vec![4.0]);
        let mid = interpolate_module(&trained, &pretrained, &sel, 0.5).unwrap();
        assert_eq!(mid.get("m.w").unwrap().data, vec![3.0]);
    }

    #[test]
    fn interpolation_touches_only_matched_tensors() {
        let trained = scalar_ckpt(2.0);
        let mut pretrained = scalar_ckpt(4.0);
        pretrained = {
            let mut c = Checkpoint::new();
            c.insert("m.w", vec![1], vec![4.0]).unwrap();
            c.insert("other.b", vec![2], vec![-1.0, -2.0]).unwrap();
            let _ = pretrained;
            c
        };
        let out = interpolate_module(&trained, &pretrained, &ModuleSelector::new("m."), 0.75).unwrap();
        assert_eq!(out.get("other.b").unwrap().data, vec![7.0, 8.0]);
        assert!((out.get("m.w").unwrap().data[0] - 3.5).abs() < 1e-6);
    }

    #[test]
    fn interpolation_contract_errors() {
        let trained = scalar_ckpt(2.0);
        let pretrained = scalar_ckpt(4.0);
        assert!(interpolate_module(&trained, &pretrained, &ModuleSelector::new("nope."), 0.5).is_err());
        assert!(interpolate_module(&trained, &pretrained, &ModuleSelector::new("m."), 1.5).is_err());
        let mut bad_shape = Checkpoint::new();
        bad_shape.insert("m.w", vec![2], vec![1.0, 2.0]).unwrap();
        assert!(interpolate_module(&trained, &bad_shape, &ModuleSelector::new("m."), 0.5).is_err());
    }

    #[test]
    fn pearson_matches_a_direct_oracle() {
        let mut rng = rng_from(41);
        let xs: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.6 * x + 0.4 * (rng.random::<f64>() - 0.5))
            .collect();
        let (got, flag) = pearson(&xs, &ys);
        assert!(!flag);
        // Textbook sums written out independently.
        let n = xs.len() as f64;
        let mx: f64 = xs.iter().sum::<f64>() / n;
        let my: f64 = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
        let want = cov / (vx.sqrt() * vy.sqrt());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pearson_affine_invariance_and_sign_flip() {
        let mut rng = rng_from(43);
        let xs: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let ys: Vec<f64> = (0..300).map(|_| rng.random::<f64>() + 0.3).collect();
        let (base, _) = pearson(&xs, &ys);
        let scaled: Vec<f64> = ys.iter().map(|y| 3.7 * y - 11.0).collect();
        let (same, _) = pearson(&xs, &scaled);
        assert!((base - same).abs() < 1e-12);
        let flipped: Vec<f64> = ys.iter().map(|y| -2.0 * y + 5.0).collect();
        let (neg, _) = pearson(&xs, &flipped);
        assert!((base + neg).abs() < 1e-12);
    }

    fn state(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        Tensor::new(
            vec![rows, d],
            (0..rows * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_series_correlate_perfectly() {
        let pairs: Vec<(Vec<Tensor>, Vec<Tensor>)> = (0..4)
            .map(|i| {
                let a = state(5, 3, 100 + i);
                let b = state(6, 3, 200 + i);
                (vec![a.clone(), b.clone()], vec![a, b])
            })
            .collect();
        let p = profile_from_pairs(&pairs).unwrap();
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.n_points, 4 * 5);
        for l in &p.layers {
            assert!((l.r_mean - 1.0).abs() < 1e-12);
            assert!(l.components.iter().all(|r| r.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn independent_noise_correlates_near_zero() {
        let pairs = vec![(vec![state(10_000, 2, 1)], vec![state(10_000, 2, 2)])];
        let p = profile_from_pairs(&pairs).unwrap();
        for r in &p.layers[0].components {
            assert!(r.abs() < 0.1, "r = {r}");
        }
    }

    #[test]
    fn zero_variance_component_is_flagged_and_excluded_from_extrema() {
        let varying = state(50, 2, 9);
        let mut flat = varying.clone();
        for r in 0..50 {
            flat.data_mut()[r * 2] = 1.25;
        }
        let pairs = vec![(vec![flat], vec![varying])];
        let p = profile_from_pairs(&pairs).unwrap();
        let l = &p.layers[0];
        assert!(l.degenerate[0] && !l.degenerate[1]);
        assert_eq!(l.components[0], 0.0);
        let (min, max) = audit_extrema(l);
        assert_eq!(min, max);
        assert_eq!(min, l.components[1]);
        // The mean still divides by the full component count.
        assert!((l.r_mean - l.components[1] / 2.0).abs() < 1e-12);
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            n_speech_lower_layers: 1,
            n_shared_encoder_layers: 1,
            n_decoder_layers: 2,
            src_vocab: 12,
            tgt_vocab: 16,
            speech_feature_dim: 6,
            dropout: 0.0,
            max_positions: 64,
        }
    }

    fn tiny_dev(n: usize) -> Dataset {
        generate_corpus(&CorpusSpec {
            src_vocab: 12,
            tgt_vocab: 16,
            len_min: 2,
            len_max: 4,
            r_min: 2,
            r_max: 2,
            sigma_noise: 0.05,
            d_s: 6,
            n_train: n,
            n_dev: 0,
            n_test: 0,
            n_text_only: 0,
            seed: 23,
        })
        .unwrap()
        .train
    }

    #[test]
    fn correlation_layer_count_tracks_decoder_depth() {
        let model = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::JtProposed), 3).unwrap();
        let dev = tiny_dev(5);
        let p = modality_correlation(&model, &dev).unwrap();
        assert_eq!(p.layers.len(), 2);
        let expected: usize = dev.samples.iter().map(|s| s.tgt.len() + 1).sum();
        assert_eq!(p.n_points, expected);
        let st = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::St), 3).unwrap();
        assert!(modality_correlation(&st, &dev).is_err());
    }

    #[test]
    fn sweep_at_ratio_zero_reuses_the_baseline_exactly() {
        let model = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::Jt), 17).unwrap();
        let trained = model.to_checkpoint(10, 1);
        let noised = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::Jt), 99).unwrap().to_checkpoint(0, 0);
        let dev = tiny_dev(4);
        let curves = criticality_sweep(
            &tiny_cfg(),
            ModelKind::Joint(Scheme::Jt),
            &trained,
            &[(String::new(), &noised)],
            &[ModuleSelector::new("decoder.0.")],
            &[0.0],
            &dev,
            2,
        )
        .unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].points.len(), 1);
        assert_eq!(curves[0].points[0].delta, 0.0);
        assert!((0.0..=100.0).contains(&curves[0].points[0].bleu));
    }

    #[test]
    fn rollback_to_identical_source_gives_a_flat_zero_curve() {
        let model = Model::new(tiny_cfg(), ModelKind::Joint(Scheme::Jt), 29).unwrap();
        let trained = model.to_checkpoint(10, 1);
        let dev = tiny_dev(4);
        let curves = criticality_sweep(
            &tiny_cfg(),
            ModelKind::Joint(Scheme::Jt),
            &trained,
            &[(String::new(), &trained)],
            &[ModuleSelector::new("decoder.1."), ModuleSelector::new("decoder.0.")],
            &DEFAULT_RATIOS,
            &dev,
            2,
        )
        .unwrap();
        for c in &curves {
            for p in &c.points {
                assert_eq!(p.delta, 0.0, "selector {} ratio {}", c.selector, p.ratio);
            }
        }
    }

    #[test]
    fn reports_are_deterministic_and_reject_empty_input() {
        let curves = vec![CriticalityCurve {
            selector: "decoder.0.".into(),
            points: vec![
                CriticalityPoint { ratio: 0.0, bleu: 40.0, delta: 0.0 },
                CriticalityPoint { ratio: 0.5, bleu: 35.5, delta: -4.5 },
                CriticalityPoint { ratio: 1.0, bleu: 20.25, delta: -19.75 },
            ],
        }];
        let dir = std::env::temp_dir().join(format!("bimodal-analysis-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        emit_criticality_report(&curves, &dir.join("a")).unwrap();
        emit_criticality_report(&curves, &dir.join("b")).unwrap();
        let csv_a = fs::read(dir.join("a/criticality.csv")).unwrap();
        let csv_b = fs::read(dir.join("b/criticality.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(
            fs::read(dir.join("a/criticality.svg")).unwrap(),
            fs::read(dir.join("b/criticality.svg")).unwrap()
        );
        let text = String::from_utf8(csv_a).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("selector,ratio,bleu,bleu_delta\n"));
        assert!(emit_criticality_report(&[], &dir.join("c")).is_err());

        let profile = CorrelationProfile {
            layers: vec![LayerCorrelation {
                layer: 0,
                r_mean: 0.5,
                components: vec![0.4, 0.6],
                degenerate: vec![false, false],
            }],
            n_points: 12,
        };
        emit_correlation_report(&profile, &dir.join("p1")).unwrap();
        emit_correlation_report(&profile, &dir.join("p2")).unwrap();
        assert_eq!(
            fs::read(dir.join("p1/correlation.csv")).unwrap(),
            fs::read(dir.join("p2/correlation.csv")).unwrap()
        );
        let empty = CorrelationProfile { layers: vec![], n_points: 0 };
        assert!(emit_correlation_report(&empty, &dir.join("p3")).is_err());
    }
}
