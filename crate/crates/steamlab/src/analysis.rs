//! Interpretability toolkit: project intermediate hidden states through the
//! model head (logit lens), track a target token's probability across layers,
//! score residual streams against semantic anchors, and export PCA
//! projections and aggregated lens curves as CSV.

use ndarray::{Array1, Array2, ArrayView1};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::model::{log_softmax, ModelCheckpoint, ResidualTrace, LN_EPS};

/// Read an approximate token distribution from a hidden state by applying
/// the final layer norm and the unembedding.
pub fn logit_lens(ckpt: &ModelCheckpoint, h: ArrayView1<f64>) -> Result<Array1<f64>> {
    logit_lens_with(ckpt, h, true)
}

/// Lens with the final layer norm optional; bypassing it unembeds raw states.
pub fn logit_lens_with(
    ckpt: &ModelCheckpoint,
    h: ArrayView1<f64>,
    apply_final_norm: bool,
) -> Result<Array1<f64>> {
    if h.len() != ckpt.config.width {
        return Err(Error::Analysis(format!(
            "hidden state has {} entries, model width is {}",
            h.len(),
            ckpt.config.width
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Analysis("hidden state contains non-finite values".into()));
    }
    let w = &ckpt.weights;
    let normed = if apply_final_norm {
        let mean = h.sum() / h.len() as f64;
        let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h.len() as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let mut out = Array1::<f64>::zeros(h.len());
        for j in 0..h.len() {
            out[j] = (h[j] - mean) * rstd * w.lnf_g[j] + w.lnf_b[j];
        }
        out
    } else {
        h.to_owned()
    };
    let logits = w.w_un.dot(&normed);
    Ok(log_softmax(logits.view()).mapv(f64::exp))
}

/// The target token's lens probability at every layer of a trace, read at the
/// final position.
pub fn layerwise_target_prob(
    ckpt: &ModelCheckpoint,
    trace: &ResidualTrace,
    target: u32,
) -> Result<Vec<f64>> {
    if target as usize >= ckpt.config.vocab {
        return Err(Error::Analysis(format!(
            "token id {} outside the vocabulary of {}",
            target, ckpt.config.vocab
        )));
    }
    let states = trace.final_states();
    let mut out = Vec::with_capacity(states.nrows());
    for row in states.rows() {
        let dist = logit_lens(ckpt, row)?;
        out.push(dist[target as usize]);
    }
    Ok(out)
}

/// Per-layer cosine similarity between a trace's final-position states and an
/// anchor set.
pub fn cosine_profile(trace: &ResidualTrace, anchors: &AnchorSet) -> Result<Vec<f64>> {
    let states = trace.final_states();
    if states.nrows() != anchors.phi.nrows() || states.ncols() != anchors.phi.ncols() {
        return Err(Error::Analysis(format!(
            "trace is {}x{}, anchors are {}x{}",
            states.nrows(),
            states.ncols(),
            anchors.phi.nrows(),
            anchors.phi.ncols()
        )));
    }
    let mut out = Vec::with_capacity(states.nrows());
    for (li, (h, phi)) in states.rows().into_iter().zip(anchors.phi.rows()).enumerate() {
        let hn = h.dot(&h).sqrt();
        let pn = phi.dot(&phi).sqrt();
        if hn < 1e-12 || pn < 1e-12 {
            return Err(Error::Analysis(format!(
                "cosine undefined at layer {}: zero-norm {}",
                li + 1,
                if hn < 1e-12 { "trace state" } else { "anchor" }
            )));
        }
        out.push(h.dot(&phi) / (hn * pn));
    }
    Ok(out)
}

/// Principal-component projection of pooled residual streams.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// One (layers, dims) coordinate matrix per input trace.
    pub coords: Vec<Array2<f64>>,
    /// Fraction of total variance carried by each kept component.
    pub variance_ratios: Vec<f64>,
    /// The principal axes, one column per kept component.
    pub components: Array2<f64>,
}

/// Fit PCA on the pooled final-position layer vectors of all traces and
/// project every trace into the shared basis.
pub fn pca_project(traces: &[ResidualTrace], dims: usize) -> Result<PcaProjection> {
    if !(2..=3).contains(&dims) {
        return Err(Error::Analysis(format!("projection dims must be 2 or 3, got {}", dims)));
    }
    let per_trace: Vec<Array2<f64>> = traces.iter().map(|t| t.final_states()).collect();
    let total: usize = per_trace.iter().map(|m| m.nrows()).sum();
    if total < dims + 1 {
        return Err(Error::Analysis(format!(
            "need at least {} pooled vectors for a {}-dim projection, got {}",
            dims + 1,
            dims,
            total
        )));
    }
    let d = per_trace[0].ncols();
    if per_trace.iter().any(|m| m.ncols() != d) {
        return Err(Error::Analysis("traces disagree on hidden width".into()));
    }
    let mut pooled = Array2::<f64>::zeros((total, d));
    let mut row = 0;
    for m in &per_trace {
        for r in m.rows() {
            pooled.row_mut(row).assign(&r);
            row += 1;
        }
    }
    let mean = pooled.mean_axis(ndarray::Axis(0)).expect("nonempty pool");
    for mut r in pooled.rows_mut() {
        r -= &mean;
    }
    let cov = pooled.t().dot(&pooled) / (total - 1) as f64;
    let (vals, vecs) = sym_eigen(&cov)?;
    let total_var: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    if total_var < 1e-18 {
        return Err(Error::Analysis(
            "pooled vectors carry zero variance; nothing to project".into(),
        ));
    }
    if vals[dims - 1] <= 1e-12 * total_var {
        return Err(Error::Analysis(format!(
            "pooled matrix has rank below {}; component {} carries no variance",
            dims, dims
        )));
    }
    let mut components = Array2::<f64>::zeros((d, dims));
    for c in 0..dims {
        let mut axis = vecs.column(c).to_owned();
        // orient each axis so its largest-magnitude loading is positive
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite loadings"))
            .map(|(i, _)| i)
            .expect("nonempty axis");
        if axis[lead] < 0.0 {
            axis.mapv_inplace(|v| -v);
        }
        components.column_mut(c).assign(&axis);
    }
    let variance_ratios: Vec<f64> = (0..dims).map(|c| vals[c].max(0.0) / total_var).collect();
    let coords = per_trace
        .iter()
        .map(|m| {
            let mut centered = m.clone();
            for mut r in centered.rows_mut() {
                r -= &mean;
            }
            centered.dot(&components)
        })
        .collect();
    Ok(PcaProjection {
        coords,
        variance_ratios,
        components,
    })
}

/// Which population a trace belongs to in exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Edited,
    Reference,
}

impl TraceKind {
    pub fn label(self) -> &'static str {
        match self {
            TraceKind::Edited => "edited",
            TraceKind::Reference => "reference",
        }
    }
}

/// CSV of projected coordinates, one row per (trace, layer).
pub fn projection_csv(proj: &PcaProjection, ids: &[u32], kinds: &[TraceKind]) -> Result<String> {
    if proj.coords.len() != ids.len() || proj.coords.len() != kinds.len() {
        return Err(Error::Analysis(format!(
            "{} coordinate sets, {} ids, {} kinds",
            proj.coords.len(),
            ids.len(),
            kinds.len()
        )));
    }
    let dims = proj.components.ncols();
    let mut out = String::from("trace_id,kind,layer");
    for c in 1..=dims {
        out.push_str(&format!(",c{}", c));
    }
    out.push('\n');
    for ((coords, id), kind) in proj.coords.iter().zip(ids).zip(kinds) {
        for (li, row) in coords.rows().into_iter().enumerate() {
            out.push_str(&format!("{},{},{}", id, kind.label(), li + 1));
            for v in row.iter() {
                out.push_str(&format!(",{:.6}", v));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Paired per-layer probability curves for one edit: the edited model tracked
/// on the new object versus the unedited model on the old one.
pub fn lens_curve_pair(
    edited: &ModelCheckpoint,
    base: &ModelCheckpoint,
    prompt: &str,
    new_object: &str,
    old_object: &str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let edited_curve = prompt_target_curve(edited, prompt, new_object)?;
    let reference_curve = prompt_target_curve(base, prompt, old_object)?;
    Ok((edited_curve, reference_curve))
}

/// Lens curve for one prompt and the first token of one object surface.
pub fn prompt_target_curve(
    ckpt: &ModelCheckpoint,
    prompt: &str,
    object: &str,
) -> Result<Vec<f64>> {
    let tokens = ckpt.tokenizer.encode(prompt)?;
    let target = *ckpt
        .tokenizer
        .encode(object)?
        .first()
        .ok_or_else(|| Error::Analysis(format!("object '{}' encodes to nothing", object)))?;
    let trace = crate::model::capture_residual_stream(ckpt, &tokens, None, false)?;
    layerwise_target_prob(ckpt, &trace, target)
}

/// One aggregated lens-curve row.
#[derive(Debug, Clone, PartialEq)]
pub struct LensRow {
    pub layer: usize,
    pub prob_edited_mean: f64,
    pub prob_reference_mean: f64,
    pub std_edited: f64,
    pub std_reference: f64,
}

/// Mean and standard deviation per layer over a set of curve pairs.
pub fn aggregate_lens_curves(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<LensRow>> {
    let layers = pairs
        .first()
        .ok_or_else(|| Error::Analysis("no curves to aggregate".into()))?
        .0
        .len();
    for (e, r) in pairs {
        if e.len() != layers || r.len() != layers {
            return Err(Error::Analysis("curves disagree on layer count".into()));
        }
    }
    let n = pairs.len() as f64;
    let mut rows = Vec::with_capacity(layers);
    for li in 0..layers {
        let (mut me, mut mr) = (0.0, 0.0);
        for (e, r) in pairs {
            me += e[li];
            mr += r[li];
        }
        me /= n;
        mr /= n;
        let (mut ve, mut vr) = (0.0, 0.0);
        for (e, r) in pairs {
            ve += (e[li] - me) * (e[li] - me);
            vr += (r[li] - mr) * (r[li] - mr);
        }
        rows.push(LensRow {
            layer: li + 1,
            prob_edited_mean: me,
            prob_reference_mean: mr,
            std_edited: (ve / n).sqrt(),
            std_reference: (vr / n).sqrt(),
        });
    }
    Ok(rows)
}

/// CSV of aggregated lens curves, one row per layer.
pub fn lens_csv(rows: &[LensRow]) -> String {
    let mut out = String::from(
        "layer,prob_edited_mean,prob_reference_mean,std_edited,std_reference\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.layer, r.prob_edited_mean, r.prob_reference_mean, r.std_edited, r.std_reference
        ));
    }
    out
}

/// CSV of per-layer cosine profiles, one row per (trace, layer).
pub fn cosine_csv(profiles: &[(u32, TraceKind, Vec<f64>)]) -> String {
    let mut out = String::from("trace_id,kind,layer,cosine\n");
    for (id, kind, profile) in profiles {
        for (li, c) in profile.iter().enumerate() {
            out.push_str(&format!("{},{},{},{:.6}\n", id, kind.label(), li + 1, c));
        }
    }
    out
}
