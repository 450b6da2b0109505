//! Backward pass over a cached forward. One routine serves both consumers:
//! the trainer wants parameter gradients, the editor wants the gradient with
//! respect to an intervention delta plus arbitrary gradient injections into
//! post-block residual states (that is how the alignment loss reaches the
//! delta without touching the logits).

use ndarray::{s, Array1, Array2};

use super::forward::{gelu_grad, FwdCache};
use super::{InterventionMode, ModelCheckpoint, Weights};
use crate::error::{Error, Result};

/// Gradient container; mirrors [`Weights`] tensor for tensor.
pub type ParamGrads = Weights;

/// Gradient to inject into a post-block residual state h^layer.
#[derive(Debug, Clone)]
pub struct ResidInjection {
    pub item: usize,
    /// 1-based block index.
    pub layer: usize,
    pub position: usize,
    pub grad: Array1<f64>,
}

pub struct BackwardRequest<'a> {
    pub d_logits: &'a Array2<f64>,
    pub resid_injections: &'a [ResidInjection],
    pub want_params: bool,
    pub want_deltas: bool,
}

pub struct Gradients {
    pub params: Option<ParamGrads>,
    /// Per batch item, present where the forward had an intervention.
    pub deltas: Vec<Option<Array1<f64>>>,
}

fn layernorm_backward(
    x: &Array2<f64>,
    mean: &Array1<f64>,
    rstd: &Array1<f64>,
    gamma: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let df = d as f64;
    let mut dx = Array2::<f64>::zeros((n, d));
    let mut dgamma = Array1::<f64>::zeros(d);
    let mut dbeta = Array1::<f64>::zeros(d);
    for i in 0..n {
        let xr = x.row(i);
        let dyr = dy.row(i);
        let r = rstd[i];
        let mu = mean[i];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let xhat = (xr[j] - mu) * r;
            let dxhat = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= df;
        m2 /= df;
        let mut dxr = dx.row_mut(i);
        for j in 0..d {
            let xhat = (xr[j] - mu) * r;
            let dxhat = dyr[j] * gamma[j];
            dxr[j] = r * (dxhat - m1 - xhat * m2);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn backward_batch(
    ckpt: &ModelCheckpoint,
    cache: &FwdCache,
    req: &BackwardRequest,
) -> Result<Gradients> {
    let cfg = &ckpt.config;
    let w: &Weights = &ckpt.weights;
    let b = cache.batch;
    let t = cache.seq;
    let n = b * t;
    let d = cfg.width;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    if req.d_logits.shape() != cache.logits.shape() {
        return Err(Error::Model(format!(
            "d_logits shape {:?} does not match logits {:?}",
            req.d_logits.shape(),
            cache.logits.shape()
        )));
    }
    for inj in req.resid_injections {
        if inj.item >= b || inj.position >= t || inj.layer == 0 || inj.layer > cfg.layers {
            return Err(Error::Model(format!(
                "injection out of range (item {}, layer {}, position {})",
                inj.item, inj.layer, inj.position
            )));
        }
        if inj.grad.len() != d {
            return Err(Error::Model("injection gradient width mismatch".into()));
        }
    }

    let mut grads = req.want_params.then(|| Weights::zeros(cfg));
    let mut deltas: Vec<Option<Array1<f64>>> = vec![None; b];

    // head
    let d_lnf_out = req.d_logits.dot(&w.w_un);
    if let Some(g) = grads.as_mut() {
        g.w_un += &req.d_logits.t().dot(&cache.lnf_out);
    }
    let last_resid = &cache.layers[cfg.layers - 1].resid_post;
    let (mut d_resid, dg, db) = layernorm_backward(
        last_resid,
        &cache.lnf_mean,
        &cache.lnf_rstd,
        &w.lnf_g,
        &d_lnf_out,
    );
    if let Some(g) = grads.as_mut() {
        g.lnf_g += &dg;
        g.lnf_b += &db;
    }

    for li in (0..cfg.layers).rev() {
        let lc = &cache.layers[li];
        let blk = &w.blocks[li];

        // gradient injections into h^(li+1)
        for inj in req.resid_injections.iter().filter(|i| i.layer == li + 1) {
            let mut row = d_resid.row_mut(inj.item * t + inj.position);
            row += &inj.grad;
        }

        // MLP branch: resid_post = resid_mid + mlp_used
        let mut d_mlp_out = d_resid.clone();
        for (bi, slot) in cache.interventions.iter().enumerate() {
            if let Some(iv) = slot {
                if iv.layer == li + 1 {
                    let r = bi * t + iv.position;
                    if req.want_deltas {
                        deltas[bi] = Some(d_resid.row(r).to_owned());
                    }
                    if iv.mode == InterventionMode::Replace {
                        d_mlp_out.row_mut(r).fill(0.0);
                    }
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            g.blocks[li].w_proj += &d_mlp_out.t().dot(&lc.mlp_act);
        }
        let d_mlp_act = d_mlp_out.dot(&blk.w_proj);
        let mut d_mlp_pre = d_mlp_act;
        d_mlp_pre.zip_mut_with(&lc.mlp_pre, |dg_, &pre| *dg_ *= gelu_grad(pre));
        if let Some(g) = grads.as_mut() {
            g.blocks[li].w_fc += &d_mlp_pre.t().dot(&lc.ln2_out);
            g.blocks[li].b_fc += &d_mlp_pre.sum_axis(ndarray::Axis(0));
        }
        let d_ln2_out = d_mlp_pre.dot(&blk.w_fc);
        let (d_from_ln2, dg2, db2) = layernorm_backward(
            &lc.resid_mid,
            &lc.ln2_mean,
            &lc.ln2_rstd,
            &blk.ln2_g,
            &d_ln2_out,
        );
        if let Some(g) = grads.as_mut() {
            g.blocks[li].ln2_g += &dg2;
            g.blocks[li].ln2_b += &db2;
        }
        let d_resid_mid = &d_resid + &d_from_ln2;

        // attention branch: resid_mid = x_prev + attn_mix @ w_o^T
        if let Some(g) = grads.as_mut() {
            g.blocks[li].w_o += &d_resid_mid.t().dot(&lc.attn_mix);
        }
        let d_attn_mix = d_resid_mid.dot(&blk.w_o);
        let mut d_q = Array2::<f64>::zeros((n, d));
        let mut d_k = Array2::<f64>::zeros((n, d));
        let mut d_v = Array2::<f64>::zeros((n, d));
        for bi in 0..b {
            for h in 0..heads {
                let rows = s![bi * t..(bi + 1) * t, h * hd..(h + 1) * hd];
                let p = lc.attn_p.slice(s![bi * heads + h, .., ..]);
                let d_mix = d_attn_mix.slice(rows);
                let qs = lc.q.slice(rows);
                let ks = lc.k.slice(rows);
                let vs = lc.v.slice(rows);

                let d_p = d_mix.dot(&vs.t());
                d_v.slice_mut(rows).assign(&p.t().dot(&d_mix));

                let mut d_s = Array2::<f64>::zeros((t, t));
                for i in 0..t {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += p[[i, j]] * d_p[[i, j]];
                    }
                    for j in 0..=i {
                        d_s[[i, j]] = p[[i, j]] * (d_p[[i, j]] - dot);
                    }
                }
                let mut dq = d_s.dot(&ks);
                dq.mapv_inplace(|v| v * scale);
                d_q.slice_mut(rows).assign(&dq);
                let mut dk = d_s.t().dot(&qs);
                dk.mapv_inplace(|v| v * scale);
                d_k.slice_mut(rows).assign(&dk);
            }
        }
        if let Some(g) = grads.as_mut() {
            g.blocks[li].w_q += &d_q.t().dot(&lc.ln1_out);
            g.blocks[li].w_k += &d_k.t().dot(&lc.ln1_out);
            g.blocks[li].w_v += &d_v.t().dot(&lc.ln1_out);
        }
        let d_ln1_out = d_q.dot(&blk.w_q) + d_k.dot(&blk.w_k) + d_v.dot(&blk.w_v);
        let x_prev = if li == 0 {
            &cache.x0
        } else {
            &cache.layers[li - 1].resid_post
        };
        let (d_from_ln1, dg1, db1) = layernorm_backward(
            x_prev,
            &lc.ln1_mean,
            &lc.ln1_rstd,
            &blk.ln1_g,
            &d_ln1_out,
        );
        if let Some(g) = grads.as_mut() {
            g.blocks[li].ln1_g += &dg1;
            g.blocks[li].ln1_b += &db1;
        }
        d_resid = d_resid_mid + d_from_ln1;
    }

    if let Some(g) = grads.as_mut() {
        for (r, &tok) in cache.tokens.iter().enumerate() {
            let src = d_resid.row(r);
            let mut trow = g.tok_embed.row_mut(tok as usize);
            trow += &src;
            if ckpt.config.learned_positions {
                let mut prow = g.pos_embed.row_mut(r % t);
                prow += &src;
            }
        }
    }

    Ok(Gradients {
        params: grads,
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward_batch, log_softmax};
    use crate::model::{Intervention, ModelConfig, TrainMeta, Tokenizer};
    use ndarray::Array1;
    use rand::Rng;

    fn tiny_ckpt(seed: u64) -> ModelCheckpoint {
        let cfg = ModelConfig {
            layers: 6,
            width: 8,
            heads: 2,
            mlp_width: 16,
            context: 12,
            vocab: 11,
            local_layers: 0,
            local_window: 0,
            learned_positions: true,
        };
        let weights = Weights::init(&cfg, seed).unwrap();
        let vocab: Vec<String> = (0..11).map(|i| format!("w{}", i)).collect();
        ModelCheckpoint::new(
            cfg,
            Tokenizer::from_vocab(vocab).unwrap(),
            weights,
            TrainMeta::default(),
        )
    }

    /// Mean next-token cross entropy over a fixed two-sequence batch and its
    /// analytic d_logits.
    fn ce_loss_and_grad(
        ckpt: &ModelCheckpoint,
        seqs: &[&[u32]],
    ) -> (f64, ndarray::Array2<f64>) {
        let cache = forward_batch(ckpt, seqs, &[]).unwrap();
        let t = cache.seq;
        let n = cache.logits.nrows();
        let v = cache.logits.ncols();
        let mut d_logits = ndarray::Array2::<f64>::zeros((n, v));
        let mut loss = 0.0;
        let mut count = 0.0;
        for (bi, seq) in seqs.iter().enumerate() {
            for p in 0..t - 1 {
                let r = bi * t + p;
                let target = seq[p + 1] as usize;
                let ls = log_softmax(cache.logits.row(r));
                loss -= ls[target];
                count += 1.0;
                let probs = ls.mapv(f64::exp);
                for j in 0..v {
                    d_logits[[r, j]] = probs[j];
                }
                d_logits[[r, target]] -= 1.0;
            }
        }
        loss /= count;
        d_logits.mapv_inplace(|x| x / count);
        (loss, d_logits)
    }

    fn perturbed_loss(ckpt: &ModelCheckpoint, seqs: &[&[u32]], tweak: impl Fn(&mut Weights)) -> f64 {
        let mut w = (*ckpt.weights).clone();
        tweak(&mut w);
        let ck = ModelCheckpoint::new(
            ckpt.config.clone(),
            (*ckpt.tokenizer).clone(),
            w,
            TrainMeta::default(),
        );
        ce_loss_and_grad(&ck, seqs).0
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let ckpt = tiny_ckpt(21);
        let s1: &[u32] = &[1, 2, 3, 4];
        let s2: &[u32] = &[5, 6, 7, 1];
        let seqs = [s1, s2];
        let (_, d_logits) = ce_loss_and_grad(&ckpt, &seqs);
        let cache = forward_batch(&ckpt, &seqs, &[]).unwrap();
        let grads = backward_batch(
            &ckpt,
            &cache,
            &BackwardRequest {
                d_logits: &d_logits,
                resid_injections: &[],
                want_params: true,
                want_deltas: false,
            },
        )
        .unwrap();
        let g = grads.params.unwrap();
        let h = 1e-6;

        // one probe per tensor family, spread across layers
        let probes: Vec<(&str, f64, Box<dyn Fn(&mut Weights, f64)>)> = vec![
            (
                "tok_embed",
                g.tok_embed[[2, 3]],
                Box::new(|w: &mut Weights, e| w.tok_embed[[2, 3]] += e),
            ),
            (
                "pos_embed",
                g.pos_embed[[1, 5]],
                Box::new(|w: &mut Weights, e| w.pos_embed[[1, 5]] += e),
            ),
            (
                "w_q.l0",
                g.blocks[0].w_q[[3, 4]],
                Box::new(|w: &mut Weights, e| w.blocks[0].w_q[[3, 4]] += e),
            ),
            (
                "w_k.l2",
                g.blocks[2].w_k[[1, 6]],
                Box::new(|w: &mut Weights, e| w.blocks[2].w_k[[1, 6]] += e),
            ),
            (
                "w_v.l3",
                g.blocks[3].w_v[[0, 2]],
                Box::new(|w: &mut Weights, e| w.blocks[3].w_v[[0, 2]] += e),
            ),
            (
                "w_o.l1",
                g.blocks[1].w_o[[5, 5]],
                Box::new(|w: &mut Weights, e| w.blocks[1].w_o[[5, 5]] += e),
            ),
            (
                "w_fc.l4",
                g.blocks[4].w_fc[[9, 3]],
                Box::new(|w: &mut Weights, e| w.blocks[4].w_fc[[9, 3]] += e),
            ),
            (
                "b_fc.l4",
                g.blocks[4].b_fc[7],
                Box::new(|w: &mut Weights, e| w.blocks[4].b_fc[7] += e),
            ),
            (
                "w_proj.l5",
                g.blocks[5].w_proj[[2, 11]],
                Box::new(|w: &mut Weights, e| w.blocks[5].w_proj[[2, 11]] += e),
            ),
            (
                "ln1_g.l0",
                g.blocks[0].ln1_g[4],
                Box::new(|w: &mut Weights, e| w.blocks[0].ln1_g[4] += e),
            ),
            (
                "ln2_b.l5",
                g.blocks[5].ln2_b[1],
                Box::new(|w: &mut Weights, e| w.blocks[5].ln2_b[1] += e),
            ),
            (
                "lnf_g",
                g.lnf_g[6],
                Box::new(|w: &mut Weights, e| w.lnf_g[6] += e),
            ),
            (
                "w_un",
                g.w_un[[8, 0]],
                Box::new(|w: &mut Weights, e| w.w_un[[8, 0]] += e),
            ),
        ];
        for (name, analytic, tweak) in probes {
            let up = perturbed_loss(&ckpt, &seqs, |w| tweak(w, h));
            let dn = perturbed_loss(&ckpt, &seqs, |w| tweak(w, -h));
            let fd = (up - dn) / (2.0 * h);
            // the 1e-3 floor keeps finite-difference rounding noise from
            // dominating near-zero gradients
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-5,
                "{}: analytic {} vs fd {}",
                name,
                analytic,
                fd
            );
        }
    }

    #[test]
    fn windowed_attention_grads_match_finite_differences() {
        let mut ckpt = tiny_ckpt(25);
        ckpt.config.local_layers = 5;
        ckpt.config.local_window = 2;
        let s1: &[u32] = &[1, 2, 3, 4, 5, 6];
        let s2: &[u32] = &[5, 6, 7, 1, 2, 3];
        let seqs = [s1, s2];
        let (_, d_logits) = ce_loss_and_grad(&ckpt, &seqs);
        let cache = forward_batch(&ckpt, &seqs, &[]).unwrap();
        let grads = backward_batch(
            &ckpt,
            &cache,
            &BackwardRequest {
                d_logits: &d_logits,
                resid_injections: &[],
                want_params: true,
                want_deltas: false,
            },
        )
        .unwrap();
        let g = grads.params.unwrap();
        let h = 1e-6;
        let probes: Vec<(&str, f64, Box<dyn Fn(&mut Weights, f64)>)> = vec![
            (
                "w_k in a windowed layer",
                g.blocks[1].w_k[[1, 6]],
                Box::new(|w: &mut Weights, e| w.blocks[1].w_k[[1, 6]] += e),
            ),
            (
                "w_q in a windowed layer",
                g.blocks[3].w_q[[2, 4]],
                Box::new(|w: &mut Weights, e| w.blocks[3].w_q[[2, 4]] += e),
            ),
            (
                "w_v in the global layer",
                g.blocks[5].w_v[[0, 3]],
                Box::new(|w: &mut Weights, e| w.blocks[5].w_v[[0, 3]] += e),
            ),
            (
                "tok_embed",
                g.tok_embed[[2, 3]],
                Box::new(|w: &mut Weights, e| w.tok_embed[[2, 3]] += e),
            ),
        ];
        for (name, analytic, tweak) in probes {
            let up = perturbed_loss(&ckpt, &seqs, |w| tweak(w, h));
            let dn = perturbed_loss(&ckpt, &seqs, |w| tweak(w, -h));
            let fd = (up - dn) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-5,
                "{}: analytic {} vs fd {}",
                name,
                analytic,
                fd
            );
        }
    }

    #[test]
    fn delta_grad_matches_finite_differences() {
        let ckpt = tiny_ckpt(22);
        let toks: &[u32] = &[1, 2, 3, 4, 5];
        let mut rng = crate::seeds::rng(5, 0x77);
        let delta = Array1::from_shape_fn(8, |_| rng.gen_range(-0.5..0.5));
        let iv = |d: Array1<f64>| Intervention {
            layer: 2,
            position: 2,
            mode: crate::model::InterventionMode::Replace,
            delta: d,
        };

        // loss: nll of one target at the final position
        let target = 7usize;
        let loss_of = |d: &Array1<f64>| -> f64 {
            let cache = forward_batch(&ckpt, &[toks], &[Some(iv(d.clone()))]).unwrap();
            let ls = log_softmax(cache.logits.row(toks.len() - 1));
            -ls[target]
        };

        let cache = forward_batch(&ckpt, &[toks], &[Some(iv(delta.clone()))]).unwrap();
        let mut d_logits = ndarray::Array2::<f64>::zeros(cache.logits.raw_dim());
        let r = toks.len() - 1;
        let probs = log_softmax(cache.logits.row(r)).mapv(f64::exp);
        for j in 0..probs.len() {
            d_logits[[r, j]] = probs[j];
        }
        d_logits[[r, target]] -= 1.0;
        let grads = backward_batch(
            &ckpt,
            &cache,
            &BackwardRequest {
                d_logits: &d_logits,
                resid_injections: &[],
                want_params: false,
                want_deltas: true,
            },
        )
        .unwrap();
        let analytic = grads.deltas[0].clone().unwrap();

        let h = 1e-6;
        for i in 0..8 {
            let mut up = delta.clone();
            up[i] += h;
            let mut dn = delta.clone();
            dn[i] -= h;
            let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "component {}: analytic {} vs fd {}",
                i,
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn injection_grad_reaches_delta() {
        // loss = c . h^4[last] as a pure residual functional; its gradient
        // w.r.t. delta must match finite differences through the trace.
        let ckpt = tiny_ckpt(23);
        let toks: &[u32] = &[2, 3, 4, 5];
        let mut rng = crate::seeds::rng(9, 0x78);
        let c = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let delta = Array1::from_shape_fn(8, |_| rng.gen_range(-0.5..0.5));
        let iv = |d: Array1<f64>| Intervention {
            layer: 2,
            position: 1,
            mode: crate::model::InterventionMode::Replace,
            delta: d,
        };
        let loss_of = |d: &Array1<f64>| -> f64 {
            let cache = forward_batch(&ckpt, &[toks], &[Some(iv(d.clone()))]).unwrap();
            cache.resid_post(0, 4).row(toks.len() - 1).dot(&c)
        };

        let cache = forward_batch(&ckpt, &[toks], &[Some(iv(delta.clone()))]).unwrap();
        let d_logits = ndarray::Array2::<f64>::zeros(cache.logits.raw_dim());
        let inj = ResidInjection {
            item: 0,
            layer: 4,
            position: toks.len() - 1,
            grad: c.clone(),
        };
        let grads = backward_batch(
            &ckpt,
            &cache,
            &BackwardRequest {
                d_logits: &d_logits,
                resid_injections: &[inj],
                want_params: false,
                want_deltas: true,
            },
        )
        .unwrap();
        let analytic = grads.deltas[0].clone().unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut up = delta.clone();
            up[i] += h;
            let mut dn = delta.clone();
            dn[i] -= h;
            let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "component {}: analytic {} vs fd {}",
                i,
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn backward_validates_shapes() {
        let ckpt = tiny_ckpt(24);
        let toks: &[u32] = &[1, 2, 3];
        let cache = forward_batch(&ckpt, &[toks], &[]).unwrap();
        let bad = ndarray::Array2::<f64>::zeros((2, 11));
        assert!(backward_batch(
            &ckpt,
            &cache,
            &BackwardRequest {
                d_logits: &bad,
                resid_injections: &[],
                want_params: false,
                want_deltas: false,
            },
        )
        .is_err());
        let d_logits = ndarray::Array2::<f64>::zeros(cache.logits.raw_dim());
        let bad_inj = ResidInjection {
            item: 0,
            layer: 9,
            position: 0,
            grad: Array1::zeros(8),
        };
        assert!(backward_batch(
            &ckpt,
            &cache,
            &BackwardRequest {
                d_logits: &d_logits,
                resid_injections: &[bad_inj],
                want_params: false,
                want_deltas: false,
            },
        )
        .is_err());
    }
}
