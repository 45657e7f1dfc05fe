//! Forward, backward, and masked cross-entropy for the decoder.
//!
//! Batch items are processed independently, so logits at position t depend
//! bit-exactly on tokens at positions <= t only, and padded batches agree
//! with unpadded ones on every real position. The backward pass is written
//! by hand against the cached forward activations; the gradient-check tests
//! hold it to central finite differences at double precision.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub use super::ops::log_softmax_row;
use super::ops::{
    adapter_contribution, gelu, gelu_backward, layer_norm, layer_norm_backward,
    softmax_rows_backward, softmax_rows_inplace, LayerNormCache,
};
use super::{t, AdapterSite, Batch, ModelConfig, ParamSet, Scalar};
use crate::error::{Error, Result};

struct LayerCache<T: Scalar> {
    ln1: LayerNormCache<T>,
    ln1_out: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Per-head attention probabilities, each [seq, seq].
    attn_probs: Vec<Array2<T>>,
    /// Concatenated head outputs before the output projection.
    head_concat: Array2<T>,
    drop_attn: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
    ln2_out: Array2<T>,
    /// Pre-GELU feed-forward activations.
    a1: Array2<T>,
    f: Array2<T>,
    drop_ffn: Option<Array2<T>>,
}

struct ItemCache<T: Scalar> {
    ids: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    final_ln: LayerNormCache<T>,
    hidden: Array2<T>,
}

fn validate_ids(cfg: &ModelConfig, ids: &ArrayView2<u32>) -> Result<()> {
    let (batch, seq) = ids.dim();
    if batch == 0 || seq == 0 {
        return Err(Error::data("forward: empty batch or empty sequence"));
    }
    if seq > cfg.max_len {
        return Err(Error::data(format!(
            "sequence length {seq} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if ids.iter().any(|&id| id as usize >= cfg.vocab_size) {
        return Err(Error::data("token id out of vocabulary range"));
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha20Rng, dim: (usize, usize), p: f64) -> Array2<T> {
    let keep = t::<T>(1.0 / (1.0 - p));
    Array2::from_shape_fn(dim, |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

fn adapter_names(layer: usize, site: AdapterSite) -> (String, String) {
    (
        format!("layers.{layer}.attn.{}.lora_a", site.tag()),
        format!("layers.{layer}.attn.{}.lora_b", site.tag()),
    )
}

fn project_with_adapter<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    layer: usize,
    site: AdapterSite,
    weight: &str,
    z: &Array2<T>,
) -> Array2<T> {
    let mut out = z.dot(&params.mat(weight));
    if cfg.adapters_enabled() && cfg.adapter_targets.contains(&site) {
        let (a, b) = adapter_names(layer, site);
        out = out
            + adapter_contribution(
                &z.view(),
                &params.mat(&a),
                &params.mat(&b),
                cfg.adapter_scale(),
            );
    }
    out
}

/// Run the decoder trunk (embeddings through final norm) for one sequence.
fn run_trunk<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    ids: &[usize],
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> ItemCache<T> {
    let seq = ids.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = t::<T>(1.0 / (dh as f64).sqrt());

    let tok_emb = params.mat("tok_emb");
    let pos_emb = params.mat("pos_emb");
    let mut x = Array2::<T>::zeros((seq, d));
    for (pos, &id) in ids.iter().enumerate() {
        for c in 0..d {
            x[[pos, c]] = tok_emb[[id, c]] + pos_emb[[pos, c]];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        let (ln1_out, ln1) = layer_norm(
            &x.view(),
            &params.vec1(&format!("{p}.ln1.g")),
            &params.vec1(&format!("{p}.ln1.b")),
        );
        let q = project_with_adapter(params, cfg, l, AdapterSite::Q, &format!("{p}.attn.wq"), &ln1_out);
        let k = project_with_adapter(params, cfg, l, AdapterSite::K, &format!("{p}.attn.wk"), &ln1_out);
        let v = project_with_adapter(params, cfg, l, AdapterSite::V, &format!("{p}.attn.wv"), &ln1_out);

        let mut head_concat = Array2::<T>::zeros((seq, d));
        let mut attn_probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * attn_scale;
            for i in 0..seq {
                for j in (i + 1)..seq {
                    scores[[i, j]] = T::neg_infinity();
                }
            }
            softmax_rows_inplace(&mut scores);
            let oh = scores.dot(&vh);
            head_concat.slice_mut(cols).assign(&oh);
            attn_probs.push(scores);
        }

        let mut attn_out =
            project_with_adapter(params, cfg, l, AdapterSite::O, &format!("{p}.attn.wo"), &head_concat);
        let drop_attn = match (&mut dropout_rng, cfg.dropout > 0.0) {
            (Some(rng), true) => {
                let mask = dropout_mask::<T>(rng, (seq, d), cfg.dropout);
                attn_out = attn_out * &mask;
                Some(mask)
            }
            _ => None,
        };
        let x_mid = &x + &attn_out;

        let (ln2_out, ln2) = layer_norm(
            &x_mid.view(),
            &params.vec1(&format!("{p}.ln2.g")),
            &params.vec1(&format!("{p}.ln2.b")),
        );
        let a1 = ln2_out.dot(&params.mat(&format!("{p}.ffn.w1"))) + params.vec1(&format!("{p}.ffn.b1"));
        let f = gelu(&a1);
        let mut ffn_out = f.dot(&params.mat(&format!("{p}.ffn.w2"))) + params.vec1(&format!("{p}.ffn.b2"));
        let drop_ffn = match (&mut dropout_rng, cfg.dropout > 0.0) {
            (Some(rng), true) => {
                let mask = dropout_mask::<T>(rng, (seq, d), cfg.dropout);
                ffn_out = ffn_out * &mask;
                Some(mask)
            }
            _ => None,
        };
        let x_next = &x_mid + &ffn_out;

        layers.push(LayerCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn_probs,
            head_concat,
            drop_attn,
            ln2,
            ln2_out,
            a1,
            f,
            drop_ffn,
        });
        x = x_next;
    }

    let (hidden, final_ln) = layer_norm(
        &x.view(),
        &params.vec1("final_ln.g"),
        &params.vec1("final_ln.b"),
    );
    ItemCache {
        ids: ids.to_vec(),
        layers,
        final_ln,
        hidden,
    }
}

/// Next-token logits for every position: `[batch, seq, vocab]`. Causal and
/// evaluation-mode (no dropout).
pub fn forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    token_ids: &Array2<u32>,
) -> Result<Array3<T>> {
    validate_ids(cfg, &token_ids.view())?;
    let (batch, seq) = token_ids.dim();
    let out_proj = params.mat("out_proj");
    let mut logits = Array3::<T>::zeros((batch, seq, cfg.vocab_size));
    for b in 0..batch {
        let ids: Vec<usize> = token_ids.row(b).iter().map(|&v| v as usize).collect();
        let cache = run_trunk(params, cfg, &ids, None);
        logits
            .slice_mut(s![b, .., ..])
            .assign(&cache.hidden.dot(&out_proj));
    }
    Ok(logits)
}

/// Log-probabilities of the next token after each row's prefix of length
/// `lens[b]`; rows may be right-padded. Returns `[batch, vocab]`.
pub fn next_token_log_probs<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    token_ids: &Array2<u32>,
    lens: &[usize],
) -> Result<Array2<T>> {
    validate_ids(cfg, &token_ids.view())?;
    let (batch, seq) = token_ids.dim();
    if lens.len() != batch || lens.iter().any(|&l| l == 0 || l > seq) {
        return Err(Error::data("next_token_log_probs: bad prefix lengths"));
    }
    let out_proj = params.mat("out_proj");
    let mut out = Array2::<T>::zeros((batch, cfg.vocab_size));
    for (b, &len) in lens.iter().enumerate() {
        let ids: Vec<usize> = token_ids
            .row(b)
            .iter()
            .take(len)
            .map(|&v| v as usize)
            .collect();
        let cache = run_trunk(params, cfg, &ids, None);
        // Project the last hidden row through the same [1, d] x [d, V] gemm
        // shape every caller sees, so scores agree bitwise across paths.
        let last = cache.hidden.slice(s![len - 1..len, ..]).to_owned();
        let row_logits = last.dot(&out_proj);
        out.row_mut(b).assign(&log_softmax_row(&row_logits.row(0)));
    }
    Ok(out)
}

fn check_mask(batch: &Batch) -> Result<usize> {
    let count = batch.mask_count();
    if count == 0 {
        return Err(Error::data("loss: all-zero loss mask"));
    }
    for b in 0..batch.loss_mask.nrows() {
        if batch.loss_mask[[b, 0]] != 0 {
            return Err(Error::data(
                "loss: output region cannot start at position 0 (no preceding context)",
            ));
        }
    }
    Ok(count)
}

/// Per-item cross-entropy pieces for the masked next-token objective.
/// Returns the summed negative log-likelihood and, when requested, dlogits
/// scaled by `1/total_mask`.
fn item_ce<T: Scalar>(
    logits: &Array2<T>,
    ids: &[usize],
    mask_row: &ArrayView1<u8>,
    total_mask: usize,
    want_grad: bool,
) -> (T, Option<Array2<T>>) {
    let (seq, vocab) = logits.dim();
    let mut nll_sum = T::zero();
    let mut dlogits = want_grad.then(|| Array2::<T>::zeros((seq, vocab)));
    let inv_total = t::<T>(1.0 / total_mask as f64);
    for pos in 1..seq {
        if mask_row[pos] == 0 {
            continue;
        }
        let target = ids[pos];
        let row = logits.row(pos - 1);
        let logp = log_softmax_row(&row);
        nll_sum = nll_sum - logp[target];
        if let Some(dl) = dlogits.as_mut() {
            let mut drow = dl.row_mut(pos - 1);
            for c in 0..vocab {
                let soft = logp[c].exp();
                let delta = if c == target { T::one() } else { T::zero() };
                drow[c] = drow[c] + (soft - delta) * inv_total;
            }
        }
    }
    (nll_sum, dlogits)
}

/// Mean masked cross-entropy over the batch (evaluation mode).
pub fn loss<T: Scalar>(params: &ParamSet<T>, cfg: &ModelConfig, batch: &Batch) -> Result<T> {
    batch.validate(cfg)?;
    let total_mask = check_mask(batch)?;
    let out_proj = params.mat("out_proj");
    let mut nll = T::zero();
    for b in 0..batch.token_ids.nrows() {
        let ids: Vec<usize> = batch.token_ids.row(b).iter().map(|&v| v as usize).collect();
        let cache = run_trunk(params, cfg, &ids, None);
        let logits = cache.hidden.dot(&out_proj);
        let (item_nll, _) = item_ce(&logits, &ids, &batch.loss_mask.row(b), total_mask, false);
        nll = nll + item_nll;
    }
    let value = nll * t::<T>(1.0 / total_mask as f64);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {value}")));
    }
    Ok(value)
}

/// Loss plus gradients for every tensor, and the number of masked target
/// tokens (the weight this batch carries when gradients are combined across
/// shards). Dropout applies only when a training rng is supplied.
pub fn loss_and_grad<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(T, ParamSet<T>, usize)> {
    batch.validate(cfg)?;
    let total_mask = check_mask(batch)?;
    let out_proj = params.mat("out_proj");
    let mut grads = params.zeros_like();
    let mut nll = T::zero();
    for b in 0..batch.token_ids.nrows() {
        let ids: Vec<usize> = batch.token_ids.row(b).iter().map(|&v| v as usize).collect();
        let cache = run_trunk(params, cfg, &ids, dropout_rng.as_deref_mut());
        let logits = cache.hidden.dot(&out_proj);
        let (item_nll, dlogits) =
            item_ce(&logits, &ids, &batch.loss_mask.row(b), total_mask, true);
        nll = nll + item_nll;
        backward_item(params, cfg, &cache, &dlogits.expect("grad requested"), &mut grads);
    }
    let value = nll * t::<T>(1.0 / total_mask as f64);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {value}")));
    }
    Ok((value, grads, total_mask))
}

fn add_to<T: Scalar>(grads: &mut ParamSet<T>, name: &str, delta: &Array2<T>) {
    grads
        .tensors_mut()
        .get_mut(name)
        .unwrap_or_else(|| panic!("missing grad tensor '{name}'"))
        .zip_mut_with(&delta.view().into_dyn(), |g, &d| *g = *g + d);
}

fn add_to_vec<T: Scalar>(grads: &mut ParamSet<T>, name: &str, delta: &Array1<T>) {
    grads
        .tensors_mut()
        .get_mut(name)
        .unwrap_or_else(|| panic!("missing grad tensor '{name}'"))
        .zip_mut_with(&delta.view().into_dyn(), |g, &d| *g = *g + d);
}

/// Backward through one projection site, de-accumulating into the weight,
/// the adapter factors, and the input activations.
#[allow(clippy::too_many_arguments)]
fn project_backward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    layer: usize,
    site: AdapterSite,
    weight: &str,
    z: &Array2<T>,
    dout: &Array2<T>,
    grads: &mut ParamSet<T>,
) -> Array2<T> {
    add_to(grads, weight, &z.t().dot(dout));
    let mut dz = dout.dot(&params.mat(weight).t());
    if cfg.adapters_enabled() && cfg.adapter_targets.contains(&site) {
        let (a_name, b_name) = adapter_names(layer, site);
        let a = params.mat(&a_name);
        let b = params.mat(&b_name);
        let scale = t::<T>(cfg.adapter_scale());
        let dout_bt = dout.dot(&b.t()); // [seq, r]
        add_to(grads, &b_name, &(z.dot(&a).t().dot(dout) * scale));
        add_to(grads, &a_name, &(z.t().dot(&dout_bt) * scale));
        dz = dz + dout_bt.dot(&a.t()) * scale;
    }
    dz
}

fn backward_item<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    cache: &ItemCache<T>,
    dlogits: &Array2<T>,
    grads: &mut ParamSet<T>,
) {
    let seq = cache.ids.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = t::<T>(1.0 / (dh as f64).sqrt());

    add_to(grads, "out_proj", &cache.hidden.t().dot(dlogits));
    let d_hidden = dlogits.dot(&params.mat("out_proj").t());

    let mut dg = Array1::<T>::zeros(d);
    let mut db = Array1::<T>::zeros(d);
    let mut dx = layer_norm_backward(
        &d_hidden.view(),
        &params.vec1("final_ln.g"),
        &cache.final_ln,
        &mut dg,
        &mut db,
    );
    add_to_vec(grads, "final_ln.g", &dg);
    add_to_vec(grads, "final_ln.b", &db);

    for l in (0..cfg.n_layers).rev() {
        let p = format!("layers.{l}");
        let lc = &cache.layers[l];

        // feed-forward block
        let dffn = match &lc.drop_ffn {
            Some(mask) => &dx * mask,
            None => dx.clone(),
        };
        add_to(grads, &format!("{p}.ffn.w2"), &lc.f.t().dot(&dffn));
        add_to_vec(grads, &format!("{p}.ffn.b2"), &dffn.sum_axis(Axis(0)));
        let df = dffn.dot(&params.mat(&format!("{p}.ffn.w2")).t());
        let da1 = gelu_backward(&df, &lc.a1);
        add_to(grads, &format!("{p}.ffn.w1"), &lc.ln2_out.t().dot(&da1));
        add_to_vec(grads, &format!("{p}.ffn.b1"), &da1.sum_axis(Axis(0)));
        let dln2_out = da1.dot(&params.mat(&format!("{p}.ffn.w1")).t());
        let mut dg2 = Array1::<T>::zeros(d);
        let mut db2 = Array1::<T>::zeros(d);
        let dx_ln2 = layer_norm_backward(
            &dln2_out.view(),
            &params.vec1(&format!("{p}.ln2.g")),
            &lc.ln2,
            &mut dg2,
            &mut db2,
        );
        add_to_vec(grads, &format!("{p}.ln2.g"), &dg2);
        add_to_vec(grads, &format!("{p}.ln2.b"), &db2);
        let dx_mid = &dx + &dx_ln2;

        // attention block
        let dattn = match &lc.drop_attn {
            Some(mask) => &dx_mid * mask,
            None => dx_mid.clone(),
        };
        let d_head_concat = project_backward(
            params,
            cfg,
            l,
            AdapterSite::O,
            &format!("{p}.attn.wo"),
            &lc.head_concat,
            &dattn,
            grads,
        );

        let mut dq = Array2::<T>::zeros((seq, d));
        let mut dk = Array2::<T>::zeros((seq, d));
        let mut dv = Array2::<T>::zeros((seq, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let do_h = d_head_concat.slice(cols);
            let probs = &lc.attn_probs[h];
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let vh = lc.v.slice(cols);

            let dp = do_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&do_h));
            let ds = softmax_rows_backward(&dp, probs) * attn_scale;
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        let dln1_q = project_backward(params, cfg, l, AdapterSite::Q, &format!("{p}.attn.wq"), &lc.ln1_out, &dq, grads);
        let dln1_k = project_backward(params, cfg, l, AdapterSite::K, &format!("{p}.attn.wk"), &lc.ln1_out, &dk, grads);
        let dln1_v = project_backward(params, cfg, l, AdapterSite::V, &format!("{p}.attn.wv"), &lc.ln1_out, &dv, grads);
        let dln1_out = dln1_q + dln1_k + dln1_v;

        let mut dg1 = Array1::<T>::zeros(d);
        let mut db1 = Array1::<T>::zeros(d);
        let dx_ln1 = layer_norm_backward(
            &dln1_out.view(),
            &params.vec1(&format!("{p}.ln1.g")),
            &lc.ln1,
            &mut dg1,
            &mut db1,
        );
        add_to_vec(grads, &format!("{p}.ln1.g"), &dg1);
        add_to_vec(grads, &format!("{p}.ln1.b"), &db1);
        dx = dx_mid + dx_ln1;
    }

    // embeddings
    {
        let mut tok_grad = grads.mat_mut("tok_emb");
        for (pos, &id) in cache.ids.iter().enumerate() {
            tok_grad
                .row_mut(id)
                .zip_mut_with(&dx.row(pos), |g, &v| *g = *g + v);
        }
    }
    let mut pos_grad = grads.mat_mut("pos_emb");
    for pos in 0..seq {
        pos_grad
            .row_mut(pos)
            .zip_mut_with(&dx.row(pos), |g, &v| *g = *g + v);
    }
}
