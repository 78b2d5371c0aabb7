//! Transformer building blocks over the tape.
//!
//! Every block comes as a `register_*` function that creates the named
//! parameters and a forward function that fetches them from the store by
//! prefix. Post-norm residual wiring throughout.

use super::graph::{Graph, TensorId};
use super::store::{Init, ParameterStore};
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;

pub fn register_linear(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.add(&format!("{prefix}.w"), d_in, d_out, Init::Xavier, rng)?;
    store.add(&format!("{prefix}.b"), 1, d_out, Init::Zeros, rng)
}

pub fn linear(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let w = g.param(&format!("{prefix}.w"), store.get(&format!("{prefix}.w"))?);
    let b = g.param(&format!("{prefix}.b"), store.get(&format!("{prefix}.b"))?);
    let (_, d_in) = g.shape(x);
    if d_in != g.shape(w).0 {
        return Err(Error::Shape(format!(
            "linear {prefix}: input width {d_in} != weight rows {}",
            g.shape(w).0
        )));
    }
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

pub fn register_layer_norm(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.add(&format!("{prefix}.g"), 1, d, Init::Ones, rng)?;
    store.add(&format!("{prefix}.b"), 1, d, Init::Zeros, rng)
}

pub fn layer_norm(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let gain = g.param(&format!("{prefix}.g"), store.get(&format!("{prefix}.g"))?);
    let bias = g.param(&format!("{prefix}.b"), store.get(&format!("{prefix}.b"))?);
    Ok(g.layer_norm_rows(x, gain, bias))
}

pub fn register_mha(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for name in ["q", "k", "v", "o"] {
        register_linear(store, &format!("{prefix}.{name}"), d, d, rng)?;
    }
    Ok(())
}

/// Multi-head attention. `causal` masks positions `j > i` with additive
/// `-inf` before the softmax.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    query: TensorId,
    keys_values: TensorId,
    heads: usize,
    causal: bool,
) -> Result<TensorId> {
    let (lq, d) = g.shape(query);
    let (lk, dk_in) = g.shape(keys_values);
    if d != dk_in {
        return Err(Error::Shape(format!(
            "attention {prefix}: query width {d} != key width {dk_in}"
        )));
    }
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "attention {prefix}: hidden size {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = linear(g, store, &format!("{prefix}.q"), query)?;
    let k = linear(g, store, &format!("{prefix}.k"), keys_values)?;
    let v = linear(g, store, &format!("{prefix}.v"), keys_values)?;

    let mask = causal.then(|| {
        let m = Array2::from_shape_fn((lq, lk), |(i, j)| {
            if j > i {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        });
        g.constant(m)
    });

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        let kht = g.transpose(kh);
        let scores = g.matmul(qh, kht);
        let mut scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(m) = mask {
            scaled = g.add(scaled, m);
        }
        let attn = g.softmax_rows(scaled);
        head_outputs.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&head_outputs);
    linear(g, store, &format!("{prefix}.o"), merged)
}

pub fn register_ffn(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    register_linear(store, &format!("{prefix}.w1"), d, d_ff, rng)?;
    register_linear(store, &format!("{prefix}.w2"), d_ff, d, rng)
}

pub fn position_wise_ffn(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let h = linear(g, store, &format!("{prefix}.w1"), x)?;
    let h = g.relu(h);
    linear(g, store, &format!("{prefix}.w2"), h)
}

pub fn register_encoder_layer(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    register_mha(store, &format!("{prefix}.attn"), d, rng)?;
    register_layer_norm(store, &format!("{prefix}.ln1"), d, rng)?;
    register_ffn(store, &format!("{prefix}.ffn"), d, d_ff, rng)?;
    register_layer_norm(store, &format!("{prefix}.ln2"), d, rng)
}

pub fn encoder_layer(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
    heads: usize,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<TensorId> {
    let attn = multi_head_attention(g, store, &format!("{prefix}.attn"), x, x, heads, false)?;
    let attn = g.dropout(attn, dropout, rng);
    let x = g.add(x, attn);
    let x = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let ff = position_wise_ffn(g, store, &format!("{prefix}.ffn"), x)?;
    let ff = g.dropout(ff, dropout, rng);
    let x = g.add(x, ff);
    layer_norm(g, store, &format!("{prefix}.ln2"), x)
}

pub fn register_decoder_layer(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    register_mha(store, &format!("{prefix}.self"), d, rng)?;
    register_layer_norm(store, &format!("{prefix}.lns"), d, rng)?;
    register_mha(store, &format!("{prefix}.cross"), d, rng)?;
    register_layer_norm(store, &format!("{prefix}.lnc"), d, rng)?;
    register_ffn(store, &format!("{prefix}.ffn"), d, d_ff, rng)?;
    register_layer_norm(store, &format!("{prefix}.ln2"), d, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
    memory: TensorId,
    heads: usize,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<TensorId> {
    let sa = multi_head_attention(g, store, &format!("{prefix}.self"), x, x, heads, true)?;
    let sa = g.dropout(sa, dropout, rng);
    let x = g.add(x, sa);
    let x = layer_norm(g, store, &format!("{prefix}.lns"), x)?;
    let ca = multi_head_attention(g, store, &format!("{prefix}.cross"), x, memory, heads, false)?;
    let ca = g.dropout(ca, dropout, rng);
    let x = g.add(x, ca);
    let x = layer_norm(g, store, &format!("{prefix}.lnc"), x)?;
    let ff = position_wise_ffn(g, store, &format!("{prefix}.ffn"), x)?;
    let ff = g.dropout(ff, dropout, rng);
    let x = g.add(x, ff);
    layer_norm(g, store, &format!("{prefix}.ln2"), x)
}

/// Standard sin/cos position table.
pub fn sinusoidal_position_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        register_mha(&mut store, "attn", 8, &mut r).unwrap();

        let base = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let mut perturbed = base.clone();
        perturbed[[3, 2]] += 10.0;

        let run = |input: &Array2<f64>| {
            let mut g = Graph::new(false);
            let x = g.input(input.clone());
            let y =
                multi_head_attention(&mut g, &store, "attn", x, x, 2, true).unwrap();
            g.value(y).clone()
        };
        let a = run(&base);
        let b = run(&perturbed);
        // positions before the perturbed frame are unchanged
        for i in 0..3 {
            for j in 0..8 {
                assert_eq!(a[[i, j]], b[[i, j]], "row {i} changed");
            }
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn dropout_disabled_at_evaluation() {
        let mut g = Graph::new(false);
        let x = g.input(Array2::<f64>::ones((3, 3)));
        let mut r = rng();
        let y = g.dropout(x, 0.9, &mut r);
        assert_eq!(g.value(y), &Array2::<f64>::ones((3, 3)));
    }

    #[test]
    fn position_encoding_first_row() {
        let pe = sinusoidal_position_encoding(2, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1.0f64.sin()).abs() < 1e-12);
    }
}
