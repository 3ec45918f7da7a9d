use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, gelu, layer_norm, linear, row_major, transposed, LayerNormCache};
use super::{Model, Scalar};
use crate::assembly::{AssembledSequence, FeatureKind, Payload, Slot};
use crate::error::{Error, Result};

/// Eval mode is deterministic; train mode applies dropout drawn from the rng.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout_mask<T: Scalar>(&mut self, rate: f64, len: usize) -> Option<Vec<T>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = T::lit(1.0 / (1.0 - rate));
                Some(
                    (0..len)
                        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}

pub(crate) struct BlockCache<T> {
    pub ln1: LayerNormCache<T>,
    pub h1: Vec<T>,
    pub qkv: Vec<T>,
    /// Attention probabilities, `n_heads x n x n`, zero above the diagonal.
    pub att: Vec<T>,
    pub ctx: Vec<T>,
    pub attn_drop: Option<Vec<T>>,
    pub ln2: LayerNormCache<T>,
    pub h2: Vec<T>,
    pub fc_pre: Vec<T>,
    pub fc_act: Vec<T>,
    pub mlp_drop: Option<Vec<T>>,
}

/// Logits plus every activation the backward pass needs.
pub struct ForwardTrace<T> {
    pub len: usize,
    pub vocab_size: usize,
    /// Row-major `len x vocab_size`.
    pub logits: Vec<T>,
    pub(crate) emb_drop: Option<Vec<T>>,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) ln_f: LayerNormCache<T>,
    pub(crate) final_out: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logits_row(&self, t: usize) -> &[T] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    /// Attention probabilities of one head: `len x len`, row `i` over keys `0..=i`.
    pub fn attention(&self, layer: usize, head: usize) -> &[T] {
        let n = self.len;
        &self.blocks[layer].att[head * n * n..(head + 1) * n * n]
    }
}

impl<T: Scalar> Model<T> {
    fn check_slots(&self, slots: &[Slot]) -> Result<()> {
        let cfg = &self.config;
        if slots.len() > cfg.max_seq_len {
            return Err(Error::Overflow {
                qid: String::new(),
                len: slots.len(),
                max: cfg.max_seq_len,
            });
        }
        for slot in slots {
            if slot.position >= cfg.max_seq_len {
                return Err(Error::Shape(format!(
                    "position {} outside 0..{}",
                    slot.position, cfg.max_seq_len
                )));
            }
            match &slot.payload {
                Payload::Token(id) if *id as usize >= cfg.vocab_size => {
                    return Err(Error::TokenOutOfRange {
                        id: *id,
                        size: cfg.vocab_size,
                    })
                }
                Payload::Feature { kind, values } => {
                    let want = match kind {
                        FeatureKind::Video => cfg.feature_dims.video,
                        FeatureKind::Bbox => cfg.feature_dims.bbox,
                    };
                    if values.len() != want {
                        return Err(Error::Shape(format!(
                            "{kind:?} feature has {} entries, expected {want}",
                            values.len()
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn embed_rows(&self, slots: &[Slot]) -> Vec<T> {
        let d = self.config.d_model;
        let p = &self.params;
        let mut x = vec![T::zero(); slots.len() * d];
        for (t, slot) in slots.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            match &slot.payload {
                Payload::Token(id) => row.copy_from_slice(p.token_embedding.row(*id as usize)),
                Payload::Feature { kind, values } => {
                    let (w, b) = match kind {
                        FeatureKind::Video => (&p.video_weight, &p.video_bias),
                        FeatureKind::Bbox => (&p.bbox_weight, &p.bbox_bias),
                    };
                    row.copy_from_slice(&b.data);
                    for (i, &v) in values.iter().enumerate() {
                        let v = T::lit(v);
                        for (r, &wij) in row.iter_mut().zip(w.row(i)) {
                            *r += v * wij;
                        }
                    }
                }
            }
            let seg = p.segment_embedding.row(slot.segment.code());
            let pos = p.position_embedding.row(slot.position);
            for j in 0..d {
                row[j] += seg[j] + pos[j];
            }
        }
        x
    }

    /// Input rows `content + segment + position`, with dropout in train mode.
    pub fn embed(&self, slots: &[Slot], mode: &mut Mode<'_>) -> Result<Vec<T>> {
        self.check_slots(slots)?;
        let mut x = self.embed_rows(slots);
        let mask = mode.dropout_mask(self.config.dropout_rate, x.len());
        apply_mask(&mut x, &mask);
        Ok(x)
    }

    pub fn forward(&self, slots: &[Slot], mut mode: Mode<'_>) -> Result<ForwardTrace<T>> {
        self.check_slots(slots)?;
        let cfg = &self.config;
        let (n, d, f, v) = (slots.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let rate = cfg.dropout_rate;

        let mut x = self.embed_rows(slots);
        let emb_drop = mode.dropout_mask(rate, x.len());
        apply_mask(&mut x, &emb_drop);

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for (layer, bp) in self.params.blocks.iter().enumerate() {
            let (h1, ln1) = layer_norm(&x, &bp.ln1_gain.data, &bp.ln1_bias.data, d);
            let qkv = linear(&h1, &bp.qkv_weight.data, &bp.qkv_bias.data, n, d, 3 * d);

            let mut att = vec![T::zero(); heads * n * n];
            let mut ctx = vec![T::zero(); n * d];
            for h in 0..heads {
                let scores = &mut att[h * n * n..(h + 1) * n * n];
                ops::gemm(
                    n,
                    hd,
                    n,
                    scale,
                    &qkv[h * hd..],
                    row_major(3 * d),
                    &qkv[d + h * hd..],
                    transposed(3 * d),
                    T::zero(),
                    scores,
                    row_major(n),
                );
                for i in 0..n {
                    let row = &mut scores[i * n..(i + 1) * n];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in &mut row[..=i] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = T::one() / sum;
                    row[..=i].iter_mut().for_each(|s| *s *= inv);
                    row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
                }
                ops::gemm(
                    n,
                    n,
                    hd,
                    T::one(),
                    scores,
                    row_major(n),
                    &qkv[2 * d + h * hd..],
                    row_major(3 * d),
                    T::zero(),
                    &mut ctx[h * hd..],
                    row_major(d),
                );
            }

            let mut a = linear(&ctx, &bp.out_weight.data, &bp.out_bias.data, n, d, d);
            let attn_drop = mode.dropout_mask(rate, a.len());
            apply_mask(&mut a, &attn_drop);
            x.iter_mut().zip(&a).for_each(|(xi, &ai)| *xi += ai);

            let (h2, ln2) = layer_norm(&x, &bp.ln2_gain.data, &bp.ln2_bias.data, d);
            let fc_pre = linear(&h2, &bp.fc_weight.data, &bp.fc_bias.data, n, d, f);
            let fc_act: Vec<T> = fc_pre.iter().map(|&z| gelu(z)).collect();
            let mut m = linear(&fc_act, &bp.proj_weight.data, &bp.proj_bias.data, n, f, d);
            let mlp_drop = mode.dropout_mask(rate, m.len());
            apply_mask(&mut m, &mlp_drop);
            x.iter_mut().zip(&m).for_each(|(xi, &mi)| *xi += mi);

            if x.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite(format!("output of block {layer}")));
            }
            blocks.push(BlockCache {
                ln1,
                h1,
                qkv,
                att,
                ctx,
                attn_drop,
                ln2,
                h2,
                fc_pre,
                fc_act,
                mlp_drop,
            });
        }

        let p = &self.params;
        let (final_out, ln_f) = layer_norm(&x, &p.ln_f_gain.data, &p.ln_f_bias.data, d);
        let mut logits = vec![T::zero(); n * v];
        ops::gemm(
            n,
            d,
            v,
            T::one(),
            &final_out,
            row_major(d),
            &p.token_embedding.data,
            transposed(d),
            T::zero(),
            &mut logits,
            row_major(v),
        );
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(ForwardTrace {
            len: n,
            vocab_size: v,
            logits,
            emb_drop,
            blocks,
            ln_f,
            final_out,
        })
    }
}

/// Mean next-token cross-entropy over the masked positions, in f64.
pub fn loss<T: Scalar>(trace: &ForwardTrace<T>, seq: &AssembledSequence) -> Result<f64> {
    let logits: Vec<f64> = trace.logits.iter().map(|x| x.to_f64().unwrap()).collect();
    cross_entropy(&logits, trace.vocab_size, seq)
}

/// `loss` over raw row-major logits (`seq.len() x vocab_size`).
pub fn cross_entropy(logits: &[f64], vocab_size: usize, seq: &AssembledSequence) -> Result<f64> {
    if logits.len() != seq.len() * vocab_size {
        return Err(Error::Shape(format!(
            "{} logits for {} slots of vocab {vocab_size}",
            logits.len(),
            seq.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..seq.len() {
        let (true, Some(target)) = (seq.loss_mask[t], seq.targets[t]) else {
            continue;
        };
        let row = &logits[t * vocab_size..(t + 1) * vocab_size];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[target as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoTargets(format!("sequence {} has no loss positions", seq.qid)));
    }
    Ok(total / count as f64)
}
