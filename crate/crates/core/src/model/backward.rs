use super::forward::ForwardTrace;
use super::ops::{self, gelu_grad, layer_norm_backward, linear_backward, row_major, transposed};
use super::{Gradients, Model, Scalar};
use crate::assembly::{AssembledSequence, FeatureKind, Payload};
use crate::error::{Error, Result};

impl<T: Scalar> Model<T> {
    /// Exact gradient of the mean masked cross-entropy with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace<T>, seq: &AssembledSequence) -> Result<Gradients<T>> {
        let cfg = &self.config;
        let (n, d, f, v) = (trace.len, cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        if seq.len() != n || trace.vocab_size != v || trace.blocks.len() != cfg.n_layers {
            return Err(Error::Shape("trace does not match model and sequence".into()));
        }
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let p = &self.params;
        let mut g = self.zero_grads();

        // Softmax minus one-hot on the masked rows only.
        let rows: Vec<(usize, u32)> = (0..n)
            .filter_map(|t| seq.loss_mask[t].then_some(()).and(seq.targets[t].map(|y| (t, y))))
            .collect();
        if rows.is_empty() {
            return Err(Error::NoTargets(format!("sequence {} has no loss positions", seq.qid)));
        }
        let inv_count = T::lit(1.0 / rows.len() as f64);
        let r = rows.len();
        let mut dlogits = vec![T::zero(); r * v];
        let mut out_rows = vec![T::zero(); r * d];
        for (i, &(t, y)) in rows.iter().enumerate() {
            let row = trace.logits_row(t);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dl = &mut dlogits[i * v..(i + 1) * v];
            let mut sum = T::zero();
            for (o, &l) in dl.iter_mut().zip(row) {
                *o = (l - max).exp();
                sum += *o;
            }
            let inv = T::one() / sum;
            dl.iter_mut().for_each(|o| *o *= inv);
            dl[y as usize] -= T::one();
            dl.iter_mut().for_each(|o| *o *= inv_count);
            out_rows[i * d..(i + 1) * d].copy_from_slice(&trace.final_out[t * d..(t + 1) * d]);
        }

        // Tied LM head: logits = out · Eᵀ.
        ops::gemm(
            v,
            r,
            d,
            T::one(),
            &dlogits,
            transposed(v),
            &out_rows,
            row_major(d),
            T::one(),
            &mut g.token_embedding.data,
            row_major(d),
        );
        let mut dout_rows = vec![T::zero(); r * d];
        ops::gemm(
            r,
            v,
            d,
            T::one(),
            &dlogits,
            row_major(v),
            &p.token_embedding.data,
            row_major(d),
            T::zero(),
            &mut dout_rows,
            row_major(d),
        );
        let mut dout = vec![T::zero(); n * d];
        for (i, &(t, _)) in rows.iter().enumerate() {
            dout[t * d..(t + 1) * d].copy_from_slice(&dout_rows[i * d..(i + 1) * d]);
        }

        let mut dx = layer_norm_backward(
            &dout,
            &trace.ln_f,
            &p.ln_f_gain.data,
            &mut g.ln_f_gain.data,
            &mut g.ln_f_bias.data,
            d,
        );

        for (layer, cache) in trace.blocks.iter().enumerate().rev() {
            let bp = &p.blocks[layer];
            let gb = &mut g.blocks[layer];

            // x_out = x_mid + drop(proj(gelu(fc(ln2(x_mid)))))
            let mut dm = dx.clone();
            if let Some(mask) = &cache.mlp_drop {
                dm.iter_mut().zip(mask).for_each(|(a, &k)| *a *= k);
            }
            let mut dact = linear_backward(
                &dm,
                &cache.fc_act,
                &bp.proj_weight.data,
                &mut gb.proj_weight.data,
                &mut gb.proj_bias.data,
                n,
                f,
                d,
            );
            dact.iter_mut()
                .zip(&cache.fc_pre)
                .for_each(|(a, &z)| *a *= gelu_grad(z));
            let dh2 = linear_backward(
                &dact,
                &cache.h2,
                &bp.fc_weight.data,
                &mut gb.fc_weight.data,
                &mut gb.fc_bias.data,
                n,
                d,
                f,
            );
            let dln2 = layer_norm_backward(
                &dh2,
                &cache.ln2,
                &bp.ln2_gain.data,
                &mut gb.ln2_gain.data,
                &mut gb.ln2_bias.data,
                d,
            );
            dx.iter_mut().zip(&dln2).for_each(|(a, &b)| *a += b);

            // x_mid = x_in + drop(out(attention(ln1(x_in))))
            let mut da = dx.clone();
            if let Some(mask) = &cache.attn_drop {
                da.iter_mut().zip(mask).for_each(|(a, &k)| *a *= k);
            }
            let dctx = linear_backward(
                &da,
                &cache.ctx,
                &bp.out_weight.data,
                &mut gb.out_weight.data,
                &mut gb.out_bias.data,
                n,
                d,
                d,
            );

            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut datt = vec![T::zero(); n * n];
            for h in 0..heads {
                let att = &cache.att[h * n * n..(h + 1) * n * n];
                // datt = dctx_h · v_hᵀ
                ops::gemm(
                    n,
                    hd,
                    n,
                    T::one(),
                    &dctx[h * hd..],
                    row_major(d),
                    &cache.qkv[2 * d + h * hd..],
                    transposed(3 * d),
                    T::zero(),
                    &mut datt,
                    row_major(n),
                );
                // dv_h = attᵀ · dctx_h
                ops::gemm(
                    n,
                    n,
                    hd,
                    T::one(),
                    att,
                    transposed(n),
                    &dctx[h * hd..],
                    row_major(d),
                    T::zero(),
                    &mut dqkv[2 * d + h * hd..],
                    row_major(3 * d),
                );
                // Softmax backward, row by row.
                for i in 0..n {
                    let a = &att[i * n..(i + 1) * n];
                    let g_row = &mut datt[i * n..(i + 1) * n];
                    let dot: T = a[..=i].iter().zip(&g_row[..=i]).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        g_row[j] = if j <= i { a[j] * (g_row[j] - dot) } else { T::zero() };
                    }
                }
                // dq_h = dscores · k_h · scale; dk_h = dscoresᵀ · q_h · scale
                ops::gemm(
                    n,
                    n,
                    hd,
                    scale,
                    &datt,
                    row_major(n),
                    &cache.qkv[d + h * hd..],
                    row_major(3 * d),
                    T::zero(),
                    &mut dqkv[h * hd..],
                    row_major(3 * d),
                );
                ops::gemm(
                    n,
                    n,
                    hd,
                    scale,
                    &datt,
                    transposed(n),
                    &cache.qkv[h * hd..],
                    row_major(3 * d),
                    T::zero(),
                    &mut dqkv[d + h * hd..],
                    row_major(3 * d),
                );
            }
            let dh1 = linear_backward(
                &dqkv,
                &cache.h1,
                &bp.qkv_weight.data,
                &mut gb.qkv_weight.data,
                &mut gb.qkv_bias.data,
                n,
                d,
                3 * d,
            );
            let dln1 = layer_norm_backward(
                &dh1,
                &cache.ln1,
                &bp.ln1_gain.data,
                &mut gb.ln1_gain.data,
                &mut gb.ln1_bias.data,
                d,
            );
            dx.iter_mut().zip(&dln1).for_each(|(a, &b)| *a += b);
        }

        if let Some(mask) = &trace.emb_drop {
            dx.iter_mut().zip(mask).for_each(|(a, &k)| *a *= k);
        }
        for (t, slot) in seq.slots.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let add = |dst: &mut [T]| dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            add(g.segment_embedding.row_mut(slot.segment.code()));
            add(g.position_embedding.row_mut(slot.position));
            match &slot.payload {
                Payload::Token(id) => add(g.token_embedding.row_mut(*id as usize)),
                Payload::Feature { kind, values } => {
                    let (dw, db) = match kind {
                        FeatureKind::Video => (&mut g.video_weight, &mut g.video_bias),
                        FeatureKind::Bbox => (&mut g.bbox_weight, &mut g.bbox_bias),
                    };
                    add(&mut db.data);
                    for (i, &x) in values.iter().enumerate() {
                        let x = T::lit(x);
                        dw.row_mut(i).iter_mut().zip(row).for_each(|(a, &b)| *a += x * b);
                    }
                }
            }
        }
        Ok(g)
    }
}
