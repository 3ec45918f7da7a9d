#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidqa::assembly::{AssembledSequence, FeatureKind, Payload, Segment, Slot};
use vidqa::data::FeatureDims;
use vidqa::model::{Model, ModelConfig, Params, Precision};

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        vocab_size: 16,
        feature_dims: FeatureDims::new(3, 3),
        dropout_rate: 0.0,
        seed: 3,
        precision: Precision::F64,
    }
}

/// Replaces every parameter with a draw from `N(0, std)` (gains centred on 1).
pub fn scramble(model: &mut Model<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = vidqa::model::param_layout(&model.config);
    for (info, t) in layout.iter().zip(model.params.tensors_mut()) {
        let centre = if info.name.ends_with("gain") { 1.0 } else { 0.0 };
        for x in t.data.iter_mut() {
            *x = centre + std * (rng.random::<f64>() * 2.0 - 1.0) * 1.7;
        }
    }
}

pub fn tok(id: u32, segment: Segment, position: usize) -> Slot {
    Slot {
        payload: Payload::Token(id),
        segment,
        position,
    }
}

pub fn feat(kind: FeatureKind, values: Vec<f64>, position: usize) -> Slot {
    let segment = match kind {
        FeatureKind::Video => Segment::Video,
        FeatureKind::Bbox => Segment::BoxFeature,
    };
    Slot {
        payload: Payload::Feature { kind, values },
        segment,
        position,
    }
}

/// V, BBF, PER, QUE, then answer token and EOS; three loss positions.
pub fn micro_sequence() -> AssembledSequence {
    let slots = vec![
        feat(FeatureKind::Video, vec![0.5, -1.0, 0.25], 0),
        feat(FeatureKind::Bbox, vec![-0.3, 0.8, 1.1], 1),
        tok(13, Segment::Person, 2),
        tok(14, Segment::Question, 3),
        tok(15, Segment::Answer, 4),
        tok(1, Segment::Answer, 5),
    ];
    let loss_mask = vec![false, false, false, true, true, false];
    let targets = vec![None, None, None, Some(15), Some(1), None];
    AssembledSequence {
        qid: "micro".into(),
        slots,
        loss_mask,
        targets,
    }
}

pub fn random_slots(rng: &mut ChaCha8Rng, n: usize, cfg: &ModelConfig) -> Vec<Slot> {
    (0..n)
        .map(|t| match rng.random_range(0..4) {
            0 => feat(
                FeatureKind::Video,
                (0..cfg.feature_dims.video).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                t,
            ),
            1 => feat(
                FeatureKind::Bbox,
                (0..cfg.feature_dims.bbox).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                t,
            ),
            _ => {
                let seg = Segment::ALL[rng.random_range(2..Segment::COUNT)];
                tok(rng.random_range(0..cfg.vocab_size as u32), seg, t)
            }
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) * r * g[j] + b[j]).collect()
}

/// `x · W + b` with `W` stored row-major as `in x out`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub struct Reference {
    pub logits: Vec<Vec<f64>>,
    pub final_out: Vec<Vec<f64>>,
}

/// Straight-loop forward pass in eval mode, written independently of the library kernels.
pub fn reference_forward(cfg: &ModelConfig, p: &Params<f64>, slots: &[Slot]) -> Reference {
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let mut x: Vec<Vec<f64>> = slots
        .iter()
        .map(|s| {
            let content = match &s.payload {
                Payload::Token(id) => p.token_embedding.row(*id as usize).to_vec(),
                Payload::Feature { kind, values } => {
                    let (w, b) = match kind {
                        FeatureKind::Video => (&p.video_weight, &p.video_bias),
                        FeatureKind::Bbox => (&p.bbox_weight, &p.bbox_bias),
                    };
                    affine(values, &w.data, &b.data)
                }
            };
            let seg = p.segment_embedding.row(s.segment.code());
            let pos = p.position_embedding.row(s.position);
            (0..d).map(|j| content[j] + seg[j] + pos[j]).collect()
        })
        .collect();
    let n = x.len();
    for b in &p.blocks {
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|r| affine(&layer_norm(r, &b.ln1_gain.data, &b.ln1_bias.data), &b.qkv_weight.data, &b.qkv_bias.data))
            .collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|c| qkv[i][c] * qkv[j][d + c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in cols.clone() {
                        ctx[i][c] += e[j] / z * qkv[j][2 * d + c];
                    }
                }
            }
        }
        for i in 0..n {
            let a = affine(&ctx[i], &b.out_weight.data, &b.out_bias.data);
            (0..d).for_each(|j| x[i][j] += a[j]);
            let h2 = layer_norm(&x[i], &b.ln2_gain.data, &b.ln2_bias.data);
            let act: Vec<f64> = affine(&h2, &b.fc_weight.data, &b.fc_bias.data).into_iter().map(gelu).collect();
            let m = affine(&act, &b.proj_weight.data, &b.proj_bias.data);
            (0..d).for_each(|j| x[i][j] += m[j]);
        }
    }
    let final_out: Vec<Vec<f64>> = x
        .iter()
        .map(|r| layer_norm(r, &p.ln_f_gain.data, &p.ln_f_bias.data))
        .collect();
    let logits = final_out
        .iter()
        .map(|o| {
            (0..cfg.vocab_size)
                .map(|v| o.iter().zip(p.token_embedding.row(v)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Reference { logits, final_out }
}

/// Relative error with a 1e-6 floor on the denominator. Some entries (the key
/// bias, for one) have an exactly zero true gradient, where both sides are
/// roundoff and a pure ratio is meaningless.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of every parameter entry; returns the worst relative error.
pub fn max_gradient_error(model: &Model<f64>, seq: &AssembledSequence, h: f64) -> (f64, String) {
    max_gradient_error_with(model, seq, h, |m| m.forward(&seq.slots, vidqa::model::Mode::Eval).unwrap())
}

pub fn max_gradient_error_with(
    model: &Model<f64>,
    seq: &AssembledSequence,
    h: f64,
    run: impl Fn(&Model<f64>) -> vidqa::model::ForwardTrace<f64>,
) -> (f64, String) {
    use vidqa::model::loss;
    let grads = model.backward(&run(model), seq).unwrap();
    let layout = vidqa::model::param_layout(&model.config);
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (ti, info) in layout.iter().enumerate() {
        for i in 0..info.numel() {
            let orig = probe.params.tensors()[ti].data[i];
            probe.params.tensors_mut()[ti].data[i] = orig + h;
            let up = loss(&run(&probe), seq).unwrap();
            probe.params.tensors_mut()[ti].data[i] = orig - h;
            let down = loss(&run(&probe), seq).unwrap();
            probe.params.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors()[ti].data[i];
            let rel = grad_rel_error(analytic, numeric);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", info.name));
            }
        }
    }
    worst
}

/// Toy language model whose logits are a seeded pseudo-random function of the full prefix.
pub struct PrefixModel {
    pub seed: u64,
    pub vocab: usize,
    pub eos: Option<u32>,
}

impl vidqa::decoding::NextTokenModel for PrefixModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> Option<u32> {
        self.eos
    }

    fn next_logits(&self, generated: &[u32]) -> vidqa::Result<Vec<f64>> {
        let key = generated.iter().fold(1u64, |acc, &t| acc * (self.vocab as u64 + 1) + t as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key);
        Ok((0..self.vocab).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
    }
}

/// Every sequence the decoder could return with horizon `h`: EOS-terminated
/// prefixes plus all full-length continuations, with their summed log-probs.
pub fn enumerate_sequences(model: &PrefixModel, h: usize) -> Vec<(Vec<u32>, f64)> {
    use vidqa::decoding::NextTokenModel;
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        if prefix.len() == h {
            out.push((prefix, score));
            continue;
        }
        let lp = vidqa::model::log_softmax(&model.next_logits(&prefix).unwrap());
        for (v, l) in lp.iter().enumerate() {
            let mut next = prefix.clone();
            next.push(v as u32);
            if model.eos == Some(v as u32) {
                out.push((next, score + l));
            } else {
                stack.push((next, score + l));
            }
        }
    }
    out
}
