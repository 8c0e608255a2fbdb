//! Text → dual-stream semantic tokens: encoder over character ids, causal
//! decoder emitting one token per stream per step through two V-way heads,
//! plus a scalar stop head that ends decoding (kept out of the cross-entropy
//! so the uniform-logits baseline is exactly ln V).
//!
//! Classifier-free guidance comes from dropping the text context during
//! training (learned null context row) and, at decode time, from CFG-filter:
//! guidance applied on the top-k support of the conditional logits only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::consts::VOCAB_SIZE;
use crate::data::tokens::TokenStreams;
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, cross_entropy, layer_norm, linear, multi_head_attention, positional_encoding,
    Adam, ParamStore, TapeParams,
};
use crate::rng::{rng_from_seed, split_seed_labeled};
use crate::speech::text::TEXT_VOCAB_SIZE;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2SConfig {
    pub text_vocab: usize,
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
}

impl Default for T2SConfig {
    fn default() -> Self {
        T2SConfig {
            text_vocab: TEXT_VOCAB_SIZE,
            vocab: VOCAB_SIZE,
            width: 64,
            heads: 4,
            enc_depth: 1,
            dec_depth: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct T2SModel {
    pub cfg: T2SConfig,
    pub store: ParamStore,
}

fn mlp<'t>(p: &TapeParams<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    linear(p, &format!("{name}.m2"), linear(p, &format!("{name}.m1"), x).silu())
}

impl T2SModel {
    pub fn init(cfg: T2SConfig, seed: u64) -> T2SModel {
        let mut store = ParamStore::default();
        let s = |label: &str| split_seed_labeled(seed, label);
        let w = cfg.width;
        store.init_embedding("enc.emb", cfg.text_vocab, w, s("enc.emb"));
        store.insert("enc.null", Tensor::rand_uniform(&[1, w], -0.1, 0.1, &mut rng_from_seed(s("enc.null"))));
        for k in 0..cfg.enc_depth {
            let b = format!("enc{k}");
            store.init_layer_norm(&format!("{b}.ln1"), w);
            store.init_attention(&format!("{b}.att"), w, s(&format!("{b}.att")));
            store.init_layer_norm(&format!("{b}.ln2"), w);
            store.init_linear(&format!("{b}.m1"), w, 2 * w, s(&format!("{b}.m1")));
            store.init_linear(&format!("{b}.m2"), 2 * w, w, s(&format!("{b}.m2")));
        }
        store.init_embedding("dec.emb1", cfg.vocab, w, s("dec.emb1"));
        store.init_embedding("dec.emb2", cfg.vocab, w, s("dec.emb2"));
        store.insert("dec.bos", Tensor::rand_uniform(&[1, w], -0.1, 0.1, &mut rng_from_seed(s("dec.bos"))));
        for k in 0..cfg.dec_depth {
            let b = format!("dec{k}");
            store.init_layer_norm(&format!("{b}.ln1"), w);
            store.init_attention(&format!("{b}.self"), w, s(&format!("{b}.self")));
            store.init_layer_norm(&format!("{b}.ln2"), w);
            store.init_attention(&format!("{b}.cross"), w, s(&format!("{b}.cross")));
            store.init_layer_norm(&format!("{b}.ln3"), w);
            store.init_linear(&format!("{b}.m1"), w, 2 * w, s(&format!("{b}.m1")));
            store.init_linear(&format!("{b}.m2"), 2 * w, w, s(&format!("{b}.m2")));
        }
        store.init_layer_norm("dec.out_norm", w);
        store.init_linear("head1", w, cfg.vocab, s("head1"));
        store.init_linear("head2", w, cfg.vocab, s("head2"));
        store.init_linear("stop", w, 1, s("stop"));
        T2SModel { cfg, store }
    }

    /// Encode text ids to context rows; `None` selects the learned null
    /// context (the unconditional branch of CFG).
    pub fn encode<'t>(&self, p: &TapeParams<'t, '_>, text: Option<&[u32]>) -> Result<Var<'t>> {
        let ids = match text {
            None => return Ok(p.get("enc.null")),
            Some(ids) => ids,
        };
        if ids.is_empty() {
            return Err(Error::input("cannot encode an empty text sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.text_vocab) {
            return Err(Error::input(format!("text id {bad} out of range")));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos = p.tape().constant(positional_encoding(idx.len(), self.cfg.width));
        let mut h = p.get("enc.emb").embed_rows(&idx).add(pos);
        for k in 0..self.cfg.enc_depth {
            let b = format!("enc{k}");
            let n1 = layer_norm(p, &format!("{b}.ln1"), h);
            h = h.add(multi_head_attention(p, &format!("{b}.att"), n1, n1, self.cfg.heads, None));
            h = h.add(mlp(p, &b, layer_norm(p, &format!("{b}.ln2"), h)));
        }
        Ok(h)
    }

    /// Per-position logits for both stream heads plus the stop head, teacher
    /// forced on the given streams. Row i conditions only on tokens < i.
    pub fn decode_logits<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        context: Var<'t>,
        streams: &TokenStreams,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let n = streams.len();
        if n == 0 {
            return Err(Error::input("cannot decode over empty streams"));
        }
        for s in [&streams.s1, &streams.s2] {
            if let Some(&bad) = s.iter().find(|&&t| (t as usize) >= self.cfg.vocab) {
                return Err(Error::input(format!(
                    "semantic token {bad} outside model vocab of {}",
                    self.cfg.vocab
                )));
            }
        }
        let shift = |s: &[u32]| -> Vec<usize> { s[..n - 1].iter().map(|&t| t as usize).collect() };
        let bos = p.get("dec.bos");
        let mut h = if n == 1 {
            bos
        } else {
            let e1 = p.get("dec.emb1").embed_rows(&shift(&streams.s1));
            let e2 = p.get("dec.emb2").embed_rows(&shift(&streams.s2));
            bos.concat_rows(e1.add(e2))
        };
        h = h.add(p.tape().constant(positional_encoding(n, self.cfg.width)));
        let mask = p.tape().constant(causal_mask(n));
        for k in 0..self.cfg.dec_depth {
            let b = format!("dec{k}");
            let n1 = layer_norm(p, &format!("{b}.ln1"), h);
            h = h.add(multi_head_attention(p, &format!("{b}.self"), n1, n1, self.cfg.heads, Some(mask)));
            let n2 = layer_norm(p, &format!("{b}.ln2"), h);
            h = h.add(multi_head_attention(p, &format!("{b}.cross"), n2, context, self.cfg.heads, None));
            h = h.add(mlp(p, &b, layer_norm(p, &format!("{b}.ln3"), h)));
        }
        let out = layer_norm(p, "dec.out_norm", h);
        Ok((
            linear(p, "head1", out),
            linear(p, "head2", out),
            linear(p, "stop", out),
        ))
    }
}

/// Mean over both streams and all positions of −log P(s_j^i | s_j^{<i}, x).
pub fn t2s_ce_loss<'t>(
    model: &T2SModel,
    p: &TapeParams<'t, '_>,
    text: Option<&[u32]>,
    streams: &TokenStreams,
) -> Result<Var<'t>> {
    streams.validate()?;
    let ctx = model.encode(p, text)?;
    let (l1, l2, _) = model.decode_logits(p, ctx, streams)?;
    let t1: Vec<usize> = streams.s1.iter().map(|&t| t as usize).collect();
    let t2: Vec<usize> = streams.s2.iter().map(|&t| t as usize).collect();
    let ce = cross_entropy(l1, &t1)?.add(cross_entropy(l2, &t2)?);
    Ok(ce.scale(0.5))
}

/// Binary cross-entropy teaching the stop head to fire at the final position
/// only: softplus(z) − z·y with y = 1 on the last row.
pub fn stop_loss<'t>(p: &TapeParams<'t, '_>, stop_logits: Var<'t>, n: usize) -> Var<'t> {
    let mut y = Tensor::zeros(&[n, 1]);
    y.set(n - 1, 0, 1.0);
    let y = p.tape().constant(y);
    stop_logits.softplus().sub(stop_logits.mul(y)).mean_all()
}

/// Vanilla guidance on logits: uncond + scale·(cond − uncond), with the
/// scale ∈ {0, 1} endpoints returned without arithmetic. Kept in lockstep
/// with `cfg_filter_logits` so the k = V case matches it bit for bit.
pub fn cfg_logits(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::input(format!(
            "guidance logit length mismatch: {} vs {}",
            cond.len(),
            uncond.len()
        )));
    }
    if scale == 1.0 {
        return Ok(cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

/// CFG restricted to the top-k support of the conditional logits; everything
/// off-support goes to −∞. Ties at the k-th value resolve toward lower
/// indices, matching a stable sort on (value desc, index asc).
pub fn cfg_filter_logits(cond: &[f64], uncond: &[f64], scale: f64, k: usize) -> Result<Vec<f64>> {
    let v = cond.len();
    if !(1..=v).contains(&k) {
        return Err(Error::input(format!("cfg-filter k {k} outside [1, {v}]")));
    }
    let combined = cfg_logits(cond, uncond, scale)?;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| cond[b].partial_cmp(&cond[a]).unwrap().then(a.cmp(&b)));
    let mut out = vec![f64::NEG_INFINITY; v];
    for &i in &order[..k] {
        out[i] = combined[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingOpts {
    /// 0 = greedy argmax.
    pub temperature: f64,
    /// Sampling support after guidance; 1 = greedy regardless of temperature.
    pub top_k: usize,
    pub cfg_scale: f64,
    pub cfg_k: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplingOpts {
    fn default() -> Self {
        SamplingOpts {
            temperature: 0.0,
            top_k: 8,
            cfg_scale: 1.5,
            cfg_k: 32,
            max_len: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub streams: TokenStreams,
    /// Set when max_len was reached before the stop head fired.
    pub truncated: bool,
}

fn sample_index(logits: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> u32 {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .unwrap()
    };
    if temperature <= 0.0 || top_k <= 1 {
        return argmax();
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let support: Vec<usize> = order
        .into_iter()
        .take(top_k)
        .filter(|&i| logits[i].is_finite())
        .collect();
    let max = logits[support[0]];
    let weights: Vec<f64> = support
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (w, &i) in weights.iter().zip(&support) {
        if draw < *w {
            return i as u32;
        }
        draw -= w;
    }
    support[support.len() - 1] as u32
}

/// Autoregressive decoding: both streams emit one token per step; the stop
/// head (σ > 0.5) ends the dialogue, max_len marks the output truncated.
pub fn decode_semantic(model: &T2SModel, text: &[u32], opts: &SamplingOpts) -> Result<DecodeOutput> {
    if opts.max_len == 0 {
        return Err(Error::input("max_len must be positive"));
    }
    let mut rng = rng_from_seed(opts.seed);
    let mut s1: Vec<u32> = Vec::new();
    let mut s2: Vec<u32> = Vec::new();
    let mut truncated = true;
    for _ in 0..opts.max_len {
        // teacher-force the prefix plus a placeholder slot for the next step
        let mut w1 = s1.clone();
        let mut w2 = s2.clone();
        w1.push(0);
        w2.push(0);
        let probe = TokenStreams::new(w1, w2)?;
        let i = probe.len() - 1;

        let tape = Tape::new();
        let p = TapeParams::new(&tape, &model.store);
        let ctx = model.encode(&p, Some(text))?;
        let (l1, l2, ls) = model.decode_logits(&p, ctx, &probe)?;
        let (c1, c2, stop) = (l1.value(), l2.value(), ls.value().at(i, 0));
        let (row1, row2) = (c1.row(i).to_vec(), c2.row(i).to_vec());

        let (g1, g2) = if opts.cfg_scale == 1.0 {
            (row1, row2)
        } else {
            let nctx = model.encode(&p, None)?;
            let (u1, u2, _) = model.decode_logits(&p, nctx, &probe)?;
            (
                cfg_filter_logits(&row1, u1.value().row(i), opts.cfg_scale, opts.cfg_k)?,
                cfg_filter_logits(&row2, u2.value().row(i), opts.cfg_scale, opts.cfg_k)?,
            )
        };
        s1.push(sample_index(&g1, opts.temperature, opts.top_k, &mut rng));
        s2.push(sample_index(&g2, opts.temperature, opts.top_k, &mut rng));
        if stop > 0.0 {
            // σ(stop) > 0.5 exactly when the logit is positive
            truncated = false;
            break;
        }
    }
    let streams = TokenStreams::new(s1, s2)?;
    Ok(DecodeOutput { streams, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2STrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of training a step's item against the null text context.
    pub text_dropout: f64,
    pub stop_weight: f64,
}

impl Default for T2STrainOpts {
    fn default() -> Self {
        T2STrainOpts {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            text_dropout: 0.1,
            stop_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2STrainReport {
    pub loss_curve: Vec<f64>,
    /// Final-epoch mean cross-entropy over the corpus (no stop term).
    pub final_ce: f64,
}

/// Teacher-forced training over (text, streams) pairs.
pub fn train_t2s(
    model: &mut T2SModel,
    pairs: &[(Vec<u32>, TokenStreams)],
    opts: &T2STrainOpts,
    seed: u64,
) -> Result<T2STrainReport> {
    if pairs.is_empty() {
        return Err(Error::input("cannot train t2s on an empty corpus"));
    }
    if !(0.0..=1.0).contains(&opts.text_dropout) {
        return Err(Error::input(format!(
            "text dropout {} outside [0, 1]",
            opts.text_dropout
        )));
    }
    let mut opt = Adam::new(opts.lr);
    let mut rng = rng_from_seed(split_seed_labeled(seed, "t2s-train"));
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &model.store);
        let mut loss: Option<Var> = None;
        for _ in 0..opts.batch {
            let (text, streams) = &pairs[rng.gen_range(0..pairs.len())];
            let dropped = rng.gen_bool(opts.text_dropout);
            let ctx = model.encode(&p, if dropped { None } else { Some(text) })?;
            let (l1, l2, ls) = model.decode_logits(&p, ctx, streams)?;
            let t1: Vec<usize> = streams.s1.iter().map(|&t| t as usize).collect();
            let t2: Vec<usize> = streams.s2.iter().map(|&t| t as usize).collect();
            let ce = cross_entropy(l1, &t1)?.add(cross_entropy(l2, &t2)?).scale(0.5);
            let term = ce.add(stop_loss(&p, ls, streams.len()).scale(opts.stop_weight));
            loss = Some(match loss {
                None => term,
                Some(acc) => acc.add(term),
            });
        }
        let loss = loss.unwrap().scale(1.0 / opts.batch as f64);
        let lv = loss.value().data()[0];
        if !lv.is_finite() {
            return Err(Error::non_finite(format!("t2s training loss at step {step}")));
        }
        curve.push(lv);
        let grads = tape.backward(loss);
        let gm = p.grads(&grads);
        opt.step(&mut model.store, &gm, |_| true);
    }
    let mut ce_sum = 0.0;
    for (text, streams) in pairs {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &model.store);
        ce_sum += t2s_ce_loss(model, &p, Some(text), streams)?.value().data()[0];
    }
    Ok(T2STrainReport {
        loss_curve: curve,
        final_ce: ce_sum / pairs.len() as f64,
    })
}
