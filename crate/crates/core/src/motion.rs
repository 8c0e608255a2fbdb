//! Motion mapper: dual semantic-token streams → interactive motion features.
//!
//! Four integration strategies are selectable. `Add` and `Concat` are
//! pointwise MLPs over the summed / concatenated stream features; `Dual`
//! cross-attends from query states (the video hidden states inside a
//! denoiser, or a learned positional query bank standalone) to each stream
//! separately and sums; `Joint` runs both streams through modulated branches
//! into one joint self-attention over the concatenated sequence, MMDiT
//! style. `Add` is kept despite being the known-bad variant — its exact
//! swap invariance is the failure mode the training comparison exposes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::consts::{LATENT_DIM, MOTION_FEATURE_DIM, TOKEN_DIM};
use crate::data::codebook::Codebook;
use crate::data::synth::DialogueSample;
use crate::error::{Error, Result};
use crate::nn::{
    layer_norm, linear, multi_head_attention, positional_encoding, Adam, ParamStore, TapeParams,
};
use crate::rng::{rng_from_seed, split_seed_labeled};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Add,
    Concat,
    Dual,
    Joint,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "add" => Ok(Strategy::Add),
            "concat" => Ok(Strategy::Concat),
            "dual" => Ok(Strategy::Dual),
            "joint" => Ok(Strategy::Joint),
            other => Err(Error::input(format!(
                "unknown motion mapper strategy '{other}' (expected add|concat|dual|joint)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Add => "add",
            Strategy::Concat => "concat",
            Strategy::Dual => "dual",
            Strategy::Joint => "joint",
        }
    }
}

/// Per-token motion features plus the strategy that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    pub c_mot: Tensor,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub strategy: Strategy,
    /// Token feature width fed per stream.
    pub d_in: usize,
    /// Sinusoidal positional features appended inside Dual/Joint.
    pub pos_dim: usize,
    pub width: usize,
    pub heads: usize,
    /// Joint blocks stacked.
    pub depth: usize,
    pub d_mot: usize,
    /// Tie the two joint branches (symmetry tests); default untied.
    pub tie_streams: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            strategy: Strategy::Joint,
            d_in: TOKEN_DIM,
            pos_dim: 16,
            width: 64,
            heads: 4,
            depth: 2,
            d_mot: MOTION_FEATURE_DIM,
            tie_streams: false,
        }
    }
}

impl MapperConfig {
    pub fn with_strategy(strategy: Strategy) -> MapperConfig {
        MapperConfig {
            strategy,
            ..MapperConfig::default()
        }
    }
}

/// Sum of two cross-attentions from shared query states into each stream.
/// This is the raw strategy op: the caller must supply the query states
/// (`video_hidden`), matching how the strategy lives inside a denoiser.
pub fn map_dual_attention<'t>(
    p: &TapeParams<'t, '_>,
    name: &str,
    s1_feat: Var<'t>,
    s2_feat: Var<'t>,
    video_hidden: Option<Var<'t>>,
    heads: usize,
) -> Result<Var<'t>> {
    let q = video_hidden
        .ok_or_else(|| Error::input("dual attention requires video hidden states as queries"))?;
    let a1 = multi_head_attention(p, &format!("{name}.att1"), q, s1_feat, heads, None);
    let a2 = multi_head_attention(p, &format!("{name}.att2"), q, s2_feat, heads, None);
    Ok(a1.add(a2))
}

#[derive(Debug, Clone)]
pub struct MotionMapper {
    pub cfg: MapperConfig,
    pub store: ParamStore,
}

impl MotionMapper {
    pub fn init(cfg: MapperConfig, seed: u64) -> MotionMapper {
        let mut store = ParamStore::default();
        let s = |label: &str| split_seed_labeled(seed, label);
        match cfg.strategy {
            Strategy::Add => {
                store.init_linear("add.l1", cfg.d_in, cfg.width, s("add.l1"));
                store.init_linear("add.l2", cfg.width, cfg.width, s("add.l2"));
                store.init_linear("add.l3", cfg.width, cfg.d_mot, s("add.l3"));
            }
            Strategy::Concat => {
                store.init_linear("concat.l1", 2 * cfg.d_in, cfg.width, s("concat.l1"));
                store.init_linear("concat.l2", cfg.width, cfg.width, s("concat.l2"));
                store.init_linear("concat.l3", cfg.width, cfg.d_mot, s("concat.l3"));
            }
            Strategy::Dual => {
                store.init_linear("dual.qbank", cfg.pos_dim, cfg.width, s("dual.qbank"));
                for b in 1..=2 {
                    store.init_linear(
                        &format!("dual.in{b}"),
                        cfg.d_in + cfg.pos_dim,
                        cfg.width,
                        s(&format!("dual.in{b}")),
                    );
                    store.init_attention(&format!("dual.att{b}"), cfg.width, s(&format!("att{b}")));
                }
                store.init_linear("dual.out", cfg.width, cfg.d_mot, s("dual.out"));
            }
            Strategy::Joint => {
                let branches = if cfg.tie_streams { 1 } else { 2 };
                for b in 0..branches {
                    store.init_linear(
                        &format!("joint.in{b}"),
                        cfg.d_in + cfg.pos_dim,
                        cfg.width,
                        s(&format!("joint.in{b}")),
                    );
                }
                for k in 0..cfg.depth {
                    for b in 0..branches {
                        store.init_layer_norm(&format!("joint.blk{k}.s{b}.norm"), cfg.width);
                        store.init_linear(
                            &format!("joint.blk{k}.s{b}.mod"),
                            cfg.width,
                            cfg.width,
                            s(&format!("blk{k}.s{b}.mod")),
                        );
                        store.init_linear(
                            &format!("joint.blk{k}.s{b}.post"),
                            cfg.width,
                            cfg.width,
                            s(&format!("blk{k}.s{b}.post")),
                        );
                    }
                    store.init_attention(&format!("joint.blk{k}.att"), cfg.width, s(&format!("blk{k}.att")));
                }
                store.init_linear("joint.f1", 2 * cfg.width, cfg.width, s("joint.f1"));
                store.init_linear("joint.f2", cfg.width, cfg.width, s("joint.f2"));
                store.init_linear("joint.f3", cfg.width, cfg.d_mot, s("joint.f3"));
            }
        }
        MotionMapper { cfg, store }
    }

    fn branch(&self, b: usize) -> usize {
        if self.cfg.tie_streams {
            0
        } else {
            b
        }
    }

    fn posenc<'t>(&self, p: &TapeParams<'t, '_>, len: usize) -> Var<'t> {
        p.tape().constant(positional_encoding(len, self.cfg.pos_dim))
    }

    /// The two joint branch outputs before feature fusion. With tied branch
    /// weights these swap (to rounding) when the streams swap.
    pub fn joint_branches<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        s1_feat: Var<'t>,
        s2_feat: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let rows = s1_feat.value().rows();
        if rows != s2_feat.value().rows() {
            return Err(Error::input(format!(
                "stream length mismatch: {} vs {}",
                rows,
                s2_feat.value().rows()
            )));
        }
        let pos = self.posenc(p, rows);
        let mut h = [
            linear(p, &format!("joint.in{}", self.branch(0)), s1_feat.concat_cols(pos)),
            linear(p, &format!("joint.in{}", self.branch(1)), s2_feat.concat_cols(pos)),
        ];
        for k in 0..self.cfg.depth {
            let m: Vec<Var> = (0..2)
                .map(|b| {
                    let name = format!("joint.blk{k}.s{}", self.branch(b));
                    linear(p, &format!("{name}.mod"), layer_norm(p, &format!("{name}.norm"), h[b]))
                })
                .collect();
            let joint = m[0].concat_rows(m[1]);
            let att = multi_head_attention(
                p,
                &format!("joint.blk{k}.att"),
                joint,
                joint,
                self.cfg.heads,
                None,
            );
            for b in 0..2 {
                let part = att.slice_rows(b * rows, rows);
                let post = linear(p, &format!("joint.blk{k}.s{}.post", self.branch(b)), part);
                h[b] = h[b].add(post);
            }
        }
        Ok((h[0], h[1]))
    }

    /// Map raw per-stream token features to motion features, one row per
    /// token position. `video_hidden` is only consulted by the Dual
    /// strategy; standalone Dual falls back to its learned query bank.
    pub fn forward<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        s1_feat: Var<'t>,
        s2_feat: Var<'t>,
        video_hidden: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let rows = s1_feat.value().rows();
        if rows != s2_feat.value().rows() {
            return Err(Error::input(format!(
                "stream length mismatch: {} vs {}",
                rows,
                s2_feat.value().rows()
            )));
        }
        let mlp3 = |prefix: &str, x: Var<'t>| {
            let h = linear(p, &format!("{prefix}.l1"), x).silu();
            let h = linear(p, &format!("{prefix}.l2"), h).silu();
            linear(p, &format!("{prefix}.l3"), h)
        };
        match self.cfg.strategy {
            Strategy::Add => Ok(mlp3("add", s1_feat.add(s2_feat))),
            Strategy::Concat => Ok(mlp3("concat", s1_feat.concat_cols(s2_feat))),
            Strategy::Dual => {
                let pos = self.posenc(p, rows);
                let q = match video_hidden {
                    Some(h) => h,
                    None => linear(p, "dual.qbank", pos),
                };
                let in1 = linear(p, "dual.in1", s1_feat.concat_cols(pos));
                let in2 = linear(p, "dual.in2", s2_feat.concat_cols(pos));
                let summed = map_dual_attention(p, "dual", in1, in2, Some(q), self.cfg.heads)?;
                Ok(linear(p, "dual.out", summed))
            }
            Strategy::Joint => {
                let (h1, h2) = self.joint_branches(p, s1_feat, s2_feat)?;
                let fused = h1.concat_cols(h2);
                let f = linear(p, "joint.f1", fused).silu();
                let f = linear(p, "joint.f2", f).silu();
                Ok(linear(p, "joint.f3", f))
            }
        }
    }

    /// Plain-tensor forward for inference paths.
    pub fn apply(&self, s1_feat: &Tensor, s2_feat: &Tensor) -> Result<MotionFeatures> {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &self.store);
        let a = tape.constant(s1_feat.clone());
        let b = tape.constant(s2_feat.clone());
        let out = self.forward(&p, a, b, None)?;
        Ok(MotionFeatures {
            c_mot: out.value(),
            strategy: self.cfg.strategy,
        })
    }
}

/// Knobs for the supervised motion-regression training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_pairs: usize,
    /// Window length in tokens (even; 2 tokens per target frame).
    pub window_tokens: usize,
    pub lr: f64,
    /// Zero the prosody dims of the token features (channel ablation).
    pub zero_prosody: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 5,
            steps_per_epoch: 60,
            batch_pairs: 4,
            window_tokens: 64,
            lr: 3e-3,
            zero_prosody: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperTrainReport {
    /// Elementwise validation MSE after each epoch.
    pub val_mse: Vec<f64>,
    /// Best achievable val MSE for any stream-swap-invariant predictor
    /// (parallelogram bound on the swap-augmented pairs).
    pub symmetric_floor: f64,
}

/// One supervised example: predict this role's motion from (own, partner)
/// token features. Each dialogue contributes both role assignments, which is
/// what makes the swap-invariance of Add a measurable handicap.
struct Pair {
    self_feat: Tensor,
    other_feat: Tensor,
    target: Tensor,
}

fn build_pairs(
    samples: &[DialogueSample],
    codebook: &Codebook,
    zero_prosody: bool,
) -> Result<Vec<Pair>> {
    let mut pairs = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let mut feats = [
            codebook.dequantize(&s.streams.s1)?,
            codebook.dequantize(&s.streams.s2)?,
        ];
        if zero_prosody {
            for f in &mut feats {
                for r in 0..f.rows() {
                    for d in codebook.prosody_dims.clone() {
                        f.set(r, d, 0.0);
                    }
                }
            }
        }
        for role in 0..2 {
            pairs.push(Pair {
                self_feat: feats[role].clone(),
                other_feat: feats[1 - role].clone(),
                target: s.motion[role].clone(),
            });
        }
    }
    Ok(pairs)
}

/// Elementwise MSE floor for swap-invariant predictors on the augmented
/// pairs: for any single prediction p shared by (m1, m2),
/// ½(‖p−m1‖² + ‖p−m2‖²) ≥ ‖(m1−m2)/2‖².
fn symmetric_floor(samples: &[DialogueSample]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let (a, b) = (&s.motion[0], &s.motion[1]);
        for i in 0..a.data.len() {
            let half = 0.5 * (a.data[i] - b.data[i]);
            sum += half * half;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Train a mapper by supervised regression onto ground-truth motion tracks.
/// Token-rate features are averaged down to frame rate and projected by a
/// supervision head that travels with the mapper parameters.
pub fn train_mapper(
    cfg: MapperConfig,
    samples: &[DialogueSample],
    codebook: &Codebook,
    opts: &TrainOpts,
    seed: u64,
) -> Result<(MotionMapper, MapperTrainReport)> {
    if samples.is_empty() {
        return Err(Error::input("cannot train a motion mapper on an empty corpus"));
    }
    if opts.window_tokens % 2 != 0 || opts.window_tokens == 0 {
        return Err(Error::input("window_tokens must be even and positive"));
    }
    let mut mapper = MotionMapper::init(cfg, split_seed_labeled(seed, "init"));
    mapper.store.init_linear(
        "supervise",
        mapper.cfg.d_mot,
        LATENT_DIM,
        split_seed_labeled(seed, "supervise"),
    );

    // last quarter of samples (at least one) is the validation split
    let n_val_samples = (samples.len() / 4).max(1);
    let split = samples.len() - n_val_samples;
    let train_pairs = build_pairs(&samples[..split], codebook, opts.zero_prosody)?;
    let val_pairs = build_pairs(&samples[split..], codebook, opts.zero_prosody)?;
    let floor = symmetric_floor(&samples[split..]);
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::input("corpus too small to split into train and val"));
    }

    let mut opt = Adam::new(opts.lr);
    let mut rng = rng_from_seed(split_seed_labeled(seed, "batches"));
    let mut val_curve = Vec::with_capacity(opts.epochs);

    for _epoch in 0..opts.epochs {
        for _step in 0..opts.steps_per_epoch {
            let tape = Tape::new();
            let p = TapeParams::new(&tape, &mapper.store);
            let mut loss: Option<Var> = None;
            for _ in 0..opts.batch_pairs {
                let pair = &train_pairs[rng.gen_range(0..train_pairs.len())];
                let total = pair.self_feat.rows();
                let w = opts.window_tokens.min(total);
                let start = 2 * rng.gen_range(0..=(total - w) / 2);
                let sf = tape.constant(pair.self_feat.slice_rows(start, w)?);
                let of = tape.constant(pair.other_feat.slice_rows(start, w)?);
                let target = tape.constant(pair.target.slice_rows(start / 2, w / 2)?);
                let c_mot = mapper.forward(&p, sf, of, None)?;
                let pred = linear(&p, "supervise", c_mot.pair_avg_rows());
                let d = pred.sub(target);
                let term = d.mul(d).mean_all();
                loss = Some(match loss {
                    None => term,
                    Some(acc) => acc.add(term),
                });
            }
            let loss = loss.unwrap().scale(1.0 / opts.batch_pairs as f64);
            let grads = tape.backward(loss);
            let grad_map = p.grads(&grads);
            opt.step(&mut mapper.store, &grad_map, |_| true);
        }
        val_curve.push(validation_mse(&mapper, &val_pairs)?);
    }

    Ok((
        mapper,
        MapperTrainReport {
            val_mse: val_curve,
            symmetric_floor: floor,
        },
    ))
}

/// Elementwise MSE of the mapper + supervision head over full sequences.
fn validation_mse(mapper: &MotionMapper, pairs: &[Pair]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for pair in pairs {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &mapper.store);
        let sf = tape.constant(pair.self_feat.clone());
        let of = tape.constant(pair.other_feat.clone());
        let c_mot = mapper.forward(&p, sf, of, None)?;
        let pred = linear(&p, "supervise", c_mot.pair_avg_rows());
        let pv = pred.value();
        for i in 0..pv.data.len() {
            let d = pv.data[i] - pair.target.data[i];
            sum += d * d;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GRAD_CHECK_EPS, GRAD_CHECK_TOL};
    use crate::data::synth::{synth_corpus, CorpusConfig};
    use crate::nn::grad_check_params;

    fn tiny_cfg(strategy: Strategy) -> MapperConfig {
        MapperConfig {
            strategy,
            d_in: 3,
            pos_dim: 4,
            width: 8,
            heads: 2,
            depth: 1,
            d_mot: 5,
            tie_streams: false,
        }
    }

    fn rand_feat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::rand_normal(&[rows, cols], &mut rng)
    }

    fn run(mapper: &MotionMapper, s1: &Tensor, s2: &Tensor) -> Tensor {
        mapper.apply(s1, s2).unwrap().c_mot
    }

    #[test]
    fn add_swap_is_bitwise_invariant() {
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Add), 1);
        for i in 0..200 {
            let s1 = rand_feat(4, 3, 100 + i);
            let s2 = rand_feat(4, 3, 900 + i);
            assert_eq!(run(&mapper, &s1, &s2), run(&mapper, &s2, &s1));
        }
    }

    #[test]
    fn add_with_silent_partner_reduces_to_projection() {
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Add), 2);
        let s1 = rand_feat(5, 3, 7);
        let zero = Tensor::zeros(&[5, 3]);
        // a silent partner contributes nothing, in either slot
        assert_eq!(run(&mapper, &s1, &zero), run(&mapper, &zero, &s1));
        // and splitting the signal across both slots is the same projection
        let direct = run(&mapper, &s1, &zero);
        let doubled_half = run(&mapper, &s1.scale(0.5), &s1.scale(0.5));
        for (a, b) in direct.data.iter().zip(&doubled_half.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_swap_differs_with_generic_weights() {
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Concat), 3);
        let s1 = rand_feat(4, 3, 11);
        let s2 = rand_feat(4, 3, 12);
        let d: f64 = run(&mapper, &s1, &s2)
            .data
            .iter()
            .zip(&run(&mapper, &s2, &s1).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d > 1e-6, "swap changed nothing: {d}");
    }

    #[test]
    fn concat_zero_inputs_broadcasts_the_bias_path() {
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Concat), 4);
        let out = run(&mapper, &Tensor::zeros(&[6, 3]), &Tensor::zeros(&[6, 3]));
        for r in 1..6 {
            assert_eq!(out.row(r), out.row(0), "row {r} differs from row 0");
        }
    }

    #[test]
    fn dual_requires_video_hidden_at_op_level() {
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Dual), 5);
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &mapper.store);
        let a = tape.constant(rand_feat(3, 8, 1));
        let b = tape.constant(rand_feat(3, 8, 2));
        let err = map_dual_attention(&p, "dual", a, b, None, 2).unwrap_err();
        assert!(err.to_string().contains("video hidden"));
    }

    #[test]
    fn dual_singleton_matches_hand_oracle() {
        // one token per stream: softmax over one key is 1, so each branch
        // returns o(v(in_j)), and the op returns their sum
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Dual), 6);
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &mapper.store);
        let in1 = tape.constant(rand_feat(1, 8, 21));
        let in2 = tape.constant(rand_feat(1, 8, 22));
        let q = tape.constant(rand_feat(1, 8, 23));
        let got = map_dual_attention(&p, "dual", in1, in2, Some(q), 2).unwrap();

        let lin = |name: &str, x: &Tensor| -> Tensor {
            let w = mapper.store.get(&format!("{name}.w")).unwrap();
            let b = mapper.store.get(&format!("{name}.b")).unwrap();
            x.matmul(w).unwrap().add(b).unwrap()
        };
        let branch = |att: &str, x: &Tensor| -> Tensor {
            lin(&format!("{att}.o"), &lin(&format!("{att}.v"), x))
        };
        let want = branch("dual.att1", &in1.value())
            .add(&branch("dual.att2", &in2.value()))
            .unwrap();
        for (a, b) in got.value().data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dual_identical_streams_with_tied_weights_doubles_one_branch() {
        let mut mapper = MotionMapper::init(tiny_cfg(Strategy::Dual), 7);
        // tie att2 to att1
        for part in ["q", "k", "v", "o"] {
            for piece in ["w", "b"] {
                let src = mapper
                    .store
                    .get(&format!("dual.att1.{part}.{piece}"))
                    .unwrap()
                    .clone();
                mapper.store.insert(format!("dual.att2.{part}.{piece}"), src);
            }
        }
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &mapper.store);
        let s = tape.constant(rand_feat(4, 8, 31));
        let q = tape.constant(rand_feat(4, 8, 32));
        let both = map_dual_attention(&p, "dual", s, s, Some(q), 2).unwrap();
        let single = multi_head_attention(&p, "dual.att1", q, s, 2, None);
        let m: f64 = both
            .value()
            .data
            .iter()
            .zip(&single.value().scale(2.0).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(m < 1e-12, "max diff {m}");
    }

    #[test]
    fn joint_tied_branches_swap_with_streams() {
        let cfg = MapperConfig {
            tie_streams: true,
            ..tiny_cfg(Strategy::Joint)
        };
        let mapper = MotionMapper::init(cfg, 8);
        let s1 = rand_feat(4, 3, 41);
        let s2 = rand_feat(4, 3, 42);

        let tape = Tape::new();
        let p = TapeParams::new(&tape, &mapper.store);
        let (a1, a2) = mapper
            .joint_branches(&p, tape.constant(s1.clone()), tape.constant(s2.clone()))
            .unwrap();
        let (b1, b2) = mapper
            .joint_branches(&p, tape.constant(s2), tape.constant(s1))
            .unwrap();
        // mathematically exact; summation order inside softmax rows shifts,
        // so compare to rounding noise rather than bitwise
        let pairs = [(a1, b2), (a2, b1)];
        for (x, y) in pairs {
            let m: f64 = x
                .value()
                .data
                .iter()
                .zip(&y.value().data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(m < 1e-12, "branch outputs failed to swap: {m}");
        }
    }

    #[test]
    fn joint_untied_is_swap_sensitive_and_cross_stream_sensitive() {
        let mapper = MotionMapper::init(tiny_cfg(Strategy::Joint), 9);
        let s1 = rand_feat(4, 3, 51);
        let s2 = rand_feat(4, 3, 52);
        let base = run(&mapper, &s1, &s2);
        let swapped = run(&mapper, &s2, &s1);
        let m: f64 = base
            .data
            .iter()
            .zip(&swapped.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(m > 1e-6, "untied joint was swap invariant");

        // perturb one token of s2 and watch every output row move
        let mut s2_pert = s2.clone();
        s2_pert.set(2, 1, s2_pert.at(2, 1) + 0.5);
        let pert = run(&mapper, &s1, &s2_pert);
        let dmax: f64 = base
            .data
            .iter()
            .zip(&pert.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dmax > 0.0, "no cross-stream sensitivity");
    }

    #[test]
    fn all_strategies_pass_gradient_checks() {
        for (i, strategy) in [Strategy::Add, Strategy::Concat, Strategy::Dual, Strategy::Joint]
            .into_iter()
            .enumerate()
        {
            let mapper = MotionMapper::init(tiny_cfg(strategy), 60 + i as u64);
            let s1 = rand_feat(3, 3, 61);
            let s2 = rand_feat(3, 3, 62);
            let report = grad_check_params(
                &mapper.store,
                |p| {
                    let a = p.tape().constant(s1.clone());
                    let b = p.tape().constant(s2.clone());
                    mapper.forward(p, a, b, None).unwrap().sq_norm_per_row().mean_all()
                },
                GRAD_CHECK_EPS,
            )
            .unwrap();
            assert!(
                report.max_rel_err < GRAD_CHECK_TOL,
                "{}: max rel err {} at {}[{}]",
                strategy.name(),
                report.max_rel_err,
                report.worst_param,
                report.worst_elem
            );
        }
    }

    fn train_corpus() -> Vec<DialogueSample> {
        synth_corpus(&CorpusConfig {
            n_samples: 8,
            n_identities: 4,
            tokens_per_sample: 120,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_and_add_respects_the_floor() {
        let samples = train_corpus();
        let cfg = CorpusConfig {
            n_samples: 8,
            n_identities: 4,
            tokens_per_sample: 120,
            ..CorpusConfig::default()
        };
        let codebook = cfg.codebook();
        let opts = TrainOpts {
            epochs: 2,
            steps_per_epoch: 15,
            batch_pairs: 2,
            ..TrainOpts::default()
        };
        let (_, r1) = train_mapper(
            MapperConfig::with_strategy(Strategy::Add),
            &samples,
            &codebook,
            &opts,
            77,
        )
        .unwrap();
        let (_, r2) = train_mapper(
            MapperConfig::with_strategy(Strategy::Add),
            &samples,
            &codebook,
            &opts,
            77,
        )
        .unwrap();
        assert_eq!(r1, r2, "same seed must give identical curves");
        assert!(r1.val_mse.iter().all(|v| v.is_finite()));
        // the parallelogram bound is mathematically hard: no swap-invariant
        // predictor can beat it on the swap-augmented validation set
        for &v in &r1.val_mse {
            assert!(
                v + 1e-12 >= r1.symmetric_floor,
                "add val MSE {v} beat the symmetric floor {}",
                r1.symmetric_floor
            );
        }
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        let cfg = CorpusConfig::default();
        let e = train_mapper(
            MapperConfig::default(),
            &[],
            &cfg.codebook(),
            &TrainOpts::default(),
            1,
        )
        .unwrap_err();
        assert!(e.to_string().contains("empty"));
    }
}
