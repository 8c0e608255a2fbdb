//! Latent video diffusion: noise schedule, conditional ε-prediction network,
//! training loss, and iterative samplers.
//!
//! The "latents" here are the synthetic 24-dim motion tracks themselves
//! (6 pose + 18 expression dims), standing in for VAE video latents. The
//! denoiser is conditioned on reference spatial features and previous-frame
//! context (cross-attention), token-rate motion features (cross-attention at
//! 2 tokens per frame), and a face embedding (modulated layer norm), with
//! per-signal learned null embeddings so classifier-free guidance falls out
//! of condition dropout at training time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::consts::{
    FACE_EMBED_DIM, LATENT_DIM, MOTION_CONTEXT_FRAMES, MOTION_FEATURE_DIM, REF_SHAPE, VIDEO_FPS,
    WINDOW_FRAMES,
};
use crate::data::codebook::Codebook;
use crate::data::synth::{DialogueSample, SyntheticIdentity};
use crate::error::{Error, Result};
use crate::motion::MotionMapper;
use crate::nn::{
    dsln, layer_norm, linear, multi_head_attention, positional_encoding, sinusoidal_embedding,
    Adam, ParamStore, TapeParams,
};
use crate::rng::{rng_from_seed, split_seed_labeled};
use crate::tensor::Tensor;

pub const DEFAULT_T_STEPS: usize = 100;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

/// Forward-process schedule: β_t per step plus the cumulative ᾱ_t products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(Error::input("noise schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0 < **b && **b < 1.0)) {
            return Err(Error::input(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        debug_assert!(alpha_bars.windows(2).all(|w| w[1] < w[0]));
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    /// Linear β ramp (1e-4 → 2e-2), the conventional toy default.
    pub fn linear(t_steps: usize) -> NoiseSchedule {
        assert!(t_steps >= 1, "schedule needs at least one step");
        let betas = (0..t_steps)
            .map(|t| {
                if t_steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * t as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_betas(betas).expect("linear betas are always valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// ᾱ_{t−1}, with ᾱ_{−1} = 1 so the last sampling step lands on clean data.
    pub fn prev_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::input(format!(
                "timestep {t} outside schedule of {} steps",
                self.len()
            )));
        }
        Ok(())
    }
}

/// z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if z0.shape != eps.shape {
        return Err(Error::input(format!(
            "latent/noise shape mismatch: {:?} vs {:?}",
            z0.shape, eps.shape
        )));
    }
    let ab = sched.alpha_bars[t];
    z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

/// Exact algebraic inverse of `add_noise` given the same (t, ε).
pub fn recover_z0(z_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if z_t.shape != eps.shape {
        return Err(Error::input(format!(
            "latent/noise shape mismatch: {:?} vs {:?}",
            z_t.shape, eps.shape
        )));
    }
    let ab = sched.alpha_bars[t];
    Ok(z_t
        .sub(&eps.scale((1.0 - ab).sqrt()))?
        .scale(1.0 / ab.sqrt()))
}

/// A generated (or ground-truth) latent video: F frames × d_z dims at 25 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    pub z: Tensor,
    pub fps: usize,
}

impl VideoLatent {
    pub fn new(z: Tensor) -> Result<VideoLatent> {
        if z.rows() == 0 {
            return Err(Error::input("video latent needs at least one frame"));
        }
        if !z.is_finite() {
            return Err(Error::non_finite("video latent"));
        }
        Ok(VideoLatent { z, fps: VIDEO_FPS })
    }

    pub fn frames(&self) -> usize {
        self.z.rows()
    }
}

/// The guidance set: reference spatial features, face embedding, token-rate
/// motion features, and the trailing latent frames from the previous window.
/// Presence flags drive null-embedding substitution; the face embedding is
/// always applied (it has no dropout path).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet {
    /// Flattened spatial reference features, ref_tokens × ref_dim.
    pub c_ref: Tensor,
    /// Face embedding, one row.
    pub c_face: Tensor,
    /// Motion features, 2 rows per video frame of the window.
    pub c_mot: Tensor,
    /// Last K latent frames preceding the window (zero rows before t=0).
    pub motion_frames: Tensor,
    pub ref_present: bool,
    pub mot_present: bool,
    pub prev_present: bool,
}

impl ConditioningSet {
    pub fn new(c_ref: Tensor, c_face: Tensor, c_mot: Tensor, motion_frames: Tensor) -> ConditioningSet {
        ConditioningSet {
            c_ref,
            c_face,
            c_mot,
            motion_frames,
            ref_present: true,
            mot_present: true,
            prev_present: true,
        }
    }

    /// Standard conditioning for a synthetic identity: spatial reference grid
    /// flattened to (h·w) × c tokens.
    pub fn for_identity(
        identity: &SyntheticIdentity,
        c_mot: Tensor,
        motion_frames: Tensor,
    ) -> Result<ConditioningSet> {
        let c_ref = identity
            .ref_features
            .reshape(&[REF_SHAPE[0] * REF_SHAPE[1], REF_SHAPE[2]])?;
        Ok(ConditioningSet::new(
            c_ref,
            identity.face_embedding.clone(),
            c_mot,
            motion_frames,
        ))
    }

    /// Fully dropped variant used for the unconditional guidance branch.
    pub fn uncond(&self) -> ConditioningSet {
        ConditioningSet {
            ref_present: false,
            mot_present: false,
            prev_present: false,
            ..self.clone()
        }
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> ConditioningVars<'t> {
        ConditioningVars {
            c_ref: tape.constant(self.c_ref.clone()),
            c_face: tape.constant(self.c_face.clone()),
            c_mot: tape.constant(self.c_mot.clone()),
            motion_frames: tape.constant(self.motion_frames.clone()),
            ref_present: self.ref_present,
            mot_present: self.mot_present,
            prev_present: self.prev_present,
        }
    }
}

/// Graph-side conditioning; `c_mot` may carry gradients back into a mapper.
#[derive(Clone, Copy)]
pub struct ConditioningVars<'t> {
    pub c_ref: Var<'t>,
    pub c_face: Var<'t>,
    pub c_mot: Var<'t>,
    pub motion_frames: Var<'t>,
    pub ref_present: bool,
    pub mot_present: bool,
    pub prev_present: bool,
}

impl<'t> ConditioningVars<'t> {
    pub fn uncond(self) -> ConditioningVars<'t> {
        ConditioningVars {
            ref_present: false,
            mot_present: false,
            prev_present: false,
            ..self
        }
    }

    pub fn condition_dropout(self, p: f64, rng: &mut impl Rng) -> Result<ConditioningVars<'t>> {
        let [dr, dm, dp] = draw_drop_flags(p, rng)?;
        Ok(ConditioningVars {
            ref_present: self.ref_present && !dr,
            mot_present: self.mot_present && !dm,
            prev_present: self.prev_present && !dp,
            ..self
        })
    }
}

/// One draw per droppable element, fixed order (ref, mot, prev).
fn draw_drop_flags(p: f64, rng: &mut impl Rng) -> Result<[bool; 3]> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::input(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok([rng.gen_bool(p), rng.gen_bool(p), rng.gen_bool(p)])
}

/// Independently replace each of {reference, motion features, motion frames}
/// by its learned null embedding with probability p (flag flip only; the
/// substitution happens inside the network).
pub fn condition_dropout(
    c: &ConditioningSet,
    p: f64,
    rng: &mut impl Rng,
) -> Result<ConditioningSet> {
    let [dr, dm, dp] = draw_drop_flags(p, rng)?;
    Ok(ConditioningSet {
        ref_present: c.ref_present && !dr,
        mot_present: c.mot_present && !dm,
        prev_present: c.prev_present && !dp,
        ..c.clone()
    })
}

/// Anything that predicts ε from (z_t, t, C). Tests inject closed-form
/// oracles; the real network is `VisualDenoiser`.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;
    fn store(&self) -> &ParamStore;
    fn predict<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        z_t: Var<'t>,
        t: usize,
        cond: &ConditioningVars<'t>,
    ) -> Result<Var<'t>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_z: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_mot: usize,
    pub d_face: usize,
    pub ref_tokens: usize,
    pub ref_dim: usize,
    pub k_prev: usize,
    /// Self-attention across the frame axis; off = purely per-frame model.
    pub temporal_attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_z: LATENT_DIM,
            width: 64,
            heads: 4,
            depth: 2,
            d_mot: MOTION_FEATURE_DIM,
            d_face: FACE_EMBED_DIM,
            ref_tokens: REF_SHAPE[0] * REF_SHAPE[1],
            ref_dim: REF_SHAPE[2],
            k_prev: MOTION_CONTEXT_FRAMES,
            temporal_attention: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VisualDenoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
}

impl VisualDenoiser {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> VisualDenoiser {
        let mut store = ParamStore::default();
        let s = |label: &str| split_seed_labeled(seed, label);
        store.init_linear("in", cfg.d_z, cfg.width, s("in"));
        store.init_linear("ctx.ref", cfg.ref_dim, cfg.width, s("ctx.ref"));
        store.init_linear("ctx.mot", cfg.d_mot, cfg.width, s("ctx.mot"));
        store.init_linear("ctx.prev", cfg.d_z, cfg.width, s("ctx.prev"));
        for (name, dim) in [
            ("null.ref", cfg.ref_dim),
            ("null.mot", cfg.d_mot),
            ("null.prev", cfg.d_z),
        ] {
            let mut rng = rng_from_seed(s(name));
            store.insert(name, Tensor::rand_normal(&[1, dim], &mut rng).scale(0.1));
        }
        for k in 0..cfg.depth {
            store.init_dsln(&format!("blk{k}.face"), cfg.d_face, cfg.width);
            store.init_attention(&format!("blk{k}.ref"), cfg.width, s(&format!("blk{k}.ref")));
            store.init_attention(&format!("blk{k}.mot"), cfg.width, s(&format!("blk{k}.mot")));
            store.init_attention(&format!("blk{k}.tmp"), cfg.width, s(&format!("blk{k}.tmp")));
            store.init_linear(&format!("blk{k}.m1"), cfg.width, 2 * cfg.width, s(&format!("blk{k}.m1")));
            store.init_linear(&format!("blk{k}.m2"), 2 * cfg.width, cfg.width, s(&format!("blk{k}.m2")));
        }
        store.init_layer_norm("out.norm", cfg.width);
        store.init_linear("out", cfg.width, cfg.d_z, s("out"));
        VisualDenoiser { cfg, store }
    }

    fn check_cond(&self, frames: usize, cond: &ConditioningVars<'_>) -> Result<()> {
        // compare through the 2-D view so [d] and [1, d] both pass
        let want = |what: &str, got: &[usize], rows: usize, cols: usize| -> Result<()> {
            if view_dims(got) != (rows, cols) {
                return Err(Error::input(format!(
                    "{what} shape {got:?} does not view as {rows}×{cols}"
                )));
            }
            Ok(())
        };
        want("reference features", &cond.c_ref.shape(), self.cfg.ref_tokens, self.cfg.ref_dim)?;
        want("face embedding", &cond.c_face.shape(), 1, self.cfg.d_face)?;
        want("motion features", &cond.c_mot.shape(), 2 * frames, self.cfg.d_mot)?;
        if self.cfg.k_prev > 0 {
            want("motion frames", &cond.motion_frames.shape(), self.cfg.k_prev, self.cfg.d_z)?;
        }
        Ok(())
    }

    fn broadcast_null<'t>(&self, p: &TapeParams<'t, '_>, name: &str, rows: usize) -> Var<'t> {
        let ones = p.tape().constant(Tensor::filled(&[rows, 1], 1.0));
        ones.matmul(p.get(name))
    }
}

/// Number of (rows, cols) under the 2-D matrix view of a shape.
fn view_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl NoisePredictor for VisualDenoiser {
    fn latent_dim(&self) -> usize {
        self.cfg.d_z
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn predict<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        z_t: Var<'t>,
        t: usize,
        cond: &ConditioningVars<'t>,
    ) -> Result<Var<'t>> {
        let frames = z_t.value().rows();
        let (_, zc) = view_dims(&z_t.shape());
        if zc != self.cfg.d_z || frames == 0 {
            return Err(Error::input(format!(
                "latent shape {:?} does not match d_z {}",
                z_t.shape(),
                self.cfg.d_z
            )));
        }
        self.check_cond(frames, cond)?;

        let ref_raw = if cond.ref_present {
            cond.c_ref
        } else {
            self.broadcast_null(p, "null.ref", self.cfg.ref_tokens)
        };
        let mot_raw = if cond.mot_present {
            cond.c_mot
        } else {
            self.broadcast_null(p, "null.mot", 2 * frames)
        };
        let mut ctx_r = linear(p, "ctx.ref", ref_raw);
        if self.cfg.k_prev > 0 {
            let prev_raw = if cond.prev_present {
                cond.motion_frames
            } else {
                self.broadcast_null(p, "null.prev", self.cfg.k_prev)
            };
            ctx_r = ctx_r.concat_rows(linear(p, "ctx.prev", prev_raw));
        }
        let ctx_m = linear(p, "ctx.mot", mot_raw);

        let t_emb = p.tape().constant(sinusoidal_embedding(t as f64, self.cfg.width));
        let mut h = linear(p, "in", z_t).add_row(t_emb);
        for k in 0..self.cfg.depth {
            h = dsln(p, &format!("blk{k}.face"), h, cond.c_face);
            h = h.add(multi_head_attention(p, &format!("blk{k}.ref"), h, ctx_r, self.cfg.heads, None));
            h = h.add(multi_head_attention(p, &format!("blk{k}.mot"), h, ctx_m, self.cfg.heads, None));
            if self.cfg.temporal_attention {
                // frame positions enter only here, so the temporal path is the
                // sole order-sensitive component of the network
                let pos = p.tape().constant(positional_encoding(frames, self.cfg.width));
                let hp = h.add(pos);
                h = h.add(multi_head_attention(p, &format!("blk{k}.tmp"), hp, hp, self.cfg.heads, None));
            }
            let m = linear(p, &format!("blk{k}.m1"), h).silu();
            h = h.add(linear(p, &format!("blk{k}.m2"), m));
        }
        Ok(linear(p, "out", layer_norm(p, "out.norm", h)))
    }
}

/// eps_uncond + scale·(eps_cond − eps_uncond), with the scale ∈ {0, 1}
/// endpoints returned exactly (no floating-point detour).
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.shape != eps_uncond.shape {
        return Err(Error::input(format!(
            "guidance shape mismatch: {:?} vs {:?}",
            eps_cond.shape, eps_uncond.shape
        )));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(scale))
}

/// One training example: a clean latent window plus its guidance set.
#[derive(Debug, Clone)]
pub struct VisualBatchItem {
    pub z0: Tensor,
    pub cond: ConditioningSet,
}

/// Diffusion loss as a graph node: per item draw t ~ U[0,T), ε ~ N(0,I),
/// then ‖ε − ε̂(z_t, t, C)‖²/F, averaged over the batch. Per-frame
/// normalization makes the ε̂ ≡ 0 expectation equal d_z.
pub fn visual_loss_var<'t, M: NoisePredictor>(
    model: &M,
    p: &TapeParams<'t, '_>,
    items: &[(Tensor, ConditioningVars<'t>)],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    if items.is_empty() {
        return Err(Error::input("visual loss over an empty batch"));
    }
    let mut total: Option<Var> = None;
    for (z0, cond) in items {
        let frames = z0.rows();
        let t = rng.gen_range(0..sched.len());
        let eps = Tensor::rand_normal(&z0.shape, rng);
        let z_t = add_noise(z0, t, &eps, sched)?;
        let ehat = model.predict(p, p.tape().constant(z_t), t, cond)?;
        let d = ehat.sub(p.tape().constant(eps));
        let term = d.mul(d).sum_all().scale(1.0 / frames as f64);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term),
        });
    }
    Ok(total.unwrap().scale(1.0 / items.len() as f64))
}

/// Plain-number wrapper over `visual_loss_var`.
pub fn visual_loss<M: NoisePredictor>(
    model: &M,
    items: &[VisualBatchItem],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let p = TapeParams::new(&tape, model.store());
    let lifted: Vec<(Tensor, ConditioningVars)> = items
        .iter()
        .map(|it| (it.z0.clone(), it.cond.vars(&tape)))
        .collect();
    Ok(visual_loss_var(model, &p, &lifted, sched, rng)?.value().data()[0])
}

/// Uniformly sample a contiguous F-frame window and the aligned token-rate
/// motion slice (2 rows per frame). Returns (latent window, motion slice,
/// start frame).
pub fn sample_window(
    latents: &Tensor,
    c_mot: &Tensor,
    frames: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor, usize)> {
    let total = latents.rows();
    if total < frames {
        return Err(Error::input(format!(
            "video of {total} frames is shorter than the {frames}-frame window"
        )));
    }
    if c_mot.rows() != 2 * total {
        return Err(Error::input(format!(
            "motion features have {} rows, want 2 per frame = {}",
            c_mot.rows(),
            2 * total
        )));
    }
    let start = rng.gen_range(0..=total - frames);
    Ok((
        latents.slice_rows(start, frames)?,
        c_mot.slice_rows(2 * start, 2 * frames)?,
        start,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral sampling with posterior noise.
    Ddpm,
    /// Deterministic probability-flow variant (η = 0).
    Ddim,
}

/// Iteratively denoise from pure noise under classifier-free guidance.
/// Deterministic given the rng seed; `scale == 1` never evaluates the
/// unconditional branch, so it is bit-identical to conditional-only sampling.
pub fn sample_video<M: NoisePredictor>(
    model: &M,
    cond: &ConditioningSet,
    frames: usize,
    sched: &NoiseSchedule,
    scale: f64,
    kind: SamplerKind,
    rng: &mut impl Rng,
) -> Result<VideoLatent> {
    if frames == 0 {
        return Err(Error::input("cannot sample a zero-frame video"));
    }
    let d_z = model.latent_dim();
    let mut z = Tensor::rand_normal(&[frames, d_z], rng);
    for t in (0..sched.len()).rev() {
        let eps = {
            let tape = Tape::new();
            let p = TapeParams::new(&tape, model.store());
            let cvars = cond.vars(&tape);
            let zc = tape.constant(z.clone());
            let eps_c = model.predict(&p, zc, t, &cvars)?.value();
            if scale == 1.0 {
                eps_c
            } else {
                let eps_u = model.predict(&p, zc, t, &cvars.uncond())?.value();
                cfg_combine(&eps_c, &eps_u, scale)?
            }
        };
        if !eps.is_finite() {
            return Err(Error::non_finite(format!("noise prediction at step t={t}")));
        }
        let ab = sched.alpha_bars[t];
        let ab_prev = sched.prev_alpha_bar(t);
        z = match kind {
            SamplerKind::Ddpm => {
                let beta = sched.betas[t];
                let mean = z
                    .sub(&eps.scale(beta / (1.0 - ab).sqrt()))?
                    .scale(1.0 / sched.alphas[t].sqrt());
                if t > 0 {
                    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                    let w = Tensor::rand_normal(&[frames, d_z], rng);
                    mean.add(&w.scale(sigma))?
                } else {
                    mean
                }
            }
            SamplerKind::Ddim => {
                let z0_hat = recover_z0(&z, t, &eps, sched)?;
                z0_hat
                    .scale(ab_prev.sqrt())
                    .add(&eps.scale((1.0 - ab_prev).sqrt()))?
            }
        };
        if !z.is_finite() {
            return Err(Error::non_finite(format!("latent update at step t={t}")));
        }
    }
    VideoLatent::new(z)
}

/// Zero-padded trailing context: the K latent frames before `start`.
pub fn prev_context(motion: &Tensor, start: usize, k: usize) -> Tensor {
    let d = motion.cols();
    let mut out = Tensor::zeros(&[k, d]);
    for i in 0..k {
        let src = start as i64 - k as i64 + i as i64;
        if src >= 0 {
            for c in 0..d {
                out.set(i, c, motion.at(src as usize, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub window_frames: usize,
    pub t_steps: usize,
    pub lr: f64,
    pub dropout_p: f64,
    /// Denoiser parameter prefixes that stay trainable; None = everything.
    pub denoiser_unfrozen: Option<Vec<String>>,
    pub mapper_unfrozen: bool,
}

impl Default for VisualTrainOpts {
    fn default() -> Self {
        VisualTrainOpts {
            steps: 150,
            batch: 2,
            window_frames: WINDOW_FRAMES,
            t_steps: DEFAULT_T_STEPS,
            lr: 1e-3,
            dropout_p: 0.05,
            denoiser_unfrozen: None,
            mapper_unfrozen: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTrainReport {
    pub loss_curve: Vec<f64>,
}

/// Joint training of the denoiser and the motion mapper on ground-truth
/// motion windows. The mapper runs over the full token streams and its
/// output is sliced to the sampled window, so gradients reach it through the
/// diffusion loss; freeze lists are honored per parameter name prefix.
pub fn train_visual(
    denoiser: &mut VisualDenoiser,
    mapper: &mut MotionMapper,
    samples: &[DialogueSample],
    codebook: &Codebook,
    opts: &VisualTrainOpts,
    seed: u64,
) -> Result<VisualTrainReport> {
    if samples.is_empty() {
        return Err(Error::input("cannot train the visual stage on an empty corpus"));
    }
    if opts.window_frames == 0 {
        return Err(Error::input("window_frames must be positive"));
    }
    for s in samples {
        if s.motion[0].rows() < opts.window_frames {
            return Err(Error::input(format!(
                "sample {} has {} frames, shorter than the {}-frame window",
                s.id,
                s.motion[0].rows(),
                opts.window_frames
            )));
        }
    }
    let feats: Vec<[Tensor; 2]> = samples
        .iter()
        .map(|s| {
            Ok([
                codebook.dequantize(&s.streams.s1)?,
                codebook.dequantize(&s.streams.s2)?,
            ])
        })
        .collect::<Result<_>>()?;

    let den_trainable = |name: &str| -> bool {
        match &opts.denoiser_unfrozen {
            None => true,
            Some(prefixes) => prefixes.iter().any(|p| name.starts_with(p.as_str())),
        }
    };

    let sched = NoiseSchedule::linear(opts.t_steps);
    let mut opt_den = Adam::new(opts.lr);
    let mut opt_map = Adam::new(opts.lr);
    let mut rng = rng_from_seed(split_seed_labeled(seed, "visual-train"));
    let mut curve = Vec::with_capacity(opts.steps);

    for _step in 0..opts.steps {
        let tape = Tape::new();
        let p_den = TapeParams::new(&tape, &denoiser.store);
        let p_map = TapeParams::new(&tape, &mapper.store);
        let mut items = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let i = rng.gen_range(0..samples.len());
            let role = rng.gen_range(0..2usize);
            let track = &samples[i].motion[role];
            let start = rng.gen_range(0..=track.rows() - opts.window_frames);
            let z0 = track.slice_rows(start, opts.window_frames)?;

            let sf = tape.constant(feats[i][role].clone());
            let of = tape.constant(feats[i][1 - role].clone());
            let c_mot_full = mapper.forward(&p_map, sf, of, None)?;
            let c_mot = c_mot_full.slice_rows(2 * start, 2 * opts.window_frames);

            let prev = prev_context(track, start, denoiser.cfg.k_prev);
            let base = ConditioningSet::for_identity(&samples[i].identities[role], Tensor::zeros(&[1, 1]), prev)?;
            let mut cvars = base.vars(&tape);
            cvars.c_mot = c_mot;
            let cvars = cvars.condition_dropout(opts.dropout_p, &mut rng)?;
            items.push((z0, cvars));
        }
        let loss = visual_loss_var(denoiser, &p_den, &items, &sched, &mut rng)?;
        let lv = loss.value().data()[0];
        if !lv.is_finite() {
            return Err(Error::non_finite(format!("visual training loss at step {_step}")));
        }
        curve.push(lv);
        let grads = tape.backward(loss);
        let gd = p_den.grads(&grads);
        let gm = p_map.grads(&grads);
        opt_den.step(&mut denoiser.store, &gd, &den_trainable);
        if opts.mapper_unfrozen {
            opt_map.step(&mut mapper.store, &gm, |_| true);
        }
    }
    Ok(VisualTrainReport { loss_curve: curve })
}
