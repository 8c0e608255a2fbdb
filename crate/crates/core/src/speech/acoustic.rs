//! Flow-matching acoustic model: a vector field v(y_t, t | S, e_spk) trained
//! so that straight-line interpolants y_t = (1−t)·y0 + t·y1 flow from the
//! standard-normal prior to the mixed mel. The field is pointwise per frame —
//! each mel frame is determined by the token pair at that step plus the
//! speaker pair — with the speaker channel entering through DSLN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::consts::{N_MELS, SPEAKER_EMBED_DIM, VOCAB_SIZE};
use crate::data::{DialogueSample, TokenStreams};
use crate::error::{Error, Result};
use crate::nn::{dsln, layer_norm, linear, sinusoidal_embedding, Adam, ParamStore, TapeParams};
use crate::rng::{rng_from_seed, split_seed_labeled};
use crate::tensor::Tensor;
use crate::visual::cfg_combine;

/// Conditioning for one dialogue: aligned token streams plus the two speaker
/// embeddings concatenated into a single row (speaker 1 first).
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticCond {
    pub streams: TokenStreams,
    pub e_spk: Tensor,
}

impl AcousticCond {
    pub fn new(streams: TokenStreams, e_spk1: &Tensor, e_spk2: &Tensor) -> Result<AcousticCond> {
        streams.validate()?;
        let mut row = Vec::with_capacity(2 * SPEAKER_EMBED_DIM);
        for (who, e) in [("speaker 1", e_spk1), ("speaker 2", e_spk2)] {
            if e.len() != SPEAKER_EMBED_DIM {
                return Err(Error::input(format!(
                    "{who} embedding has {} values, expected {SPEAKER_EMBED_DIM}",
                    e.len()
                )));
            }
            row.extend_from_slice(e.data());
        }
        let e_spk = Tensor::new(vec![1, 2 * SPEAKER_EMBED_DIM], row)?;
        Ok(AcousticCond { streams, e_spk })
    }

    pub fn from_sample(sample: &DialogueSample) -> Result<AcousticCond> {
        AcousticCond::new(
            sample.streams.clone(),
            &sample.identities[0].speaker_embedding,
            &sample.identities[1].speaker_embedding,
        )
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.len() == 0
    }

    /// The same dialogue voiced by the swapped identity pair.
    pub fn with_swapped_speakers(&self) -> AcousticCond {
        let d = SPEAKER_EMBED_DIM;
        let mut row = self.e_spk.data()[d..2 * d].to_vec();
        row.extend_from_slice(&self.e_spk.data()[..d]);
        AcousticCond {
            streams: self.streams.clone(),
            e_spk: Tensor::new(vec![1, 2 * d], row).unwrap(),
        }
    }
}

/// Anything that can serve as the velocity field of the probability flow;
/// `cond = None` is the unconditional branch used for dropout and guidance.
pub trait FlowField {
    fn n_mels(&self) -> usize;
    fn store(&self) -> &ParamStore;
    fn field<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        y_t: Var<'t>,
        t: f64,
        cond: Option<&AcousticCond>,
    ) -> Result<Var<'t>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub n_mels: usize,
    pub vocab: usize,
    pub width: usize,
    pub depth: usize,
    /// Width of the speaker conditioning row: both embeddings concatenated.
    pub d_spk: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        AcousticConfig {
            n_mels: N_MELS,
            vocab: VOCAB_SIZE,
            width: 64,
            depth: 2,
            d_spk: 2 * SPEAKER_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub store: ParamStore,
}

impl AcousticModel {
    pub fn init(cfg: AcousticConfig, seed: u64) -> AcousticModel {
        let mut store = ParamStore::default();
        let s = |label: &str| split_seed_labeled(seed, label);
        let w = cfg.width;
        store.init_linear("in", cfg.n_mels, w, s("in"));
        store.init_embedding("emb1", cfg.vocab, w, s("emb1"));
        store.init_embedding("emb2", cfg.vocab, w, s("emb2"));
        store.insert(
            "null.tok",
            Tensor::rand_normal(&[1, w], &mut rng_from_seed(s("null.tok"))).scale(0.1),
        );
        store.insert(
            "null.spk",
            Tensor::rand_normal(&[1, cfg.d_spk], &mut rng_from_seed(s("null.spk"))).scale(0.1),
        );
        for k in 0..cfg.depth {
            let b = format!("blk{k}");
            store.init_dsln(&format!("{b}.norm"), cfg.d_spk, w);
            store.init_linear(&format!("{b}.m1"), w, 2 * w, s(&format!("{b}.m1")));
            store.init_linear(&format!("{b}.m2"), 2 * w, w, s(&format!("{b}.m2")));
        }
        store.init_layer_norm("out.norm", w);
        store.init_linear("out", w, cfg.n_mels, s("out"));
        AcousticModel { cfg, store }
    }
}

impl FlowField for AcousticModel {
    fn n_mels(&self) -> usize {
        self.cfg.n_mels
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn field<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        y_t: Var<'t>,
        t: f64,
        cond: Option<&AcousticCond>,
    ) -> Result<Var<'t>> {
        let shape = y_t.value().shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.n_mels {
            return Err(Error::input(format!(
                "acoustic state must be T x {}, got {shape:?}",
                self.cfg.n_mels
            )));
        }
        let frames = shape[0];
        let tape = p.tape();
        let ones = tape.constant(Tensor::filled(&[frames, 1], 1.0));
        let (tok, spk) = match cond {
            Some(c) => {
                if c.len() != frames {
                    return Err(Error::input(format!(
                        "conditioning covers {} token steps but the state has {frames} frames",
                        c.len()
                    )));
                }
                if c.e_spk.len() != self.cfg.d_spk {
                    return Err(Error::input(format!(
                        "speaker row has {} values, model expects {}",
                        c.e_spk.len(),
                        self.cfg.d_spk
                    )));
                }
                for s in [&c.streams.s1, &c.streams.s2] {
                    if let Some(&bad) = s.iter().find(|&&x| (x as usize) >= self.cfg.vocab) {
                        return Err(Error::input(format!(
                            "token {bad} outside model vocab of {}",
                            self.cfg.vocab
                        )));
                    }
                }
                let ids = |s: &[u32]| s.iter().map(|&x| x as usize).collect::<Vec<_>>();
                let tok = p
                    .get("emb1")
                    .embed_rows(&ids(&c.streams.s1))
                    .add(p.get("emb2").embed_rows(&ids(&c.streams.s2)));
                (tok, tape.constant(c.e_spk.clone()))
            }
            None => (ones.matmul(p.get("null.tok")), p.get("null.spk")),
        };
        // flow time lives in [0,1]; stretch before the sinusoid bank so
        // nearby t values stay distinguishable
        let time = tape.constant(sinusoidal_embedding(100.0 * t, self.cfg.width));
        let mut h = linear(p, "in", y_t).add(tok).add_row(time);
        for k in 0..self.cfg.depth {
            let b = format!("blk{k}");
            let n = dsln(p, &format!("{b}.norm"), h, spk);
            let m = linear(p, &format!("{b}.m2"), linear(p, &format!("{b}.m1"), n).silu());
            h = h.add(m);
        }
        Ok(linear(p, "out", layer_norm(p, "out.norm", h)))
    }
}

/// Straight-line interpolant (1−t)·y0 + t·y1.
pub fn flow_interpolate(y0: &Tensor, y1: &Tensor, t: f64) -> Result<Tensor> {
    if y0.shape() != y1.shape() {
        return Err(Error::input(format!(
            "interpolation endpoints disagree: {:?} vs {:?}",
            y0.shape(),
            y1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("flow time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(y0.clone());
    }
    if t == 1.0 {
        return Ok(y1.clone());
    }
    y0.scale(1.0 - t).add(&y1.scale(t))
}

/// Mean squared residual between the field and the straight-line velocity
/// y1 − y0, at one sampled (y0, t). Zero iff the field matches exactly.
pub fn acoustic_loss(
    model: &impl FlowField,
    y0: &Tensor,
    y1: &Tensor,
    t: f64,
    cond: Option<&AcousticCond>,
) -> Result<f64> {
    let tape = Tape::new();
    let p = TapeParams::new(&tape, model.store());
    let loss = acoustic_loss_var(model, &p, y0, y1, t, cond)?;
    Ok(loss.value().data()[0])
}

fn acoustic_loss_var<'t>(
    model: &impl FlowField,
    p: &TapeParams<'t, '_>,
    y0: &Tensor,
    y1: &Tensor,
    t: f64,
    cond: Option<&AcousticCond>,
) -> Result<Var<'t>> {
    let y_t = flow_interpolate(y0, y1, t)?;
    let target = p.tape().constant(y1.sub(y0)?);
    let v = model.field(p, p.tape().constant(y_t), t, cond)?;
    let diff = v.sub(target);
    Ok(diff.mul(diff).mean_all())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeOpts {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for OdeOpts {
    fn default() -> Self {
        OdeOpts { steps: 32, cfg_scale: 1.0, seed: 0 }
    }
}

/// Euler-integrate the field from a given start state at t = 0 to t = 1.
/// Guidance combines the conditional and unconditional fields per step;
/// scale = 1 runs the conditional branch only.
pub fn ode_sample_from(
    model: &impl FlowField,
    cond: Option<&AcousticCond>,
    y0: Tensor,
    opts: &OdeOpts,
) -> Result<Tensor> {
    if opts.steps == 0 {
        return Err(Error::input("ode integration needs at least one step"));
    }
    if let Some(c) = cond {
        if c.len() != y0.rows() {
            return Err(Error::input(format!(
                "conditioning covers {} token steps but the start state has {} rows",
                c.len(),
                y0.rows()
            )));
        }
    }
    let dt = 1.0 / opts.steps as f64;
    let mut y = y0;
    for k in 0..opts.steps {
        let t = k as f64 * dt;
        let tape = Tape::new();
        let p = TapeParams::new(&tape, model.store());
        let yv = tape.constant(y.clone());
        let v_c = model.field(&p, yv, t, cond)?.value();
        let v = if opts.cfg_scale == 1.0 || cond.is_none() {
            v_c
        } else {
            let v_u = model.field(&p, yv, t, None)?.value();
            cfg_combine(&v_c, &v_u, opts.cfg_scale)?
        };
        y = y.add(&v.scale(dt))?;
        if !y.is_finite() {
            return Err(Error::non_finite(format!("acoustic ode state at step {k}")));
        }
    }
    Ok(y)
}

/// Sample mel frames for a dialogue: standard-normal start state, one row per
/// token step. Deterministic given the seed.
pub fn ode_sample(model: &impl FlowField, cond: &AcousticCond, opts: &OdeOpts) -> Result<Tensor> {
    if cond.is_empty() {
        return Err(Error::input("cannot sample mel for empty token streams"));
    }
    let mut rng = rng_from_seed(opts.seed);
    let y0 = Tensor::rand_normal(&[cond.len(), model.n_mels()], &mut rng);
    ode_sample_from(model, Some(cond), y0, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticTrainOpts {
    pub steps: usize,
    pub batch: usize,
    /// Mel frames (= token steps) per training chunk.
    pub chunk_frames: usize,
    pub lr: f64,
    /// Probability of dropping tokens and speakers together for a chunk.
    pub dropout_p: f64,
}

impl Default for AcousticTrainOpts {
    fn default() -> Self {
        AcousticTrainOpts { steps: 400, batch: 4, chunk_frames: 32, lr: 2e-3, dropout_p: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticTrainReport {
    pub loss_curve: Vec<f64>,
}

/// Train the field on corpus chunks: random window, random (y0, t) draw,
/// joint token+speaker dropout at `dropout_p`.
pub fn train_acoustic(
    model: &mut AcousticModel,
    samples: &[DialogueSample],
    opts: &AcousticTrainOpts,
    seed: u64,
) -> Result<AcousticTrainReport> {
    if samples.is_empty() {
        return Err(Error::input("cannot train the acoustic model on an empty corpus"));
    }
    if opts.chunk_frames == 0 {
        return Err(Error::input("chunk_frames must be positive"));
    }
    if !(0.0..=1.0).contains(&opts.dropout_p) {
        return Err(Error::input(format!("dropout_p {} outside [0, 1]", opts.dropout_p)));
    }
    for s in samples {
        if s.mel.rows() != s.streams.len() {
            return Err(Error::input(format!(
                "sample {}: mel has {} frames but streams have {} steps",
                s.id,
                s.mel.rows(),
                s.streams.len()
            )));
        }
    }
    let conds: Vec<AcousticCond> = samples
        .iter()
        .map(AcousticCond::from_sample)
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(opts.lr);
    let mut rng = rng_from_seed(split_seed_labeled(seed, "acoustic-train"));
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &model.store);
        let mut loss: Option<Var> = None;
        for _ in 0..opts.batch {
            let i = rng.gen_range(0..samples.len());
            let total = samples[i].streams.len();
            let len = opts.chunk_frames.min(total);
            let start = rng.gen_range(0..=total - len);
            let y1 = samples[i].mel.slice_rows(start, len)?;
            let chunk_cond = AcousticCond {
                streams: TokenStreams::new(
                    conds[i].streams.s1[start..start + len].to_vec(),
                    conds[i].streams.s2[start..start + len].to_vec(),
                )?,
                e_spk: conds[i].e_spk.clone(),
            };
            let y0 = Tensor::rand_normal(y1.shape(), &mut rng);
            let t: f64 = rng.gen_range(0.0..1.0);
            let dropped = rng.gen_bool(opts.dropout_p);
            let term = acoustic_loss_var(
                model,
                &p,
                &y0,
                &y1,
                t,
                if dropped { None } else { Some(&chunk_cond) },
            )?;
            loss = Some(match loss {
                None => term,
                Some(acc) => acc.add(term),
            });
        }
        let loss = loss.unwrap().scale(1.0 / opts.batch as f64);
        let lv = loss.value().data()[0];
        if !lv.is_finite() {
            return Err(Error::non_finite(format!("acoustic training loss at step {step}")));
        }
        curve.push(lv);
        let grads = tape.backward(loss);
        let gm = p.grads(&grads);
        opt.step(&mut model.store, &gm, |_| true);
    }
    Ok(AcousticTrainReport { loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GRAD_CHECK_EPS, GRAD_CHECK_TOL};
    use crate::data::CorpusConfig;
    use crate::nn::grad_check_params;

    fn tiny_cfg() -> AcousticConfig {
        AcousticConfig { n_mels: 6, vocab: 5, width: 8, depth: 1, d_spk: 2 * SPEAKER_EMBED_DIM }
    }

    fn tiny_cond(n: usize, seed: u64) -> AcousticCond {
        let mut rng = rng_from_seed(seed);
        let streams = TokenStreams::new(
            (0..n).map(|_| rng.gen_range(0..5)).collect(),
            (0..n).map(|_| rng.gen_range(0..5)).collect(),
        )
        .unwrap();
        let e1 = Tensor::rand_normal(&[SPEAKER_EMBED_DIM], &mut rng);
        let e2 = Tensor::rand_normal(&[SPEAKER_EMBED_DIM], &mut rng);
        AcousticCond::new(streams, &e1, &e2).unwrap()
    }

    /// Field that returns a fixed row on every frame, ignoring conditioning.
    struct ConstField {
        row: Vec<f64>,
        store: ParamStore,
    }

    impl ConstField {
        fn new(row: Vec<f64>) -> ConstField {
            ConstField { row, store: ParamStore::default() }
        }
    }

    impl FlowField for ConstField {
        fn n_mels(&self) -> usize {
            self.row.len()
        }
        fn store(&self) -> &ParamStore {
            &self.store
        }
        fn field<'t>(
            &self,
            p: &TapeParams<'t, '_>,
            y_t: Var<'t>,
            _t: f64,
            _cond: Option<&AcousticCond>,
        ) -> Result<Var<'t>> {
            let n = y_t.value().rows();
            let mut out = Tensor::zeros(&[n, self.row.len()]);
            for r in 0..n {
                for (c, v) in self.row.iter().enumerate() {
                    out.set(r, c, *v);
                }
            }
            Ok(p.tape().constant(out))
        }
    }

    /// v(y, t) = a·t — state-independent but time-varying, so Euler computes
    /// a left Riemann sum with a known closed form.
    struct RampField {
        a: f64,
        store: ParamStore,
    }

    impl FlowField for RampField {
        fn n_mels(&self) -> usize {
            1
        }
        fn store(&self) -> &ParamStore {
            &self.store
        }
        fn field<'t>(
            &self,
            p: &TapeParams<'t, '_>,
            y_t: Var<'t>,
            t: f64,
            _cond: Option<&AcousticCond>,
        ) -> Result<Var<'t>> {
            let n = y_t.value().rows();
            Ok(p.tape().constant(Tensor::filled(&[n, 1], self.a * t)))
        }
    }

    struct NanAtStep {
        store: ParamStore,
        bad_step: usize,
        steps: usize,
    }

    impl FlowField for NanAtStep {
        fn n_mels(&self) -> usize {
            1
        }
        fn store(&self) -> &ParamStore {
            &self.store
        }
        fn field<'t>(
            &self,
            p: &TapeParams<'t, '_>,
            y_t: Var<'t>,
            t: f64,
            _cond: Option<&AcousticCond>,
        ) -> Result<Var<'t>> {
            let k = (t * self.steps as f64).round() as usize;
            let v = if k == self.bad_step { f64::NAN } else { 0.0 };
            let n = y_t.value().rows();
            Ok(p.tape().constant(Tensor::filled(&[n, 1], v)))
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint_are_exact() {
        let mut rng = rng_from_seed(1);
        let y0 = Tensor::rand_normal(&[3, 4], &mut rng);
        let y1 = Tensor::rand_normal(&[3, 4], &mut rng);
        assert_eq!(flow_interpolate(&y0, &y1, 0.0).unwrap(), y0);
        assert_eq!(flow_interpolate(&y0, &y1, 1.0).unwrap(), y1);
        let mid = flow_interpolate(&y0, &y1, 0.5).unwrap();
        for i in 0..y0.len() {
            let want = 0.5 * (y0.data()[i] + y1.data()[i]);
            assert!((mid.data()[i] - want).abs() < 1e-15);
        }
        assert!(flow_interpolate(&y0, &y1, -0.1).is_err());
        assert!(flow_interpolate(&y0, &y1, 1.1).is_err());
        let y_bad = Tensor::zeros(&[2, 4]);
        assert!(flow_interpolate(&y0, &y_bad, 0.5).is_err());
    }

    #[test]
    fn oracle_field_matching_the_velocity_has_zero_loss() {
        let mut rng = rng_from_seed(2);
        let y0 = Tensor::rand_normal(&[4, 3], &mut rng);
        let y1 = Tensor::rand_normal(&[4, 3], &mut rng);
        // an oracle that knows y1 − y0 for this one pair, frame by frame
        struct ExactField {
            v: Tensor,
            store: ParamStore,
        }
        impl FlowField for ExactField {
            fn n_mels(&self) -> usize {
                self.v.cols()
            }
            fn store(&self) -> &ParamStore {
                &self.store
            }
            fn field<'t>(
                &self,
                p: &TapeParams<'t, '_>,
                _y_t: Var<'t>,
                _t: f64,
                _cond: Option<&AcousticCond>,
            ) -> Result<Var<'t>> {
                Ok(p.tape().constant(self.v.clone()))
            }
        }
        let oracle = ExactField { v: y1.sub(&y0).unwrap(), store: ParamStore::default() };
        for t in [0.0, 0.3, 0.9] {
            let loss = acoustic_loss(&oracle, &y0, &y1, t, None).unwrap();
            assert_eq!(loss, 0.0, "t = {t}");
        }
    }

    #[test]
    fn zero_field_monte_carlo_matches_the_direct_expectation() {
        // E[mean((y1 − y0)²)] with y0 ~ N(0,1) = mean(y1²) + 1
        let mut rng = rng_from_seed(3);
        let y1 = Tensor::rand_normal(&[5, 4], &mut rng).scale(0.8);
        let zero = ConstField::new(vec![0.0; 4]);
        let expected = y1.data().iter().map(|v| v * v).sum::<f64>() / y1.len() as f64 + 1.0;
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let y0 = Tensor::rand_normal(y1.shape(), &mut rng);
            let t: f64 = rng.gen_range(0.0..1.0);
            acc += acoustic_loss(&zero, &y0, &y1, t, None).unwrap();
        }
        let mc = acc / draws as f64;
        let rel = (mc - expected).abs() / expected;
        assert!(rel < 0.05, "mc {mc} vs expected {expected} (rel {rel})");
    }

    #[test]
    fn constant_field_from_zero_integrates_exactly_for_any_step_count() {
        let row = vec![0.7, -1.3, 0.25];
        for steps in [1usize, 5, 32, 100] {
            let field = ConstField::new(row.clone());
            let y0 = Tensor::zeros(&[2, 3]);
            let out = ode_sample_from(&field, None, y0, &OdeOpts { steps, ..OdeOpts::default() })
                .unwrap();
            for r in 0..2 {
                for (c, want) in row.iter().enumerate() {
                    assert!(
                        (out.at(r, c) - want).abs() < 1e-12,
                        "steps {steps}: got {} want {want}",
                        out.at(r, c)
                    );
                }
            }
        }
    }

    #[test]
    fn time_ramp_field_matches_the_left_riemann_closed_form() {
        let a = 2.0;
        let steps = 8;
        let field = RampField { a, store: ParamStore::default() };
        let out = ode_sample_from(
            &field,
            None,
            Tensor::zeros(&[1, 1]),
            &OdeOpts { steps, ..OdeOpts::default() },
        )
        .unwrap();
        // Σ_{k<n} (a·k/n)·(1/n) = a·(n−1)/(2n)
        let want = a * (steps as f64 - 1.0) / (2.0 * steps as f64);
        assert!((out.at(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_state_reports_the_step_index() {
        let field = NanAtStep { store: ParamStore::default(), bad_step: 3, steps: 8 };
        let err = ode_sample_from(
            &field,
            None,
            Tensor::zeros(&[1, 1]),
            &OdeOpts { steps: 8, ..OdeOpts::default() },
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn sampling_is_seed_deterministic_and_shaped_by_the_streams() {
        let model = AcousticModel::init(tiny_cfg(), 4);
        let cond = tiny_cond(7, 5);
        let opts = OdeOpts { steps: 6, cfg_scale: 1.4, seed: 11 };
        let a = ode_sample(&model, &cond, &opts).unwrap();
        let b = ode_sample(&model, &cond, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[7, 6]);
        let other = ode_sample(&model, &cond, &OdeOpts { seed: 12, ..opts }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn guidance_scale_one_skips_the_unconditional_branch_bitwise() {
        let model = AcousticModel::init(tiny_cfg(), 6);
        let cond = tiny_cond(4, 7);
        let y0 = Tensor::rand_normal(&[4, 6], &mut rng_from_seed(8));
        let fast = ode_sample_from(
            &model,
            Some(&cond),
            y0.clone(),
            &OdeOpts { steps: 5, cfg_scale: 1.0, seed: 0 },
        )
        .unwrap();
        // hand-rolled conditional-only integration must agree exactly
        // (t built with the same float expression: k · (1/steps))
        let mut y = y0;
        let dt = 1.0 / 5.0f64;
        for k in 0..5 {
            let t = k as f64 * dt;
            let tape = Tape::new();
            let p = TapeParams::new(&tape, &model.store);
            let v = model.field(&p, tape.constant(y.clone()), t, Some(&cond)).unwrap().value();
            y = y.add(&v.scale(dt)).unwrap();
        }
        assert_eq!(fast, y);
    }

    /// Returns `c` when conditioning is present and `u` when it is dropped, so
    /// the guided velocity must come out as u + s·(c − u).
    struct BranchField {
        c: f64,
        u: f64,
        store: ParamStore,
    }

    impl FlowField for BranchField {
        fn n_mels(&self) -> usize {
            1
        }
        fn store(&self) -> &ParamStore {
            &self.store
        }
        fn field<'t>(
            &self,
            p: &TapeParams<'t, '_>,
            y_t: Var<'t>,
            _t: f64,
            cond: Option<&AcousticCond>,
        ) -> Result<Var<'t>> {
            let v = if cond.is_some() { self.c } else { self.u };
            let n = y_t.value().rows();
            Ok(p.tape().constant(Tensor::filled(&[n, 1], v)))
        }
    }

    #[test]
    fn guidance_moves_away_from_the_unconditional_field() {
        // v_c = 1, v_u = 0, scale 2 ⇒ guided velocity 0 + 2·(1 − 0) = 2, so the
        // unit-time integral lands at y0 + 2. A swapped combine would compute
        // 1 + 2·(0 − 1) = −1 instead, which this pins against.
        let field = BranchField { c: 1.0, u: 0.0, store: ParamStore::default() };
        let cond = tiny_cond(3, 11);
        let y0 = Tensor::zeros(&[3, 1]);
        let y = ode_sample_from(
            &field,
            Some(&cond),
            y0,
            &OdeOpts { steps: 4, cfg_scale: 2.0, seed: 0 },
        )
        .unwrap();
        for r in 0..3 {
            assert!((y.at(r, 0) - 2.0).abs() < 1e-12, "row {r}: {}", y.at(r, 0));
        }
    }

    #[test]
    fn field_validates_shapes_tokens_and_lengths() {
        let model = AcousticModel::init(tiny_cfg(), 9);
        let cond = tiny_cond(3, 10);
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &model.store);
        // wrong mel width
        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(model.field(&p, bad, 0.1, Some(&cond)).is_err());
        // frame count mismatch
        let short = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(model.field(&p, short, 0.1, Some(&cond)).is_err());
        // token outside the model vocab
        let mut big = cond.clone();
        big.streams.s1[0] = 200;
        let y = tape.constant(Tensor::zeros(&[3, 6]));
        let err = model.field(&p, y, 0.1, Some(&big)).unwrap_err();
        assert!(err.to_string().contains("200"), "{err}");
    }

    #[test]
    fn conditional_and_unconditional_branches_pass_gradient_checks() {
        let model = AcousticModel::init(tiny_cfg(), 11);
        let cond = tiny_cond(3, 12);
        let mut rng = rng_from_seed(13);
        let y0 = Tensor::rand_normal(&[3, 6], &mut rng);
        let y1 = Tensor::rand_normal(&[3, 6], &mut rng);
        for use_cond in [true, false] {
            let report = grad_check_params(
                &model.store,
                |p| {
                    acoustic_loss_var(&model, p, &y0, &y1, 0.4, use_cond.then_some(&cond)).unwrap()
                },
                GRAD_CHECK_EPS,
            )
            .unwrap();
            assert!(
                report.max_rel_err < GRAD_CHECK_TOL,
                "cond={use_cond}: {} at {}[{}]",
                report.max_rel_err,
                report.worst_param,
                report.worst_elem
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_the_loss() {
        let corpus = CorpusConfig {
            n_samples: 4,
            n_identities: 3,
            tokens_per_sample: 40,
            seed: 21,
            ..CorpusConfig::default()
        };
        let samples = crate::data::synth_corpus(&corpus).unwrap();
        let opts = AcousticTrainOpts { steps: 60, batch: 2, chunk_frames: 16, lr: 3e-3, dropout_p: 0.3 };
        let run = || {
            let mut model = AcousticModel::init(AcousticConfig { width: 16, depth: 1, ..AcousticConfig::default() }, 22);
            train_acoustic(&mut model, &samples, &opts, 23).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let head: f64 = a.loss_curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = a.loss_curve[a.loss_curve.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not fall: {head} -> {tail}");
    }

    #[test]
    fn trained_speaker_channel_is_live() {
        // same token streams, different speaker pair → different mel
        let corpus = CorpusConfig {
            n_samples: 6,
            n_identities: 4,
            tokens_per_sample: 40,
            seed: 31,
            ..CorpusConfig::default()
        };
        let samples = crate::data::synth_corpus(&corpus).unwrap();
        let mut model = AcousticModel::init(
            AcousticConfig { width: 32, depth: 2, ..AcousticConfig::default() },
            32,
        );
        let opts = AcousticTrainOpts { steps: 300, batch: 4, chunk_frames: 20, lr: 3e-3, dropout_p: 0.3 };
        train_acoustic(&mut model, &samples, &opts, 33).unwrap();
        let cond = AcousticCond::from_sample(&samples[0]).unwrap();
        let swapped = cond.with_swapped_speakers();
        let opts = OdeOpts { steps: 16, cfg_scale: 1.0, seed: 34 };
        let a = ode_sample(&model, &cond, &opts).unwrap();
        let b = ode_sample(&model, &swapped, &opts).unwrap();
        let diff = a.sub(&b).unwrap();
        let mad = diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.len() as f64;
        assert!(mad > 0.01, "speaker channel inert: mean abs diff {mad}");
    }

    #[test]
    fn speaker_row_swaps_cleanly() {
        let cond = tiny_cond(2, 40);
        let swapped = cond.with_swapped_speakers();
        let d = SPEAKER_EMBED_DIM;
        assert_eq!(&cond.e_spk.data()[..d], &swapped.e_spk.data()[d..2 * d]);
        assert_eq!(&cond.e_spk.data()[d..2 * d], &swapped.e_spk.data()[..d]);
        assert_eq!(cond.streams, swapped.streams);
        // a double swap restores the original
        assert_eq!(swapped.with_swapped_speakers(), cond);
    }

    #[test]
    fn bad_speaker_embedding_sizes_are_rejected() {
        let streams = TokenStreams::new(vec![1, 2], vec![3, 4]).unwrap();
        let good = Tensor::zeros(&[SPEAKER_EMBED_DIM]);
        let bad = Tensor::zeros(&[SPEAKER_EMBED_DIM + 1]);
        assert!(AcousticCond::new(streams.clone(), &good, &bad).is_err());
        assert!(AcousticCond::new(streams, &bad, &good).is_err());
    }
}
