//! Face → voice speaker mapper: predicts the audio-derived speaker embedding
//! from visual identity features, so inference can condition the acoustic
//! model on a voice that matches the face. Reference features go through a
//! small conv trunk (a stand-in for a real backbone at 8×8×4 scale), get
//! flattened and fused with the face embedding, and three linear layers emit
//! the 16-dim embedding. Trained with plain L2 against the audio embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::consts::{FACE_EMBED_DIM, REF_SHAPE, SPEAKER_EMBED_DIM};
use crate::data::SyntheticIdentity;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore, TapeParams};
use crate::rng::{rng_from_seed, split_seed_labeled};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeakerSource {
    /// Ground truth derived from the voice itself.
    Audio,
    /// Predicted from visual features by the mapper.
    Face,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub e_spk: Tensor,
    pub source: SpeakerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMapperConfig {
    pub d_spk: usize,
    pub d_face: usize,
    pub ref_shape: [usize; 3],
    /// Channels after the stem conv; the residual blocks keep this width.
    pub channels: usize,
    /// Width of the flattened-trunk projection and the fusion layers.
    pub width: usize,
    /// Ablation switches: a disabled input is zeroed at train and test time.
    pub use_face: bool,
    pub use_ref: bool,
}

impl Default for SpeakerMapperConfig {
    fn default() -> Self {
        SpeakerMapperConfig {
            d_spk: SPEAKER_EMBED_DIM,
            d_face: FACE_EMBED_DIM,
            ref_shape: REF_SHAPE,
            channels: 8,
            width: 64,
            use_face: true,
            use_ref: true,
        }
    }
}

/// The two single-input ablation variants: (drop c_face, drop c_ref).
pub fn ablate_inputs(cfg: &SpeakerMapperConfig) -> (SpeakerMapperConfig, SpeakerMapperConfig) {
    let drop_face = SpeakerMapperConfig { use_face: false, ..cfg.clone() };
    let drop_ref = SpeakerMapperConfig { use_ref: false, ..cfg.clone() };
    (drop_face, drop_ref)
}

const RES_BLOCKS: usize = 2;

#[derive(Debug, Clone)]
pub struct SpeakerMapper {
    pub cfg: SpeakerMapperConfig,
    pub store: ParamStore,
}

impl SpeakerMapper {
    pub fn init(cfg: SpeakerMapperConfig, seed: u64) -> SpeakerMapper {
        let mut store = ParamStore::default();
        let s = |label: &str| split_seed_labeled(seed, label);
        let [h, w, c_in] = cfg.ref_shape;
        let cc = cfg.channels;
        store.init_linear("conv0", 9 * c_in, cc, s("conv0"));
        for r in 0..RES_BLOCKS {
            store.init_linear(&format!("res{r}.c1"), 9 * cc, cc, s(&format!("res{r}.c1")));
            store.init_linear(&format!("res{r}.c2"), 9 * cc, cc, s(&format!("res{r}.c2")));
        }
        store.init_linear("flat", h * w * cc, cfg.width, s("flat"));
        store.init_linear("f1", cfg.width + cfg.d_face, cfg.width, s("f1"));
        store.init_linear("f2", cfg.width, cfg.width / 2, s("f2"));
        store.init_linear("f3", cfg.width / 2, cfg.d_spk, s("f3"));
        SpeakerMapper { cfg, store }
    }

    fn check_inputs(&self, c_face: &Tensor, c_ref: &Tensor) -> Result<()> {
        if c_face.len() != self.cfg.d_face {
            return Err(Error::input(format!(
                "face embedding has {} values, expected {}",
                c_face.len(),
                self.cfg.d_face
            )));
        }
        let [h, w, c] = self.cfg.ref_shape;
        if c_ref.len() != h * w * c {
            return Err(Error::input(format!(
                "reference features have {} values, expected {h}x{w}x{c}",
                c_ref.len()
            )));
        }
        if !c_face.is_finite() || !c_ref.is_finite() {
            return Err(Error::input("speaker mapper inputs must be finite"));
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        p: &TapeParams<'t, '_>,
        c_face: &Tensor,
        c_ref: &Tensor,
    ) -> Result<Var<'t>> {
        self.check_inputs(c_face, c_ref)?;
        let [h, w, c] = self.cfg.ref_shape;
        let cc = self.cfg.channels;
        let tape = p.tape();
        let lin = |name: &str, x: Var<'t>| {
            x.matmul(p.get(&format!("{name}.w"))).add_row(p.get(&format!("{name}.b")))
        };
        let conv = |name: &str, x: Var<'t>, cin: usize| lin(name, x.im2col(h, w, cin, 3));

        let ref_in = if self.cfg.use_ref {
            c_ref.reshape(&[h * w, c])?
        } else {
            Tensor::zeros(&[h * w, c])
        };
        let mut hm = conv("conv0", tape.constant(ref_in), c).silu();
        for r in 0..RES_BLOCKS {
            let b = conv(&format!("res{r}.c2"), conv(&format!("res{r}.c1"), hm, cc).silu(), cc);
            hm = hm.add(b).silu();
        }
        let trunk = lin("flat", hm.reshape(&[1, h * w * cc])).silu();

        let face_in = if self.cfg.use_face {
            c_face.reshape(&[1, self.cfg.d_face])?
        } else {
            Tensor::zeros(&[1, self.cfg.d_face])
        };
        let z = trunk.concat_cols(tape.constant(face_in));
        Ok(lin("f3", lin("f2", lin("f1", z).silu()).silu()))
    }
}

/// Plain-tensor forward pass; the result carries the FACE source tag.
pub fn map_speaker(
    mapper: &SpeakerMapper,
    c_face: &Tensor,
    c_ref: &Tensor,
) -> Result<SpeakerEmbedding> {
    let tape = Tape::new();
    let p = TapeParams::new(&tape, &mapper.store);
    let out = mapper.forward(&p, c_face, c_ref)?;
    let e_spk = out.value().reshape(&[mapper.cfg.d_spk])?;
    Ok(SpeakerEmbedding { e_spk, source: SpeakerSource::Face })
}

/// Squared L2 distance between embeddings (no normalization).
pub fn speaker_loss(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::input(format!(
            "embedding dimensions differ: {} vs {}",
            predicted.len(),
            target.len()
        )));
    }
    Ok(predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMetric {
    Euclidean,
    Cosine,
}

impl RetrievalMetric {
    fn distance(&self, a: &Tensor, b: &Tensor) -> f64 {
        match self {
            RetrievalMetric::Euclidean => a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>(),
            RetrievalMetric::Cosine => {
                let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                let n = a.sq_norm().sqrt() * b.sq_norm().sqrt();
                if n < 1e-300 {
                    f64::MAX
                } else {
                    1.0 - dot / n
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub identity: usize,
    pub predicted_nearest: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub rows: Vec<RetrievalRow>,
}

impl RetrievalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("identity,predicted_nearest,correct\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.identity, r.predicted_nearest, r.correct));
        }
        out
    }
}

/// Score precomputed predictions against the gallery's true embeddings:
/// top-1 nearest-neighbor accuracy. Ties resolve to the lowest index.
pub fn retrieval_eval_with(
    predictions: &[Tensor],
    gallery: &[SyntheticIdentity],
    metric: RetrievalMetric,
) -> Result<RetrievalReport> {
    if gallery.len() < 2 {
        return Err(Error::input(format!(
            "retrieval needs at least 2 identities, got {}",
            gallery.len()
        )));
    }
    if predictions.len() != gallery.len() {
        return Err(Error::input(format!(
            "{} predictions for {} identities",
            predictions.len(),
            gallery.len()
        )));
    }
    let mut rows = Vec::with_capacity(gallery.len());
    let mut hits = 0usize;
    for (i, pred) in predictions.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, g) in gallery.iter().enumerate() {
            let d = metric.distance(pred, &g.speaker_embedding);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        let correct = best == i;
        hits += correct as usize;
        rows.push(RetrievalRow { identity: gallery[i].id, predicted_nearest: gallery[best].id, correct });
    }
    Ok(RetrievalReport { accuracy: hits as f64 / gallery.len() as f64, rows })
}

/// Run the mapper over the gallery and score top-1 retrieval.
pub fn retrieval_eval(
    mapper: &SpeakerMapper,
    gallery: &[SyntheticIdentity],
    metric: RetrievalMetric,
) -> Result<RetrievalReport> {
    let predictions: Vec<Tensor> = gallery
        .iter()
        .map(|g| Ok(map_speaker(mapper, &g.face_embedding, &g.ref_features)?.e_spk))
        .collect::<Result<_>>()?;
    retrieval_eval_with(&predictions, gallery, metric)
}

/// One-sided permutation test against the chance-retrieval null: shuffle
/// which identity each prediction is credited to and count how often the
/// permuted accuracy reaches the observed one.
pub fn retrieval_permutation_p(report: &RetrievalReport, n_perms: usize, seed: u64) -> f64 {
    let n = report.rows.len();
    let observed = report.accuracy;
    let mut rng = rng_from_seed(seed);
    let mut labels: Vec<usize> = report.rows.iter().map(|r| r.identity).collect();
    let nearest: Vec<usize> = report.rows.iter().map(|r| r.predicted_nearest).collect();
    let mut at_least = 0usize;
    for _ in 0..n_perms {
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        let acc = labels.iter().zip(&nearest).filter(|(l, p)| l == p).count() as f64 / n as f64;
        if acc >= observed {
            at_least += 1;
        }
    }
    (at_least + 1) as f64 / (n_perms + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SpeakerTrainOpts {
    fn default() -> Self {
        // 1k steps at batch 64 trains the full-size mapper
        SpeakerTrainOpts { steps: 1000, batch: 64, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTrainReport {
    pub loss_curve: Vec<f64>,
    pub final_mean_loss: f64,
}

/// Supervised regression onto the gallery's audio embeddings. Ablation
/// variants (per the config flags) zero their dropped input here and in
/// every later forward pass.
pub fn train_speaker(
    mapper: &mut SpeakerMapper,
    gallery: &[SyntheticIdentity],
    opts: &SpeakerTrainOpts,
    seed: u64,
) -> Result<SpeakerTrainReport> {
    if gallery.is_empty() {
        return Err(Error::input("cannot train the speaker mapper on an empty gallery"));
    }
    let mut opt = Adam::new(opts.lr);
    let mut rng = rng_from_seed(split_seed_labeled(seed, "speaker-train"));
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &mapper.store);
        let mut loss: Option<Var> = None;
        for _ in 0..opts.batch {
            let g = &gallery[rng.gen_range(0..gallery.len())];
            let pred = mapper.forward(&p, &g.face_embedding, &g.ref_features)?;
            let target = tape.constant(g.speaker_embedding.reshape(&[1, mapper.cfg.d_spk])?);
            let diff = pred.sub(target);
            let term = diff.mul(diff).sum_all();
            loss = Some(match loss {
                None => term,
                Some(acc) => acc.add(term),
            });
        }
        let loss = loss.unwrap().scale(1.0 / opts.batch as f64);
        let lv = loss.value().data()[0];
        if !lv.is_finite() {
            return Err(Error::non_finite(format!("speaker training loss at step {step}")));
        }
        curve.push(lv);
        let grads = tape.backward(loss);
        let gm = p.grads(&grads);
        opt.step(&mut mapper.store, &gm, |_| true);
    }
    let mut total = 0.0;
    for g in gallery {
        let pred = map_speaker(mapper, &g.face_embedding, &g.ref_features)?;
        total += speaker_loss(&pred.e_spk, &g.speaker_embedding)?;
    }
    Ok(SpeakerTrainReport { loss_curve: curve, final_mean_loss: total / gallery.len() as f64 })
}
