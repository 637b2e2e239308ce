use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::synth::SynthSequence;
use crate::encoder::{EncodeOptions, EncoderTrace};
use crate::error::{Error, Result};
use crate::geometry::{CenterBox, Rect};
use crate::head::LossWeights;
use crate::model::{forward_graph, loss_graph, template_vars, LossParts, ModelConfig};
use crate::numerics::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::pipeline::{CropTransform, RunConfig};
use crate::tokenization::{patchify, ImageCrop};

/// Mixed into the seed of the data stream so it differs from the
/// parameter-initialisation stream.
const DATA_STREAM: u64 = 0x5eed_da7a;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Samples averaged per step.
    pub batch: usize,
    /// Gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Randomly mirror samples horizontally.
    pub flip: bool,
    /// Largest search-window center shift, in target sides per axis.
    pub max_shift: f64,
    /// Largest log-scale perturbation of the search window.
    pub scale_jitter: f64,
    /// Oldest dynamic-region frame, in frames before the search frame.
    pub max_dynamic_age: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            batch: 4,
            clip_norm: 5.0,
            seed: 0,
            flip: true,
            max_shift: 0.8,
            scale_jitter: 0.5,
            max_dynamic_age: 8,
            weights: LossWeights::default(),
        }
    }
}

/// Where one training sample comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSpec {
    pub sequence: usize,
    pub frame: usize,
    pub dynamic_frame: usize,
    pub shift: (f64, f64),
    pub log_scale: f64,
    pub flip: bool,
}

impl SampleSpec {
    pub fn draw(rng: &mut impl Rng, data: &[SynthSequence], cfg: &TrainConfig) -> Self {
        let sequence = rng.random_range(0..data.len());
        let len = data[sequence].frames.len();
        let frame = if len > 1 { rng.random_range(1..len) } else { 0 };
        let oldest = frame.saturating_sub(cfg.max_dynamic_age);
        let dynamic_frame = if frame > 0 {
            rng.random_range(oldest..frame)
        } else {
            0
        };
        let mut sym = |m: f64| (2.0 * rng.random::<f64>() - 1.0) * m;
        let shift = (sym(cfg.max_shift), sym(cfg.max_shift));
        let log_scale = sym(cfg.scale_jitter);
        let flip = cfg.flip && rng.random::<bool>();
        Self {
            sequence,
            frame,
            dynamic_frame,
            shift,
            log_scale,
            flip,
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in [
            self.sequence as u64,
            self.frame as u64,
            self.dynamic_frame as u64,
        ] {
            h.update(v.to_le_bytes());
        }
        for v in [self.shift.0, self.shift.1, self.log_scale] {
            h.update(v.to_le_bytes());
        }
        h.update([self.flip as u8]);
    }
}

/// Patch tensors and target of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub template: Tensor,
    pub dynamic: Tensor,
    pub search: Tensor,
    /// Target box in normalized search-crop coordinates.
    pub gt: CenterBox,
}

fn crop_patches(frame: &ImageCrop, t: &CropTransform, patch: usize, flip: bool) -> Result<Tensor> {
    let c = t.sample(frame);
    let c = if flip { c.flip_horizontal() } else { c };
    patchify(&c, patch)
}

/// Cuts the template, dynamic region and a jittered search window the same
/// way the tracker does.
pub fn build_sample(
    model: &ModelConfig,
    run: &RunConfig,
    seq: &SynthSequence,
    spec: &SampleSpec,
) -> Result<TrainingSample> {
    let geo = &model.geometry;
    let p = geo.patch;
    let z_box = &seq.boxes[0];
    let template = CropTransform::around(z_box, run.template_factor, geo.template)?;
    let d_box = &seq.boxes[spec.dynamic_frame];
    let dyn_factor = run.template_factor * geo.dynamic as f64 / geo.template as f64;
    let dynamic = CropTransform::around(d_box, dyn_factor, geo.dynamic)?;
    let gt = seq.boxes[spec.frame];
    let side = (gt.w * gt.h).sqrt();
    let (cx, cy) = gt.center();
    let s = spec.log_scale.exp();
    let window = Rect::from_center(
        cx + spec.shift.0 * side,
        cy + spec.shift.1 * side,
        gt.w * s,
        gt.h * s,
    );
    let search = CropTransform::around(&window, run.search_factor, geo.search)?;
    let mut gt_crop = search.to_crop(&gt);
    if spec.flip {
        gt_crop.cx = 1.0 - gt_crop.cx;
    }
    Ok(TrainingSample {
        template: crop_patches(&seq.frames[0], &template, p, spec.flip)?,
        dynamic: crop_patches(&seq.frames[spec.dynamic_frame], &dynamic, p, spec.flip)?,
        search: crop_patches(&seq.frames[spec.frame], &search, p, spec.flip)?,
        gt: gt_crop,
    })
}

fn sample_graph(
    g: &mut Graph,
    model: &ModelConfig,
    store: &ParamStore,
    sample: &TrainingSample,
    weights: LossWeights,
    opts: EncodeOptions<'_>,
) -> Result<(Var, LossParts, EncoderTrace)> {
    let t = g.input(sample.template.clone())?;
    let d = g.input(sample.dynamic.clone())?;
    let x = g.input(sample.search.clone())?;
    let (z, dt, db) = template_vars(g, store, model, t, Some(d))?;
    let fwd = forward_graph(g, store, model, z, dt, db, x, opts)?;
    let (loss, parts) = loss_graph(
        g,
        &fwd.head,
        &sample.gt,
        model.geometry.search_grid(),
        weights,
    )?;
    Ok((loss, parts, fwd.trace))
}

/// Loss of one sample. With `accumulate`, its gradients are added into the
/// parameter gradient slots.
pub fn sample_loss(
    model: &ModelConfig,
    store: &mut ParamStore,
    sample: &TrainingSample,
    weights: LossWeights,
    accumulate: bool,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let (loss, parts, _) = sample_graph(
        &mut g,
        model,
        store,
        sample,
        weights,
        EncodeOptions::default(),
    )?;
    if accumulate {
        let grads = g.backward(loss)?;
        store.accumulate(&grads);
    }
    Ok(parts)
}

/// Finite-difference check of the full training loss on one sample. The
/// token split and elimination of an initial pass are replayed, so the
/// loss is a smooth function of the parameters around the probe point.
pub fn check_gradients(
    model: &ModelConfig,
    store: &ParamStore,
    sample: &TrainingSample,
    weights: LossWeights,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let (_, _, trace) = sample_graph(
        &mut g,
        model,
        store,
        sample,
        weights,
        EncodeOptions::default(),
    )?;
    let opts = EncodeOptions {
        record_attention: false,
        replay: Some(&trace),
    };
    grad_check(
        |g, s| Ok(sample_graph(g, model, s, sample, weights, opts)?.0),
        store,
        eps,
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Mean total loss of every step's batch.
    pub curve: Vec<f64>,
    /// SHA-256 over every sample spec drawn, in order.
    pub data_hash: String,
}

impl TrainOutcome {
    /// `step,loss` lines.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.curve.iter().enumerate() {
            s.push_str(&format!("{},{:.9}\n", i + 1, l));
        }
        s
    }
}

/// Whether the mean of the last `window` losses is below the mean of the
/// first `window`.
pub fn loss_trend_decreasing(curve: &[f64], window: usize) -> bool {
    let w = window.min(curve.len() / 2).max(1);
    if curve.len() < 2 {
        return false;
    }
    let head = curve[..w].iter().sum::<f64>() / w as f64;
    let tail = curve[curve.len() - w..].iter().sum::<f64>() / w as f64;
    tail < head
}

/// Plain SGD with a fixed step on samples drawn from `data`. Deterministic
/// in `cfg.seed`: the same seed gives the same initial parameters and the
/// same sample stream whatever the model variant.
pub fn train_toy(
    model: &ModelConfig,
    run: &RunConfig,
    data: &[SynthSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = model.init_params(cfg.seed)?;
    train_from(model, run, data, cfg, params)
}

/// Like [`train_toy`] but starting from given parameters.
pub fn train_from(
    model: &ModelConfig,
    run: &RunConfig,
    data: &[SynthSequence],
    cfg: &TrainConfig,
    mut params: ParamStore,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::config("train.batch", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let mut hasher = Sha256::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    for step in 0..cfg.steps {
        params.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let spec = SampleSpec::draw(&mut rng, data, cfg);
            spec.hash_into(&mut hasher);
            let sample = build_sample(model, run, &data[spec.sequence], &spec)?;
            total += sample_loss(model, &mut params, &sample, cfg.weights, true)?.total;
        }
        let loss = total / cfg.batch as f64;
        let first = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * first {
            return Err(Error::Divergence(format!(
                "step {}: loss {loss:.4} exceeds 10x the initial {first:.4} (grad norm {:.4})",
                step + 1,
                params.grad_norm() / cfg.batch as f64
            )));
        }
        let norm = params.grad_norm() / cfg.batch as f64;
        let mut scale = 1.0 / cfg.batch as f64;
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            scale *= cfg.clip_norm / norm;
        }
        params.sgd_step(cfg.lr, scale);
        curve.push(loss);
        if (step + 1) % 100 == 0 {
            log::info!("step {} loss {loss:.4}", step + 1);
        }
    }
    let data_hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(TrainOutcome {
        params,
        curve,
        data_hash,
    })
}
