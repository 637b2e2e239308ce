use super::crop::CropTransform;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::model::{
    embed_templates, predict_search, ModelConfig, PredictionOutput, TemplateTokens,
};
use crate::numerics::{ParamStore, Tensor};
use crate::tokenization::{patchify, ImageCrop};

/// Crop factors and the dynamic-update schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Search window side relative to the target's geometric-mean side.
    pub search_factor: f64,
    /// Template window side relative to the target's geometric-mean side.
    /// The dynamic region uses the same scale, so its central block matches
    /// the template.
    pub template_factor: f64,
    /// Frames per dynamic-update window.
    pub update_interval: usize,
    /// Minimum window-best confidence that triggers an update.
    pub update_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            search_factor: 4.0,
            template_factor: 2.0,
            update_interval: 25,
            update_threshold: 0.7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_factor.is_nan() || self.search_factor <= 0.0 {
            return Err(Error::config("run.search_factor", "must be positive"));
        }
        if self.template_factor.is_nan() || self.template_factor <= 0.0 {
            return Err(Error::config("run.template_factor", "must be positive"));
        }
        if self.update_interval == 0 {
            return Err(Error::config("run.update_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// Highest-confidence frame seen in the current update window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBest {
    pub confidence: f64,
    pub frame_index: usize,
    pub rect: Rect,
    /// Dynamic-region patches cut from that frame around `rect`.
    pub region: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub templates: TemplateTokens,
    pub last: Rect,
    pub confidence: f64,
    /// 1-based index of the last processed frame.
    pub frame_index: usize,
    /// Frames seen in the current update window.
    pub window_len: usize,
    pub best: Option<WindowBest>,
    /// Frame indices whose dynamic region replaced the dynamic tokens.
    pub updates: Vec<usize>,
}

/// Result of tracking one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub rect: Rect,
    pub confidence: f64,
}

/// Read-only tracking context shared by all sequences.
#[derive(Clone, Copy)]
pub struct Tracker<'a> {
    pub model: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub run: &'a RunConfig,
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a ModelConfig, params: &'a ParamStore, run: &'a RunConfig) -> Result<Self> {
        model.validate()?;
        run.validate()?;
        Ok(Self { model, params, run })
    }

    fn template_crop(&self, r: &Rect) -> Result<CropTransform> {
        CropTransform::around(r, self.run.template_factor, self.model.geometry.template)
    }

    fn dynamic_crop(&self, r: &Rect) -> Result<CropTransform> {
        let g = &self.model.geometry;
        let factor = self.run.template_factor * g.dynamic as f64 / g.template as f64;
        CropTransform::around(r, factor, g.dynamic)
    }

    pub fn search_crop(&self, r: &Rect) -> Result<CropTransform> {
        CropTransform::around(r, self.run.search_factor, self.model.geometry.search)
    }

    fn region_patches(&self, frame: &ImageCrop, r: &Rect) -> Result<Tensor> {
        let t = self.dynamic_crop(r)?;
        patchify(&t.sample(frame), self.model.geometry.patch)
    }

    /// Builds the tracker state from the first frame and its box.
    pub fn init(&self, frame: &ImageCrop, gt: &Rect) -> Result<TrackerState> {
        if !gt.is_valid() || !gt.overlaps_frame(frame.width() as f64, frame.height() as f64) {
            return Err(Error::Input(format!(
                "initial box {gt:?} is not inside the frame"
            )));
        }
        let p = self.model.geometry.patch;
        let template = patchify(&self.template_crop(gt)?.sample(frame), p)?;
        let region = if self.model.variant().uses_dynamic_target() {
            Some(self.region_patches(frame, gt)?)
        } else {
            None
        };
        let templates = embed_templates(self.params, self.model, &template, region.as_ref())?;
        Ok(TrackerState {
            templates,
            last: *gt,
            confidence: 1.0,
            frame_index: 1,
            window_len: 0,
            best: None,
            updates: Vec::new(),
        })
    }

    /// Prediction for `frame` without touching the state.
    pub fn predict(
        &self,
        state: &TrackerState,
        frame: &ImageCrop,
        record_attention: bool,
    ) -> Result<(CropTransform, PredictionOutput)> {
        let crop = self.search_crop(&state.last)?;
        let patches = patchify(&crop.sample(frame), self.model.geometry.patch)?;
        let out = predict_search(
            self.params,
            self.model,
            &state.templates,
            &patches,
            record_attention,
        )?;
        Ok((crop, out))
    }

    /// Locates the target in the next frame. On error the state is left
    /// unchanged.
    pub fn track(&self, state: &mut TrackerState, frame: &ImageCrop) -> Result<FrameResult> {
        let (crop, out) = self.predict(state, frame, false)?;
        let b = out.bbox.clamp_unit();
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::Tracking(format!(
                "frame {}: decoded box {:?} has no area",
                state.frame_index + 1,
                out.bbox
            )));
        }
        let rect = crop.to_frame(&b);
        state.last = rect;
        state.confidence = out.confidence;
        state.frame_index += 1;
        Ok(FrameResult {
            rect,
            confidence: out.confidence,
        })
    }

    /// Feeds the latest tracked frame into the update window. At the end of
    /// each window of `update_interval` frames, the dynamic tokens are
    /// re-extracted from the window's best frame if its confidence reaches
    /// the threshold.
    pub fn maybe_update_dynamic(&self, state: &mut TrackerState, frame: &ImageCrop) -> Result<()> {
        if !self.model.variant().uses_dynamic_target() {
            return Ok(());
        }
        state.window_len += 1;
        let better = state
            .best
            .as_ref()
            .is_none_or(|b| state.confidence > b.confidence);
        if better {
            state.best = Some(WindowBest {
                confidence: state.confidence,
                frame_index: state.frame_index,
                rect: state.last,
                region: self.region_patches(frame, &state.last)?,
            });
        }
        if state.window_len < self.run.update_interval {
            return Ok(());
        }
        state.window_len = 0;
        if let Some(best) = state.best.take() {
            if best.confidence >= self.run.update_threshold {
                let p = self.model.geometry.patch;
                let template = Tensor::zeros(&[self.model.geometry.n_template(), p * p * 3]);
                let fresh =
                    embed_templates(self.params, self.model, &template, Some(&best.region))?;
                state.templates.dt = fresh.dt;
                state.templates.db = fresh.db;
                state.updates.push(best.frame_index);
            }
        }
        Ok(())
    }

    /// Tracks a whole sequence given its first-frame box. The first result
    /// is the initial box with confidence 1. A frame that fails with a
    /// tracking error keeps the previous box with confidence 0.
    pub fn run_sequence<'f>(
        &self,
        frames: impl IntoIterator<Item = &'f ImageCrop>,
        init: &Rect,
    ) -> Result<Vec<FrameResult>> {
        let mut it = frames.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Input("sequence has no frames".into()))?;
        let mut state = self.init(first, init)?;
        let mut out = vec![FrameResult {
            rect: *init,
            confidence: 1.0,
        }];
        for frame in it {
            match self.track(&mut state, frame) {
                Ok(r) => {
                    out.push(r);
                    self.maybe_update_dynamic(&mut state, frame)?;
                }
                Err(Error::Tracking(msg)) => {
                    log::warn!("{msg}; holding the previous box");
                    state.frame_index += 1;
                    out.push(FrameResult {
                        rect: state.last,
                        confidence: 0.0,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}
