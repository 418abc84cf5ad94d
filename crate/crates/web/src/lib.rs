//! Browser demo: generate and inspect a synthetic clip, see which support
//! frames a given stride/count picks, and categorize a moving box by
//! motion IoU.

use wasm_bindgen::prelude::*;

use stpn_core::predictor::{sample_support_indices, Boundary, SupportSpec};
use stpn_core::synthvid::{gen_clip, motion_iou_category, AnnotatedBox, Clip, DegradationSpec, MOTION_IOU_WINDOW};

fn js_err(e: stpn_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated clip held on the wasm side.
#[wasm_bindgen]
pub struct ClipView {
    clip: Clip,
    category: String,
    miou: f64,
}

#[wasm_bindgen]
impl ClipView {
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        frames: usize,
        size: usize,
        classes: usize,
        blur_len: usize,
        occl_frac: f64,
        degrade_prob: f64,
    ) -> Result<ClipView, JsError> {
        let spec = DegradationSpec {
            blur_len,
            occluder_fraction: occl_frac,
            probability: degrade_prob,
            ..DegradationSpec::default()
        };
        let clip = gen_clip(seed, frames, size, size, classes, &spec).map_err(js_err)?;
        let (category, miou) = if clip.len() >= 2 {
            let (c, m) = motion_iou_category(&clip.track, MOTION_IOU_WINDOW).map_err(js_err)?;
            (c.as_str().to_string(), m)
        } else {
            ("slow".to_string(), 1.0)
        };
        Ok(ClipView { clip, category, miou })
    }

    pub fn frames(&self) -> usize {
        self.clip.len()
    }

    pub fn width(&self) -> usize {
        self.clip.width
    }

    pub fn height(&self) -> usize {
        self.clip.height
    }

    #[wasm_bindgen(js_name = classLabel)]
    pub fn class_label(&self) -> u32 {
        self.clip.class_label
    }

    pub fn degraded(&self, t: usize) -> bool {
        self.clip.degraded.get(t).copied().unwrap_or(false)
    }

    #[wasm_bindgen(js_name = speedCategory)]
    pub fn speed_category(&self) -> String {
        self.category.clone()
    }

    pub fn miou(&self) -> f64 {
        self.miou
    }

    /// Frame `t` as RGBA bytes, optionally with the ground-truth box outlined.
    #[wasm_bindgen(js_name = frameRgba)]
    pub fn frame_rgba(&self, t: usize, show_box: bool) -> Result<Vec<u8>, JsError> {
        let frame = self
            .clip
            .frames
            .get(t)
            .ok_or_else(|| JsError::new(&format!("frame {t} out of range")))?;
        let (h, w) = (self.clip.height, self.clip.width);
        let data = frame.data();
        let mut out = vec![255u8; h * w * 4];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = data[(c * h + y) * w + x].clamp(0.0, 1.0);
                    out[(y * w + x) * 4 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        if show_box {
            let b = self.clip.track[t];
            let (x0, y0) = (b.x0 as usize, b.y0 as usize);
            let (x1, y1) = ((b.x1 as usize).min(w) - 1, (b.y1 as usize).min(h) - 1);
            let mut mark = |x: usize, y: usize| {
                let i = (y * w + x) * 4;
                out[i..i + 3].copy_from_slice(&[255, 255, 255]);
            };
            for x in x0..=x1 {
                mark(x, y0);
                mark(x, y1);
            }
            for y in y0..=y1 {
                mark(x0, y);
                mark(x1, y);
            }
        }
        Ok(out)
    }
}

/// Support frame indices around `t` for stride `s` and count `k`.
#[wasm_bindgen(js_name = supportIndices)]
pub fn support_indices(t: usize, s: usize, k: usize, len: usize, clamp: bool) -> Result<Vec<u32>, JsError> {
    let spec = SupportSpec {
        stride: s,
        count: k,
        boundary: if clamp { Boundary::Clamp } else { Boundary::Reject },
    };
    let idx = sample_support_indices(t, &spec, len).map_err(js_err)?;
    Ok(idx.into_iter().map(|i| i as u32).collect())
}

/// Motion IoU of a square box of side `size` moving `dx`, `dy` pixels per
/// frame for `frames` frames; returns `"category:miou"`.
#[wasm_bindgen(js_name = categorizeShift)]
pub fn categorize_shift(size: f64, dx: f64, dy: f64, frames: usize) -> Result<String, JsError> {
    let track: Vec<AnnotatedBox> = (0..frames)
        .map(|t| {
            let (x, y) = (dx * t as f64, dy * t as f64);
            AnnotatedBox::new(x, y, x + size, y + size)
        })
        .collect();
    let (cat, m) = motion_iou_category(&track, MOTION_IOU_WINDOW).map_err(js_err)?;
    Ok(format!("{}:{m:.4}", cat.as_str()))
}
