//! Synthetic sprite videos with ground-truth tracks and controlled
//! deteriorations (motion blur, occlusion, scale jitter), plus the
//! motion-IoU speed categorizer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::serialize::{read_exact, read_u32, read_u64};
use crate::numcore::{Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"STPV";
pub const DATASET_VERSION: u32 = 1;
pub const OCCLUDER_GRAY: f64 = 0.5;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnotatedBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub class_id: u32,
    pub track_id: u32,
}

impl AnnotatedBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        AnnotatedBox {
            x0,
            y0,
            x1,
            y1,
            class_id: 0,
            track_id: 0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &AnnotatedBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn is_degenerate(&self) -> bool {
        !(self.x0 < self.x1 && self.y0 < self.y1)
    }
}

/// Integer pixel rectangle, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    /// Motion blur kernel length in pixels; 1 disables blur.
    pub blur_len: usize,
    /// Blur direction in radians (0 = horizontal).
    pub blur_angle: f64,
    /// Occluder area as a fraction of the sprite box; 0 disables occlusion.
    pub occluder_fraction: f64,
    /// Per-frame probability of degrading a frame.
    pub probability: f64,
    /// Relative scale jitter of the sprite on degraded frames; 0 disables it.
    pub deform_amplitude: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            blur_len: 5,
            blur_angle: 0.0,
            occluder_fraction: 0.6,
            probability: 0.5,
            deform_amplitude: 0.0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blur_len == 0 {
            return Err(Error::Config("blur length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "degradation probability {} not in [0, 1]",
                self.probability
            )));
        }
        if !(0.0..=1.0).contains(&self.occluder_fraction) {
            return Err(Error::Config(format!(
                "occluder fraction {} not in [0, 1]",
                self.occluder_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.deform_amplitude) {
            return Err(Error::Config(format!(
                "deformation amplitude {} not in [0, 1)",
                self.deform_amplitude
            )));
        }
        if !self.blur_angle.is_finite() {
            return Err(Error::Config("blur angle must be finite".into()));
        }
        Ok(())
    }

    fn any_enabled(&self) -> bool {
        self.blur_len > 1 || self.occluder_fraction > 0.0 || self.deform_amplitude > 0.0
    }
}

/// A synthetic video of one moving sprite.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `T` frames of shape `[3 × H × W]`, values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// Sprite box per frame.
    pub track: Vec<AnnotatedBox>,
    pub degraded: Vec<bool>,
    pub class_label: u32,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
}

const SHAPES: [Shape; 4] = [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Cross];

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.15, 0.1],
    [0.1, 0.85, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.9, 0.9],
    [1.0, 0.55, 0.0],
    [0.55, 0.25, 0.8],
];

fn covers(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) are pixel-centre coordinates in [0, 1)² within the sprite box
    match shape {
        Shape::Square => true,
        Shape::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        Shape::Cross => (u - 0.5).abs() <= 0.18 || (v - 0.5).abs() <= 0.18,
    }
}

fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Reflects `p` into `[0, span]` as if bouncing off the frame edges.
fn bounce(p: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let m = p.rem_euclid(2.0 * span);
    if m > span {
        2.0 * span - m
    } else {
        m
    }
}

/// Generates one clip; content is a pure function of the arguments.
pub fn gen_clip(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    spec: &DegradationSpec,
) -> Result<Clip> {
    if frames == 0 || height == 0 || width == 0 || num_classes == 0 {
        return Err(Error::Config("clip dimensions and class count must be positive".into()));
    }
    spec.validate()?;
    let min_side = height.min(width);
    let base_lo = (min_side / 4).max(2);
    let base_hi = (min_side * 3 / 8).max(base_lo);
    let jitter_max = (base_hi as f64 * (1.0 + spec.deform_amplitude)).ceil() as usize;
    if jitter_max > min_side {
        return Err(Error::Config(format!(
            "sprite of up to {jitter_max} px does not fit a {height}x{width} frame"
        )));
    }

    let mut rng = Rng::new(seed);
    let class = rng.below(num_classes as u64) as u32;
    let shape = SHAPES[class as usize % SHAPES.len()];
    let base_color = PALETTE[class as usize % PALETTE.len()];
    let color: Vec<f64> = base_color
        .iter()
        .map(|c| (c + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0))
        .collect();
    let size = rng.range_inclusive(base_lo as i64, base_hi as i64) as f64;

    // background: gray level, a soft diagonal wave and fixed per-pixel grain
    let bg_level = rng.uniform(0.3, 0.5);
    let wave_fx = rng.uniform(0.1, 0.4);
    let wave_fy = rng.uniform(0.1, 0.4);
    let wave_amp = rng.uniform(0.03, 0.08);
    let tint: Vec<f64> = (0..3).map(|_| rng.uniform(-0.04, 0.04)).collect();
    let mut background = Tensor::zeros(&[3, height, width]);
    {
        let grain: Vec<f64> = (0..height * width).map(|_| rng.uniform(-0.04, 0.04)).collect();
        let data = background.data_mut();
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let wave = wave_amp * libm::sin(wave_fx * x as f64 + wave_fy * y as f64);
                    data[(c * height + y) * width + x] = bg_level + tint[c] + wave + grain[y * width + x];
                }
            }
        }
    }

    // trajectory: a speed tier picks how far the sprite drifts over the
    // motion-IoU window (as a fraction of its size); fast sprites also wobble
    let window = MOTION_IOU_WINDOW.min(frames.saturating_sub(1)).max(1) as f64;
    let (drift, amp) = match rng.below(3) {
        0 => (rng.uniform(0.0, 0.02), 0.0),
        1 => (rng.uniform(0.07, 0.14), 0.0),
        _ => (rng.uniform(0.35, 1.2), rng.uniform(0.0, size / 8.0)),
    };
    let speed = (drift * size / window).min(size / 3.0);
    let theta = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    // split the drift so |vx| + |vy| = speed
    let (cx_dir, cy_dir) = (libm::cos(theta), libm::sin(theta));
    let l1 = cx_dir.abs() + cy_dir.abs();
    let (vx, vy) = (speed * cx_dir / l1, speed * cy_dir / l1);
    let omega = rng.uniform(0.2, 0.6);
    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let span_x = (width as f64 - size).max(0.0);
    let span_y = (height as f64 - size).max(0.0);
    let x0 = rng.uniform(0.0, span_x);
    let y0 = rng.uniform(0.0, span_y);

    let mut out_frames = Vec::with_capacity(frames);
    let mut track = Vec::with_capacity(frames);
    let mut degraded = Vec::with_capacity(frames);
    for t in 0..frames {
        let tf = t as f64;
        let wobble = amp * libm::sin(omega * tf + phase);
        let cx = bounce(x0 + vx * tf + wobble, span_x) + size / 2.0;
        let cy = bounce(y0 + vy * tf + wobble * 0.5, span_y) + size / 2.0;

        let is_degraded = spec.any_enabled() && rng.bernoulli(spec.probability);
        let mut s = size;
        if is_degraded && spec.deform_amplitude > 0.0 {
            s = (size * (1.0 + spec.deform_amplitude * rng.uniform(-1.0, 1.0)))
                .round()
                .max(2.0);
        }
        let bx0 = (cx - s / 2.0).round().clamp(0.0, width as f64 - s);
        let by0 = (cy - s / 2.0).round().clamp(0.0, height as f64 - s);
        let bbox = AnnotatedBox {
            x0: bx0,
            y0: by0,
            x1: bx0 + s,
            y1: by0 + s,
            class_id: class,
            track_id: 0,
        };

        let mut frame = background.clone();
        {
            let data = frame.data_mut();
            let (ix0, iy0, side) = (bx0 as usize, by0 as usize, s as usize);
            for y in iy0..iy0 + side {
                for x in ix0..ix0 + side {
                    let u = (x - ix0) as f64 / s + 0.5 / s;
                    let v = (y - iy0) as f64 / s + 0.5 / s;
                    if covers(shape, u, v) {
                        for c in 0..3 {
                            data[(c * height + y) * width + x] = color[c];
                        }
                    }
                }
            }
            for v in data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        if is_degraded {
            if spec.occluder_fraction > 0.0 {
                frame = apply_occlusion(&frame, &bbox, spec.occluder_fraction, &mut rng)?.0;
            }
            if spec.blur_len > 1 {
                frame = apply_motion_blur(&frame, spec.blur_len, spec.blur_angle);
            }
        }
        round_to_f32(&mut frame);
        out_frames.push(frame);
        track.push(bbox);
        degraded.push(is_degraded);
    }
    Ok(Clip {
        seed,
        height,
        width,
        frames: out_frames,
        track,
        degraded,
        class_label: class,
    })
}

/// Clip seeds derived from one dataset seed.
pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    Rng::derive(dataset_seed, &format!("clip{index}")).next_u64()
}

pub fn gen_dataset(
    seed: u64,
    clips: usize,
    frames: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    spec: &DegradationSpec,
) -> Result<Vec<Clip>> {
    (0..clips)
        .map(|i| gen_clip(clip_seed(seed, i), frames, height, width, num_classes, spec))
        .collect()
}

/// Convolution with a normalized line kernel of `len` taps along `angle`.
///
/// Borders wrap around, so every tap permutes the pixels and the mean of
/// each channel is preserved.
pub fn apply_motion_blur(frame: &Tensor, len: usize, angle: f64) -> Tensor {
    if len <= 1 {
        return frame.clone();
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    let half = ((len - 1) / 2) as f64;
    let taps: Vec<(isize, isize)> = (0..len)
        .map(|k| {
            let o = k as f64 - half;
            (libm::round(o * ca) as isize, libm::round(o * sa) as isize)
        })
        .collect();
    let weight = 1.0 / len as f64;
    let src = frame.data();
    let mut out = Tensor::zeros(frame.shape());
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dx, dy) in &taps {
                    let yy = (y as isize + dy).rem_euclid(h as isize) as usize;
                    let xx = (x as isize + dx).rem_euclid(w as isize) as usize;
                    acc += src[(c * h + yy) * w + xx];
                }
                dst[(c * h + y) * w + x] = acc * weight;
            }
        }
    }
    out
}

/// Pastes a gray rectangle covering about `fraction` of `bbox` at a random
/// position inside the box.
pub fn apply_occlusion(frame: &Tensor, bbox: &AnnotatedBox, fraction: f64, rng: &mut Rng) -> Result<(Tensor, Rect)> {
    if bbox.is_degenerate() {
        return Err(Error::Config(format!("degenerate box {bbox:?}")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("occluder fraction {fraction} not in (0, 1]")));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let bx0 = bbox.x0.floor().max(0.0) as usize;
    let by0 = bbox.y0.floor().max(0.0) as usize;
    let bx1 = (bbox.x1.ceil() as usize).min(w);
    let by1 = (bbox.y1.ceil() as usize).min(h);
    if bx1 <= bx0 || by1 <= by0 {
        return Err(Error::Config(format!("box {bbox:?} lies outside the frame")));
    }
    let (bw, bh) = (bx1 - bx0, by1 - by0);
    let side = fraction.sqrt();
    let ow = ((bw as f64 * side).round() as usize).clamp(1, bw);
    let oh = ((bh as f64 * side).round() as usize).clamp(1, bh);
    let ox = bx0 + rng.below((bw - ow + 1) as u64) as usize;
    let oy = by0 + rng.below((bh - oh + 1) as u64) as usize;
    let rect = Rect {
        x0: ox,
        y0: oy,
        x1: ox + ow,
        y1: oy + oh,
    };
    let mut out = frame.clone();
    let data = out.data_mut();
    for c in 0..3 {
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                data[(c * h + y) * w + x] = OCCLUDER_GRAY;
            }
        }
    }
    Ok((out, rect))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpeedCategory {
    Slow,
    Medium,
    Fast,
}

impl SpeedCategory {
    pub const ALL: [SpeedCategory; 3] = [SpeedCategory::Slow, SpeedCategory::Medium, SpeedCategory::Fast];

    /// `> 0.9` slow, `[0.7, 0.9]` medium, `< 0.7` fast.
    pub fn from_miou(miou: f64) -> Self {
        if miou > 0.9 {
            SpeedCategory::Slow
        } else if miou >= 0.7 {
            SpeedCategory::Medium
        } else {
            SpeedCategory::Fast
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SpeedCategory::Slow => "slow",
            SpeedCategory::Medium => "medium",
            SpeedCategory::Fast => "fast",
        }
    }
}

pub const MOTION_IOU_WINDOW: usize = 10;

/// Mean over frames of the mean IoU between each box and the boxes `window`
/// frames before and after it. Windows longer than the track shrink to
/// `len - 1` so short clips still get a score.
pub fn motion_iou(track: &[AnnotatedBox], window: usize) -> Result<f64> {
    if track.len() < 2 {
        return Err(Error::Config(format!(
            "motion IoU needs at least 2 boxes, got {}",
            track.len()
        )));
    }
    let w = window.clamp(1, track.len() - 1);
    let mut total = 0.0;
    let mut frames = 0usize;
    for t in 0..track.len() {
        let mut acc = 0.0;
        let mut n = 0usize;
        if t >= w {
            acc += track[t].iou(&track[t - w]);
            n += 1;
        }
        if t + w < track.len() {
            acc += track[t].iou(&track[t + w]);
            n += 1;
        }
        if n > 0 {
            total += acc / n as f64;
            frames += 1;
        }
    }
    Ok(total / frames as f64)
}

pub fn motion_iou_category(track: &[AnnotatedBox], window: usize) -> Result<(SpeedCategory, f64)> {
    let m = motion_iou(track, window)?;
    Ok((SpeedCategory::from_miou(m), m))
}

pub fn write_dataset_to(w: &mut impl Write, clips: &[Clip]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(clips.len() as u32).to_le_bytes())?;
    for clip in clips {
        w.write_all(&clip.seed.to_le_bytes())?;
        for v in [clip.len(), clip.height, clip.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&clip.class_label.to_le_bytes())?;
        for f in &clip.frames {
            for &v in f.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        for b in &clip.track {
            for v in [b.x0, b.y0, b.x1, b.y1] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            w.write_all(&b.class_id.to_le_bytes())?;
            w.write_all(&b.track_id.to_le_bytes())?;
        }
        let flags: Vec<u8> = clip.degraded.iter().map(|&d| d as u8).collect();
        w.write_all(&flags)?;
    }
    Ok(())
}

fn read_f32(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}

pub fn read_dataset_from(r: &mut impl Read) -> Result<Vec<Clip>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u32(r)?;
    let mut clips = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let seed = read_u64(r)?;
        let t = read_u32(r)? as usize;
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let class_label = read_u32(r)?;
        let per_frame = 3 * height * width;
        let mut frames = Vec::with_capacity(t);
        let mut bytes = vec![0u8; per_frame * 4];
        for _ in 0..t {
            read_exact(r, &mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            frames.push(Tensor::new(vec![3, height, width], data)?);
        }
        let mut track = Vec::with_capacity(t);
        for _ in 0..t {
            let x0 = read_f32(r)?;
            let y0 = read_f32(r)?;
            let x1 = read_f32(r)?;
            let y1 = read_f32(r)?;
            let class_id = read_u32(r)?;
            let track_id = read_u32(r)?;
            track.push(AnnotatedBox {
                x0,
                y0,
                x1,
                y1,
                class_id,
                track_id,
            });
        }
        let mut flags = vec![0u8; t];
        read_exact(r, &mut flags)?;
        let degraded = flags
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("invalid degradation flag {other}"))),
            })
            .collect::<Result<_>>()?;
        clips.push(Clip {
            seed,
            height,
            width,
            frames,
            track,
            degraded,
            class_label,
        });
    }
    Ok(clips)
}

pub fn write_dataset(clips: &[Clip], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, clips)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Clip>> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset_from(&mut r)
}
