//! Micro-expression sequences and key-frame-preserving temporal downsampling.

use serde::{Deserialize, Serialize};

use crate::aucodes::AuAnnotation;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_FRAMES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFrames {
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
}

impl KeyFrames {
    pub fn new(onset: usize, apex: usize, offset: usize) -> Self {
        KeyFrames {
            onset,
            apex,
            offset,
        }
    }

    /// Checks `onset ≤ apex ≤ offset < len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.onset <= self.apex && self.apex <= self.offset && self.offset < len {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "key frames must satisfy onset <= apex <= offset < {len}, got {}/{}/{}",
                self.onset, self.apex, self.offset
            )))
        }
    }
}

/// A clip of `T×H×W×C` frames in `[0, 1]` with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MeSequence {
    pub frames: Tensor,
    pub subject_id: String,
    pub emotion: usize,
    pub au_set: AuAnnotation,
    pub keyframes: KeyFrames,
}

impl MeSequence {
    pub fn new(
        frames: Tensor,
        subject_id: impl Into<String>,
        emotion: usize,
        au_set: AuAnnotation,
        keyframes: KeyFrames,
    ) -> Result<Self> {
        let [t, h, w, c] = frames.shape()[..] else {
            return Err(Error::dim("sequence", frames.shape(), &[0, 0, 0, 0]));
        };
        debug_assert!(h * w * c > 0);
        keyframes.validate(t)?;
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("frame value {v} outside [0, 1]")));
        }
        Ok(MeSequence {
            frames,
            subject_id: subject_id.into(),
            emotion,
            au_set,
            keyframes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame_len(&self) -> usize {
        let (h, w, c) = self.frame_dims();
        h * w * c
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

/// Chooses `t` raw-frame indices that keep onset, apex, and offset.
///
/// Interior slots are split between the open segments (onset, apex) and
/// (apex, offset) in proportion to their lengths, placed at uniform real
/// spacing and rounded. Rounding collisions move to the nearest free index
/// in the same segment; when a segment is exhausted, indices repeat.
pub fn select_indices(raw_len: usize, kf: KeyFrames, t: usize) -> Result<Vec<usize>> {
    if raw_len == 0 {
        return Err(Error::contract("cannot downsample an empty clip"));
    }
    if t < 3 {
        return Err(Error::contract(format!(
            "target length must be at least 3, got {t}"
        )));
    }
    kf.validate(raw_len)?;
    let mut keys = vec![kf.onset, kf.apex, kf.offset];
    keys.dedup();
    let interior = t - keys.len();
    let free1 = (kf.apex - kf.onset).saturating_sub(1);
    let free2 = (kf.offset - kf.apex).saturating_sub(1);
    let prop = ((interior * (kf.apex - kf.onset)) as f64 / (kf.offset - kf.onset).max(1) as f64)
        .round() as usize;
    let lo = interior.saturating_sub(free2);
    let k1 = if lo <= free1 {
        prop.clamp(lo, free1)
    } else {
        prop.min(interior)
    };
    let k2 = interior - k1;

    let mut out = keys;
    fill_segment(&mut out, kf.onset, kf.apex, k1);
    fill_segment(&mut out, kf.apex, kf.offset, k2);
    out.sort_unstable();
    Ok(out)
}

fn fill_segment(out: &mut Vec<usize>, a: usize, b: usize, k: usize) {
    let mut used: Vec<usize> = Vec::with_capacity(k);
    for j in 1..=k {
        let pos = a as f64 + (b - a) as f64 * j as f64 / (k + 1) as f64;
        let mut idx = pos.round() as usize;
        if (idx <= a || idx >= b || used.contains(&idx)) && b > a + 1 {
            let free = (a + 1..b)
                .filter(|i| !used.contains(i))
                .min_by_key(|&i| (i.abs_diff(idx), i));
            if let Some(f) = free {
                idx = f;
            }
        }
        used.push(idx);
    }
    out.extend(used);
}

/// Downsamples `raw` to `t` frames and remaps its key frames to the first
/// occurrence of each selected key index.
pub fn keyframe_downsample(raw: &MeSequence, t: usize) -> Result<(Vec<usize>, MeSequence)> {
    let idx = select_indices(raw.len(), raw.keyframes, t)?;
    let n = raw.frame_len();
    let mut data = Vec::with_capacity(t * n);
    for &i in &idx {
        data.extend_from_slice(raw.frame(i));
    }
    let (h, w, c) = raw.frame_dims();
    let frames = Tensor::new(vec![t, h, w, c], data)?;
    let first = |k: usize| {
        idx.iter()
            .position(|&i| i == k)
            .expect("key frames are retained")
    };
    let kf = KeyFrames::new(
        first(raw.keyframes.onset),
        first(raw.keyframes.apex),
        first(raw.keyframes.offset),
    );
    let seq = MeSequence {
        frames,
        subject_id: raw.subject_id.clone(),
        emotion: raw.emotion,
        au_set: raw.au_set.clone(),
        keyframes: kf,
    };
    Ok((idx, seq))
}
