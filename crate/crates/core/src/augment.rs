//! LocalStaticFaceMix and the photometric/flip augmentation that precedes it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rngs::Rng;
use crate::sampling::MeSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Forehead,
    Chin,
    LeftCheek,
    RightCheek,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Forehead,
        Region::Chin,
        Region::LeftCheek,
        Region::RightCheek,
    ];

    /// Half-open `(rows, cols)` rectangle on an `h × w` image.
    pub fn bounds(self, h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
        let (q1, q3) = (h / 4, 3 * h / 4);
        match self {
            Region::Forehead => ((0, q1), (0, w)),
            Region::Chin => ((q3, h), (0, w)),
            Region::LeftCheek => ((q1, q3), (0, w / 2)),
            Region::RightCheek => ((q1, q3), (w / 2, w)),
        }
    }

    pub fn mirrored(self) -> Region {
        match self {
            Region::LeftCheek => Region::RightCheek,
            Region::RightCheek => Region::LeftCheek,
            r => r,
        }
    }
}

/// Fails unless `h` and `w` are positive multiples of 4.
pub fn check_frame_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::contract(format!(
            "frame height and width must be positive multiples of 4, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Binary `h × w` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub region: Region,
    pub h: usize,
    pub w: usize,
    pub mask: Vec<u8>,
}

impl RegionMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.w + c] != 0
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

pub fn region_mask(region: Region, h: usize, w: usize) -> Result<RegionMask> {
    check_frame_size(h, w)?;
    let ((r0, r1), (c0, c1)) = region.bounds(h, w);
    let mut mask = vec![0u8; h * w];
    for r in r0..r1 {
        mask[r * w + c0..r * w + c1].fill(1);
    }
    Ok(RegionMask { region, h, w, mask })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub apply_probability: f64,
    pub omega: f64,
    pub flip_enabled: bool,
    pub jitter_strength: f64,
    pub photometric_enabled: bool,
    pub lsfm_enabled: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            apply_probability: 0.5,
            omega: 0.5,
            flip_enabled: true,
            jitter_strength: 0.1,
            photometric_enabled: true,
            lsfm_enabled: true,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::config("augment.apply_probability must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config("augment.omega must be in [0, 1]"));
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::config(
                "augment.jitter_strength must be a nonnegative number",
            ));
        }
        Ok(())
    }
}

/// Mixes one `H×W×C` frame with a partner frame inside `mask`:
/// `v·(1−M) + (ω·v + (1−ω)·u)·M`. Pixels outside the mask are copied.
pub fn lsfm_frame(v: &Tensor, partner: &Tensor, mask: &RegionMask, omega: f64) -> Result<Tensor> {
    if v.shape() != partner.shape() {
        return Err(Error::dim("lsfm_frame", v.shape(), partner.shape()));
    }
    let [h, w, c] = v.shape()[..] else {
        return Err(Error::dim("lsfm_frame", v.shape(), &[mask.h, mask.w, 0]));
    };
    if (h, w) != (mask.h, mask.w) {
        return Err(Error::dim("lsfm_frame", v.shape(), &[mask.h, mask.w, c]));
    }
    let mut out = v.clone();
    mix_into(out.data_mut(), partner.data(), mask, c, omega);
    Ok(out)
}

fn mix_into(frame: &mut [f64], partner: &[f64], mask: &RegionMask, c: usize, omega: f64) {
    let ((r0, r1), (c0, c1)) = mask.region.bounds(mask.h, mask.w);
    for r in r0..r1 {
        let s = (r * mask.w + c0) * c;
        let e = (r * mask.w + c1) * c;
        for (x, &u) in frame[s..e].iter_mut().zip(&partner[s..e]) {
            *x = omega * *x + (1.0 - omega) * u;
        }
    }
}

/// One recorded augmentation choice, indexed by position in the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugEvent {
    Photometric {
        sample: usize,
        flipped: bool,
        gain: f64,
        bias: f64,
    },
    Lsfm {
        sample: usize,
        partner: usize,
        region: Region,
    },
    LsfmSkipped {
        reason: String,
    },
}

/// Applies LocalStaticFaceMix to each sequence with probability
/// `apply_probability`, mixing one region of every frame with the onset
/// frame of a different batch member. All draws happen before any mixing.
pub fn lsfm_batch(
    batch: &[MeSequence],
    cfg: &AugConfig,
    rng: &mut Rng,
) -> Result<(Vec<MeSequence>, Vec<AugEvent>)> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        let reason = format!("batch of {n} has no mixing partner");
        return Ok((batch.to_vec(), vec![AugEvent::LsfmSkipped { reason }]));
    }
    let mut plan = Vec::new();
    for i in 0..n {
        let gate = rng.random::<f64>() < cfg.apply_probability;
        let mut partner = rng.random_range(0..n - 1);
        if partner >= i {
            partner += 1;
        }
        let region = Region::ALL[rng.random_range(0..4)];
        if gate {
            plan.push((i, partner, region));
        }
    }

    let mut out = batch.to_vec();
    let mut events = Vec::with_capacity(plan.len());
    for &(i, j, region) in &plan {
        let seq = &batch[i];
        let (h, w, c) = seq.frame_dims();
        if batch[j].frame_dims() != (h, w, c) {
            return Err(Error::dim(
                "lsfm_batch",
                seq.frames.shape(),
                batch[j].frames.shape(),
            ));
        }
        let mask = region_mask(region, h, w)?;
        let partner0 = batch[j].frame(batch[j].keyframes.onset);
        let n = seq.frame_len();
        for frame in out[i].frames.data_mut().chunks_mut(n) {
            mix_into(frame, partner0, &mask, c, cfg.omega);
        }
        events.push(AugEvent::Lsfm {
            sample: i,
            partner: j,
            region,
        });
    }
    Ok((out, events))
}

/// Mirrors every frame left to right.
pub fn hflip(frames: &Tensor) -> Tensor {
    let s = frames.shape();
    let (h, w, c) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let mut out = frames.clone();
    let src = frames.data();
    let dst = out.data_mut();
    for (fi, frame) in dst.chunks_mut(h * w * c).enumerate() {
        let base = fi * h * w * c;
        for r in 0..h {
            for col in 0..w {
                let from = base + (r * w + (w - 1 - col)) * c;
                let to = (r * w + col) * c;
                frame[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    out
}

/// Gated per sequence at `apply_probability`: an optional horizontal mirror
/// and an affine intensity map `a·x + b` (one draw per sequence, clamped to
/// `[0, 1]`) with `a ∈ [1−s, 1+s]`, `b ∈ [−s, s]`.
pub fn photometric_flip(
    seq: &MeSequence,
    cfg: &AugConfig,
    rng: &mut Rng,
) -> Result<(MeSequence, Option<(bool, f64, f64)>)> {
    cfg.validate()?;
    let gate = rng.random::<f64>() < cfg.apply_probability;
    let coin = rng.random::<f64>() < 0.5;
    let s = cfg.jitter_strength;
    let gain = 1.0 + s * rng.random_range(-1.0..=1.0);
    let bias = s * rng.random_range(-1.0..=1.0);
    if !gate {
        return Ok((seq.clone(), None));
    }
    let flipped = cfg.flip_enabled && coin;
    let mut out = seq.clone();
    if flipped {
        out.frames = hflip(&out.frames);
    }
    if s > 0.0 {
        for x in out.frames.data_mut() {
            *x = (gain * *x + bias).clamp(0.0, 1.0);
        }
    }
    Ok((out, Some((flipped, gain, bias))))
}

/// Photometric pass over a batch, then LocalStaticFaceMix, each honouring
/// its enable flag.
pub fn augment_batch(
    batch: &[MeSequence],
    cfg: &AugConfig,
    rng: &mut Rng,
) -> Result<(Vec<MeSequence>, Vec<AugEvent>)> {
    let mut events = Vec::new();
    let mut seqs = Vec::with_capacity(batch.len());
    if cfg.photometric_enabled {
        for (i, seq) in batch.iter().enumerate() {
            let (s, d) = photometric_flip(seq, cfg, rng)?;
            if let Some((flipped, gain, bias)) = d {
                events.push(AugEvent::Photometric {
                    sample: i,
                    flipped,
                    gain,
                    bias,
                });
            }
            seqs.push(s);
        }
    } else {
        seqs = batch.to_vec();
    }
    if cfg.lsfm_enabled {
        let (mixed, ev) = lsfm_batch(&seqs, cfg, rng)?;
        events.extend(ev);
        seqs = mixed;
    }
    Ok((seqs, events))
}
