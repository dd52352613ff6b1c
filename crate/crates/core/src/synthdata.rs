//! Procedural micro-expression-like clips with AU-localised motion.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aucodes::AuAnnotation;
use crate::augment::{check_frame_size, Region};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rngs;
use crate::sampling::{KeyFrames, MeSequence};

pub const EMOTIONS_7: [&str; 7] = [
    "anger",
    "contempt",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
];
pub const EMOTIONS_3: [&str; 3] = ["negative", "positive", "surprise"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmotionMode {
    #[default]
    #[serde(rename = "3class")]
    ThreeClass,
    #[serde(rename = "7class")]
    SevenClass,
}

impl EmotionMode {
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            EmotionMode::ThreeClass => &EMOTIONS_3,
            EmotionMode::SevenClass => &EMOTIONS_7,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Class index of a fine-grained emotion name.
    pub fn class_of(self, emotion: &str) -> Result<usize> {
        let fine = EMOTIONS_7
            .iter()
            .position(|e| *e == emotion)
            .ok_or_else(|| Error::contract(format!("unknown emotion {emotion:?}")))?;
        Ok(match self {
            EmotionMode::SevenClass => fine,
            EmotionMode::ThreeClass => match emotion {
                "happiness" => 1,
                "surprise" => 2,
                _ => 0,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    pub aus: Vec<u32>,
    pub emotion: String,
}

/// AU set → fine-grained emotion.
#[derive(Clone, Debug, PartialEq)]
pub struct AuEmotionMap {
    entries: Vec<(AuAnnotation, String)>,
}

pub fn default_map_entries() -> Vec<MapEntry> {
    [
        (&[6, 12][..], "happiness"),
        (&[1, 2, 5], "surprise"),
        (&[4, 7], "anger"),
        (&[9, 10], "disgust"),
        (&[1, 4], "sadness"),
        (&[20], "fear"),
        (&[12, 14], "contempt"),
    ]
    .iter()
    .map(|(a, e)| MapEntry {
        aus: a.to_vec(),
        emotion: e.to_string(),
    })
    .collect()
}

impl AuEmotionMap {
    pub fn new(entries: &[MapEntry]) -> Result<Self> {
        let mut out: Vec<(AuAnnotation, String)> = Vec::new();
        for e in entries {
            let ann = AuAnnotation::new(&e.aus)?;
            EmotionMode::SevenClass.class_of(&e.emotion)?;
            if out.iter().any(|(a, _)| *a == ann) {
                return Err(Error::contract(format!("AU set {ann} mapped twice")));
            }
            out.push((ann, e.emotion.clone()));
        }
        if out.is_empty() {
            return Err(Error::contract("AU-emotion map is empty"));
        }
        Ok(AuEmotionMap { entries: out })
    }

    pub fn entries(&self) -> &[(AuAnnotation, String)] {
        &self.entries
    }
}

impl Default for AuEmotionMap {
    fn default() -> Self {
        AuEmotionMap::new(&default_map_entries()).expect("default map is valid")
    }
}

pub fn au_to_emotion(
    au_set: &AuAnnotation,
    map: &AuEmotionMap,
    mode: EmotionMode,
) -> Result<usize> {
    let (_, e) = map
        .entries
        .iter()
        .find(|(a, _)| a == au_set)
        .ok_or_else(|| Error::contract(format!("AU set {au_set} has no emotion mapping")))?;
    mode.class_of(e)
}

struct AuShape {
    centers: &'static [(f64, f64)],
    sign: f64,
}

/// Normalised `(row, col)` bump centres and polarity for each AU.
fn au_shape(id: u8) -> AuShape {
    let (centers, sign): (&'static [(f64, f64)], f64) = match id {
        1 => (&[(0.14, 0.40), (0.14, 0.60)], 1.0),
        2 => (&[(0.12, 0.22), (0.12, 0.78)], 1.0),
        4 => (&[(0.20, 0.42), (0.20, 0.58)], -1.0),
        5 => (&[(0.32, 0.30), (0.32, 0.70)], 1.0),
        6 => (&[(0.55, 0.25), (0.55, 0.75)], 1.0),
        7 => (&[(0.38, 0.30), (0.38, 0.70)], -1.0),
        9 => (&[(0.45, 0.44), (0.45, 0.56)], 1.0),
        10 => (&[(0.66, 0.40), (0.66, 0.60)], 1.0),
        12 => (&[(0.80, 0.30), (0.80, 0.70)], 1.0),
        14 => (&[(0.83, 0.20), (0.83, 0.80)], -1.0),
        15 => (&[(0.88, 0.30), (0.88, 0.70)], -1.0),
        16 => (&[(0.90, 0.50)], -1.0),
        17 => (&[(0.95, 0.50)], 1.0),
        20 => (&[(0.84, 0.12), (0.84, 0.88)], 1.0),
        23 => (&[(0.80, 0.45), (0.80, 0.55)], -1.0),
        24 => (&[(0.83, 0.50)], -1.0),
        25 => (&[(0.86, 0.50)], 1.0),
        28 => (&[(0.86, 0.40), (0.86, 0.60)], -1.0),
        _ => (&[], 0.0),
    };
    AuShape { centers, sign }
}

fn region_at(y: f64, x: f64) -> Region {
    if y < 0.25 {
        Region::Forehead
    } else if y >= 0.75 {
        Region::Chin
    } else if x < 0.5 {
        Region::LeftCheek
    } else {
        Region::RightCheek
    }
}

/// Regions touched by an AU's motion.
pub fn au_regions(id: u8) -> Vec<Region> {
    let mut out: Vec<Region> = au_shape(id)
        .centers
        .iter()
        .map(|&(y, x)| region_at(y, x))
        .collect();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub raw_len_min: usize,
    pub raw_len_max: usize,
    pub noise_std: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Bump standard deviation as a fraction of the smaller frame side.
    pub bump_sigma: f64,
    pub emotion_mode: EmotionMode,
    /// Relative frequency of each class; empty means uniform.
    pub class_weights: Vec<f64>,
    pub au_map: Vec<MapEntry>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_subjects: 8,
            samples_per_subject: 15,
            height: 64,
            width: 64,
            channels: 1,
            raw_len_min: 24,
            raw_len_max: 48,
            noise_std: 0.01,
            intensity_min: 0.15,
            intensity_max: 0.3,
            bump_sigma: 0.06,
            emotion_mode: EmotionMode::ThreeClass,
            class_weights: Vec::new(),
            au_map: default_map_entries(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_frame_size(self.height, self.width)?;
        if self.num_subjects == 0 || self.samples_per_subject == 0 || self.channels == 0 {
            return Err(Error::contract(
                "synth: subject, sample, and channel counts must be positive",
            ));
        }
        if self.raw_len_min < 3 || self.raw_len_min > self.raw_len_max {
            return Err(Error::contract(
                "synth: need 3 <= raw_len_min <= raw_len_max",
            ));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.noise_std)
            || !nonneg(self.intensity_min)
            || self.intensity_min > self.intensity_max
            || !self.intensity_max.is_finite()
        {
            return Err(Error::contract(
                "synth: noise and intensity range must be finite and ordered",
            ));
        }
        if !(self.bump_sigma > 0.0 && self.bump_sigma.is_finite()) {
            return Err(Error::contract("synth: bump_sigma must be positive"));
        }
        let classes = self.emotion_mode.class_names().len();
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != classes
                || self.class_weights.iter().any(|w| !nonneg(*w))
                || self.class_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::contract(format!(
                "synth: class_weights needs {classes} nonnegative entries with positive sum"
            )));
        }
        let map = AuEmotionMap::new(&self.au_map)?;
        for c in 0..classes {
            let w = self.class_weights.get(c).copied().unwrap_or(1.0);
            if w > 0.0
                && !map
                    .entries
                    .iter()
                    .any(|(a, _)| au_to_emotion(a, &map, self.emotion_mode).ok() == Some(c))
            {
                return Err(Error::contract(format!(
                    "synth: class {c} has weight but no AU set"
                )));
            }
        }
        Ok(())
    }
}

/// Smooth subject appearance in roughly `[0.3, 0.7]`.
pub fn subject_base(cfg: &SynthConfig, subject: usize) -> Vec<f64> {
    let mut rng = rngs::stream(cfg.seed, "subject", subject as u64);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.06),
            )
        })
        .collect();
    let level = rng.random_range(0.45..0.55);
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
            let v: f64 = waves
                .iter()
                .map(|(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos())
                .sum();
            out.push(level + v);
        }
    }
    out
}

/// Signed AU motion field at full intensity, each bump confined to the
/// region containing its centre.
pub fn motion_field(cfg: &SynthConfig, au_set: &AuAnnotation) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let sigma = cfg.bump_sigma;
    let mut out = vec![0.0; h * w];
    for &id in au_set.codes() {
        let shape = au_shape(id);
        for &(cy, cx) in shape.centers {
            let region = region_at(cy, cx);
            let ((r0, r1), (c0, c1)) = region.bounds(h, w);
            for r in r0..r1 {
                for c in c0..c1 {
                    let y = (r as f64 + 0.5) / h as f64;
                    let x = (c as f64 + 0.5) / w as f64;
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    out[r * w + c] += shape.sign * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    out
}

/// Piecewise-linear onset→apex→offset weight in `[0, 1]`.
pub fn envelope(t: usize, kf: KeyFrames) -> f64 {
    let t = t as f64;
    let (o, a, f) = (kf.onset as f64, kf.apex as f64, kf.offset as f64);
    if t == a {
        1.0
    } else if t <= o || t >= f {
        0.0
    } else if t < a {
        (t - o) / (a - o)
    } else {
        (f - t) / (f - a)
    }
}

fn pick_weighted(rng: &mut rngs::Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Generates one raw clip.
pub fn gen_sample(
    cfg: &SynthConfig,
    map: &AuEmotionMap,
    base: &[f64],
    subject: usize,
    index: usize,
) -> Result<MeSequence> {
    let mut rng = rngs::stream(cfg.seed, "sample", ((subject as u64) << 32) | index as u64);
    let classes = cfg.emotion_mode.class_names().len();
    let weights = if cfg.class_weights.is_empty() {
        vec![1.0; classes]
    } else {
        cfg.class_weights.clone()
    };
    let class = pick_weighted(&mut rng, &weights);
    let candidates: Vec<&AuAnnotation> = map
        .entries
        .iter()
        .filter(|(a, _)| au_to_emotion(a, map, cfg.emotion_mode).ok() == Some(class))
        .map(|(a, _)| a)
        .collect();
    if candidates.is_empty() {
        return Err(Error::contract(format!("no AU set maps to class {class}")));
    }
    let au_set = candidates[rng.random_range(0..candidates.len())].clone();

    let n = rng.random_range(cfg.raw_len_min..=cfg.raw_len_max);
    let onset = rng.random_range(0..=n / 4);
    let offset = rng.random_range((3 * n / 4).max(onset + 2)..n);
    let span = offset - onset;
    let apex = onset
        + rng
            .random_range((span * 3 / 10).max(1)..=(span * 7 / 10).max(1))
            .min(span - 1);
    let kf = KeyFrames::new(onset, apex, offset);
    let intensity = rng.random_range(cfg.intensity_min..=cfg.intensity_max);

    let field = motion_field(cfg, &au_set);
    let (hw, ch) = (cfg.height * cfg.width, cfg.channels);
    let mut data = Vec::with_capacity(n * hw * ch);
    for t in 0..n {
        let e = intensity * envelope(t, kf);
        for p in 0..hw {
            let clean = base[p] + e * field[p];
            for _ in 0..ch {
                let noise = if cfg.noise_std > 0.0 {
                    cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push((clean + noise).clamp(0.0, 1.0));
            }
        }
    }
    let frames = Tensor::new(vec![n, cfg.height, cfg.width, ch], data)?;
    let emotion = au_to_emotion(&au_set, map, cfg.emotion_mode)?;
    MeSequence::new(frames, subject_name(cfg, subject), emotion, au_set, kf)
}

pub fn subject_name(cfg: &SynthConfig, subject: usize) -> String {
    let width = cfg.num_subjects.to_string().len().max(2);
    format!("s{:0width$}", subject + 1)
}

/// All raw clips, subject-major.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<MeSequence>> {
    cfg.validate()?;
    let map = AuEmotionMap::new(&cfg.au_map)?;
    let mut out = Vec::with_capacity(cfg.num_subjects * cfg.samples_per_subject);
    for s in 0..cfg.num_subjects {
        let base = subject_base(cfg, s);
        for i in 0..cfg.samples_per_subject {
            out.push(gen_sample(cfg, &map, &base, s, i)?);
        }
    }
    Ok(out)
}
