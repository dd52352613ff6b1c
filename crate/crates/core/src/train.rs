//! The training loop: augmentation, prompt construction, dual loss under
//! the progressive weighting, AdamW at the scheduled learning rate.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aucodes::{describe_with, embed_frozen, emotion_prompt, AuOrder, TemplateBank};
use crate::augment::{augment_batch, AugEvent};
use crate::config::{PromptSource, RunConfig};
use crate::encoder::{self, Bound, Params};
use crate::error::{Error, Result};
use crate::losses::{clip_loss, focal_loss, loss_weights, one_hot};
use crate::numerics::{AdamWState, Tape, Tensor};
use crate::rngs::{self, Rng};
use crate::sampling::MeSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub clip_loss: Option<f64>,
    pub cls_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Dataset indices of the batch members, in batch order.
    pub samples: Vec<usize>,
    pub events: Vec<AugEvent>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<EpochRecord>,
    pub aug_log: Vec<AugRecord>,
}

/// Builds prompts and caches their frozen embeddings.
pub struct PromptBuilder<'a> {
    cfg: &'a RunConfig,
    bank: TemplateBank,
    classes: &'a [String],
    cache: BTreeMap<String, Vec<f64>>,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(cfg: &'a RunConfig, classes: &'a [String]) -> Result<Self> {
        Ok(PromptBuilder {
            cfg,
            bank: cfg.templates()?,
            classes,
            cache: BTreeMap::new(),
        })
    }

    pub fn text(&self, seq: &MeSequence, rng: &mut Rng) -> Result<String> {
        let p = &self.cfg.prompt;
        match p.source {
            PromptSource::Emotion => {
                let name = self.classes.get(seq.emotion).ok_or_else(|| {
                    Error::contract(format!("emotion {} has no class name", seq.emotion))
                })?;
                Ok(emotion_prompt(name).text)
            }
            PromptSource::Au => {
                let shuffle = match p.order {
                    AuOrder::Fixed => None,
                    AuOrder::Shuffled => Some(&mut *rng),
                };
                let d = describe_with(&seq.au_set, p.style, shuffle)?;
                Ok(self.bank.render_random(rng, &d)?.text)
            }
        }
    }

    pub fn embedding(&mut self, text: &str) -> Result<&[f64]> {
        if !self.cache.contains_key(text) {
            let ids = crate::aucodes::tokenize(text);
            let e = embed_frozen(&ids, self.cfg.prompt.embedder_seed, self.cfg.encoder.d_text)?;
            self.cache.insert(text.to_string(), e.vector);
        }
        Ok(&self.cache[text])
    }
}

fn check_data(cfg: &RunConfig, data: &[MeSequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let e = &cfg.encoder;
    let want = [e.frames, e.height, e.width, e.channels];
    for s in data {
        if s.frames.shape() != want {
            return Err(Error::dim("train", s.frames.shape(), &want));
        }
        if s.emotion >= e.num_classes {
            return Err(Error::contract(format!(
                "label {} out of range for {} classes",
                s.emotion, e.num_classes
            )));
        }
    }
    Ok(())
}

struct BatchLoss {
    clip: Option<f64>,
    cls: f64,
    total: f64,
}

fn batch_step(
    cfg: &RunConfig,
    params: &mut Params,
    opt: &mut AdamWState,
    prompts: &mut PromptBuilder,
    batch: &[MeSequence],
    weights: (f64, f64),
    lr: f64,
    prompt_rng: &mut Rng,
) -> Result<BatchLoss> {
    let ecfg = &cfg.encoder;
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params, true);
    let mut logits = Vec::with_capacity(batch.len());
    let mut vis = Vec::with_capacity(batch.len());
    let align = weights.0 != 0.0;
    for s in batch {
        let f = encoder::encode_video(&mut tape, &p, ecfg, &s.frames)?;
        logits.push(encoder::emotion_head(&mut tape, &p, ecfg, &f)?);
        if align {
            vis.push(encoder::project_vis(&mut tape, &p, f.u)?);
        }
    }
    let scores = tape.concat_rows(&logits)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.emotion).collect();
    let cls = focal_loss(
        &mut tape,
        scores,
        &one_hot(&labels, ecfg.num_classes)?,
        cfg.loss.gamma,
    )?;
    let mut total = tape.scale(cls, weights.1);
    let mut clip_value = None;
    if align {
        let mut emb = Vec::with_capacity(batch.len() * ecfg.d_text);
        for s in batch {
            let text = prompts.text(s, prompt_rng)?;
            emb.extend_from_slice(prompts.embedding(&text)?);
        }
        let e = tape.constant(Tensor::new(vec![batch.len(), ecfg.d_text], emb)?);
        let xt = encoder::project_text(&mut tape, &p, e)?;
        let xv = tape.concat_rows(&vis)?;
        let clip = clip_loss(&mut tape, xv, xt, cfg.loss.tau)?;
        clip_value = Some(tape.value(clip).item()?);
        let wc = tape.scale(clip, weights.0);
        total = tape.add(total, wc)?;
    }
    let total_value = tape.value(total).item()?;
    let cls_value = tape.value(cls).item()?;
    if !total_value.is_finite() {
        return Err(Error::numeric(
            "train",
            format!("non-finite loss: clip {clip_value:?}, cls {cls_value}"),
        ));
    }
    if lr > 0.0 {
        tape.backward(total)?;
        let grads = p.grads(&tape);
        opt.step(params, &grads, lr)?;
    }
    Ok(BatchLoss {
        clip: clip_value,
        cls: cls_value,
        total: total_value,
    })
}

/// Trains from a fresh seeded initialisation. Epochs run `0..=EP`, so the
/// log has `EP + 1` records; with `EP = 0` nothing runs.
pub fn train(cfg: &RunConfig, data: &[MeSequence], classes: &[String]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut params = encoder::init_params(&cfg.encoder, cfg.seed)?;
    let mut opt = AdamWState::new(cfg.adamw());
    let mut prompts = PromptBuilder::new(cfg, classes)?;
    let loss_cfg = cfg.loss_config();
    let schedule = cfg.schedule();
    let mut log = Vec::new();
    let mut aug_log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log,
            aug_log,
        });
    }
    for ep in 0..=cfg.epochs {
        let weights = loss_weights(ep, &loss_cfg)?;
        let lr = schedule.lr_at(ep)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rngs::stream(cfg.seed, "shuffle", ep as u64));
        let mut aug_rng = rngs::stream(cfg.seed, "augment", ep as u64);
        let mut prompt_rng = rngs::stream(cfg.seed, "prompt", ep as u64);
        let (mut clip_sum, mut cls_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<MeSequence> = idx.iter().map(|&i| data[i].clone()).collect();
            let (batch, events) = augment_batch(&batch, &cfg.augment, &mut aug_rng)?;
            if !events.is_empty() {
                aug_log.push(AugRecord {
                    epoch: ep,
                    batch: b,
                    samples: idx.to_vec(),
                    events,
                });
            }
            let l = batch_step(
                cfg,
                &mut params,
                &mut opt,
                &mut prompts,
                &batch,
                weights,
                lr,
                &mut prompt_rng,
            )?;
            let k = batch.len() as f64;
            clip_sum += l.clip.unwrap_or(0.0) * k;
            cls_sum += l.cls * k;
            total_sum += l.total * k;
        }
        let n = data.len() as f64;
        log.push(EpochRecord {
            epoch: ep,
            lambda: weights.0,
            lr,
            clip_loss: (weights.0 != 0.0).then_some(clip_sum / n),
            cls_loss: cls_sum / n,
            total: total_sum / n,
        });
    }
    Ok(TrainOutcome {
        params,
        log,
        aug_log,
    })
}

/// Arg-max class per clip (lowest index wins ties).
pub fn predict(params: &Params, cfg: &RunConfig, data: &[MeSequence]) -> Result<Vec<usize>> {
    data.iter()
        .map(|s| {
            let (_, logits) = encoder::infer(params, &cfg.encoder, &s.frames)?;
            let d = logits.data();
            let mut best = 0;
            for (i, v) in d.iter().enumerate() {
                if *v > d[best] {
                    best = i;
                }
            }
            Ok(best)
        })
        .collect()
}
