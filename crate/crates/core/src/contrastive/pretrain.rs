use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{Similarity, UpstreamConfig};
use crate::contrastive::corpus::SequenceCorpus;
use crate::contrastive::loss::{
    cosine_logits, infonce_from_logits, masked_infonce, representation_drift,
    retrieval_accuracy, ContrastiveBatch,
};
use crate::contrastive::mask::{corrupt, sample_mask, MaskedSequence};
use crate::error::{Error, Result};
use crate::nn::{
    momentum_update, orthogonal, positional_encoding, Adam, Encoder, ParamSet, Projection,
    Transformer,
};
use crate::rng::{stream_rng, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Training objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    /// Masked sequence reconstruction with the Transformer (the method).
    Masked,
    /// Frame-level contrastive baseline: independent stacks, two crop
    /// views, plain InfoNCE, no mask, no Transformer.
    Curl,
}

impl PretrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PretrainMode::Masked => "masked",
            PretrainMode::Curl => "curl",
        }
    }
}

/// Query networks, their momentum key copies, and the optional bilinear
/// similarity matrix.
#[derive(Debug, Clone)]
pub struct UpstreamNets {
    pub encoder: Encoder,
    pub projection: Projection,
    pub transformer: Transformer,
    pub key_encoder: Encoder,
    pub key_projection: Projection,
    pub bilinear: Option<Tensor>,
}

impl UpstreamNets {
    pub fn new(cfg: &UpstreamConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let encoder = Encoder::new(3 * cfg.frames, cfg.crop, cfg.latent, &mut rng)?;
        let projection = Projection::new(cfg.latent, cfg.latent, &mut rng);
        let transformer = Transformer::new(cfg.n_blocks, cfg.latent, cfg.d_ff, &mut rng);
        let bilinear = match cfg.similarity {
            Similarity::Bilinear => Some(orthogonal(cfg.latent, cfg.latent, 1.0, &mut rng)),
            Similarity::Cosine => None,
        };
        // Key networks start as exact copies of the query networks.
        Ok(UpstreamNets {
            key_encoder: encoder.clone(),
            key_projection: projection.clone(),
            encoder,
            projection,
            transformer,
            bilinear,
        })
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub retrieval_acc: Option<f64>,
    pub lr_encoder: f64,
    pub lr_transformer: f64,
    pub updated: bool,
}

/// Periodic evaluation on a fixed (seed-derived) evaluation set.
#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub retrieval_acc: f64,
    pub drift: f64,
    pub loss: f64,
}

pub struct Pretrainer {
    pub nets: UpstreamNets,
    pub mode: PretrainMode,
    cfg: UpstreamConfig,
    adam_encoder: Adam,
    adam_projection: Adam,
    adam_transformer: Adam,
    adam_bilinear: Option<Adam>,
    step: u64,
    seed: u64,
    sample_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    corrupt_rng: ChaCha8Rng,
    crop_rng: ChaCha8Rng,
    pos_enc: Tensor,
}

impl Pretrainer {
    pub fn new(cfg: &UpstreamConfig, mode: PretrainMode, seed: u64) -> Result<Self> {
        let nets = UpstreamNets::new(cfg, seed)?;
        Ok(Pretrainer {
            adam_encoder: Adam::for_params(&nets.encoder.named()),
            adam_projection: Adam::for_params(&nets.projection.named()),
            adam_transformer: Adam::for_params(&nets.transformer.named()),
            adam_bilinear: nets.bilinear.as_ref().map(|b| Adam::new(&[b.numel()])),
            nets,
            mode,
            cfg: cfg.clone(),
            step: 0,
            seed,
            sample_rng: stream_rng(seed, Stream::Sample, 0),
            mask_rng: stream_rng(seed, Stream::Mask, 0),
            corrupt_rng: stream_rng(seed, Stream::Corrupt, 0),
            crop_rng: stream_rng(seed, Stream::Crop, 0),
            pos_enc: positional_encoding(cfg.seq_len, cfg.latent)?,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &UpstreamConfig {
        &self.cfg
    }

    /// One optimization step in the configured mode.
    pub fn step(&mut self, corpus: &SequenceCorpus) -> Result<StepLog> {
        match self.mode {
            PretrainMode::Masked => self.masked_step(corpus),
            PretrainMode::Curl => self.curl_step(corpus),
        }
    }

    /// Masked step: corrupted branch through f_θ → φ → (+p_i) → ξ, clean
    /// branch through the momentum keys, masked InfoNCE, Adam updates, and
    /// the momentum key update.
    fn masked_step(&mut self, corpus: &SequenceCorpus) -> Result<StepLog> {
        let t = self.cfg.seq_len;
        let b = self.cfg.batch;
        let mut windows = Vec::with_capacity(b);
        let mut sequences = Vec::with_capacity(b);
        for _ in 0..b {
            let (ep, start) = corpus.sample_window(t, &mut self.sample_rng);
            let mask = sample_mask(t, self.cfg.mask_prob, &mut self.mask_rng)?;
            let ms = corrupt(corpus, ep, start, t, &mask, &mut self.corrupt_rng)?;
            windows.push((ep, start));
            sequences.push(ms);
        }
        let total_masked: usize = sequences.iter().map(MaskedSequence::masked_count).sum();

        // Crops are drawn even for skipped steps to keep streams aligned.
        let (query_in, key_in) = self.materialize_branches(corpus, &sequences)?;
        if total_masked == 0 {
            self.step += 1;
            return Ok(StepLog {
                step: self.step,
                loss: 0.0,
                retrieval_acc: None,
                lr_encoder: self.cfg.lr_encoder.at(self.step),
                lr_transformer: self.cfg.lr_transformer.at(self.step),
                updated: false,
            });
        }

        // Clean branch: momentum keys, never on the gradient tape.
        let keys = self.key_embed(&key_in)?;

        // Corrupted branch on the tape.
        let tape = Tape::new();
        let enc = self.nets.encoder.on_tape(&tape, "enc", true);
        let proj = self.nets.projection.on_tape(&tape, "proj", true);
        let xi = self.nets.transformer.on_tape(&tape, "xi", true);
        let x = tape.leaf(&query_in);
        let z = enc.forward(&x)?;
        let projected = if self.cfg.use_projection { proj.forward(&z)? } else { z };
        let pos = tape.leaf(&self.pos_enc);

        let mut items = Vec::with_capacity(b);
        let mut acc_hits = 0.0;
        let mut acc_total = 0usize;
        for (i, ms) in sequences.iter().enumerate() {
            let tokens = projected.slice_rows(i * t, t)?.add(&pos)?;
            let (queries, _) = xi.forward(&tokens)?;
            let key_block = slice_tensor_rows(&keys, i * t, t);
            if let Some(acc) =
                retrieval_accuracy(&queries.value(), &key_block, &ms.mask)
            {
                acc_hits += acc * ms.masked_count() as f64;
                acc_total += ms.masked_count();
            }
            items.push(ContrastiveBatch {
                queries,
                keys: key_block,
                mask: ms.mask.clone(),
                temperature: self.cfg.temperature,
            });
        }
        debug_assert!(
            tape.param_names().iter().all(|n| {
                n.starts_with("enc.") || n.starts_with("proj.") || n.starts_with("xi.")
            }),
            "key network leaked onto the gradient tape"
        );

        let loss = masked_infonce(&items)?.expect("masked positions exist");
        let loss_v = loss.scalar_value();
        if !loss_v.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite pretraining loss at step {}; batch windows {windows:?}",
                self.step
            )));
        }
        loss.backward()?;

        self.step += 1;
        let lr_enc = self.cfg.lr_encoder.at(self.step);
        let lr_proj = self.cfg.lr_projection.at(self.step);
        let lr_xi = self.cfg.lr_transformer.at(self.step);
        self.adam_encoder.step(
            &mut self.nets.encoder.named_mut(),
            &collect_grads(&enc.vars()),
            lr_enc,
        )?;
        if self.cfg.use_projection {
            self.adam_projection.step(
                &mut self.nets.projection.named_mut(),
                &collect_grads(&proj.vars()),
                lr_proj,
            )?;
        }
        self.adam_transformer.step(
            &mut self.nets.transformer.named_mut(),
            &collect_grads(&xi.vars()),
            lr_xi,
        )?;
        momentum_update(&self.nets.encoder, &mut self.nets.key_encoder, self.cfg.momentum)?;
        momentum_update(&self.nets.projection, &mut self.nets.key_projection, self.cfg.momentum)?;

        Ok(StepLog {
            step: self.step,
            loss: loss_v,
            retrieval_acc: (acc_total > 0).then(|| acc_hits / acc_total as f64),
            lr_encoder: lr_enc,
            lr_transformer: lr_xi,
            updated: true,
        })
    }

    /// CURL-style baseline step: B independently sampled stacks, two crop
    /// views each, plain InfoNCE over the batch. No mask, no Transformer.
    fn curl_step(&mut self, corpus: &SequenceCorpus) -> Result<StepLog> {
        let b = self.cfg.batch;
        let mut query_views = Vec::with_capacity(b);
        let mut key_views = Vec::with_capacity(b);
        for _ in 0..b {
            let r = corpus.sample_stack(&mut self.sample_rng);
            let stack = corpus.stack(r);
            let (qx, qy) = self.draw_crop(corpus.img);
            let (kx, ky) = self.draw_crop(corpus.img);
            query_views.push(crop_tensor(&stack, qx, qy, self.cfg.crop));
            key_views.push(crop_tensor(&stack, kx, ky, self.cfg.crop));
        }
        let query_in = batch_stacks(&query_views);
        let key_in = batch_stacks(&key_views);
        let keys = self.key_embed(&key_in)?;

        let tape = Tape::new();
        let enc = self.nets.encoder.on_tape(&tape, "enc", true);
        let proj = self.nets.projection.on_tape(&tape, "proj", true);
        let x = tape.leaf(&query_in);
        let z = enc.forward(&x)?;
        let queries = if self.cfg.use_projection { proj.forward(&z)? } else { z };

        let (loss, bilinear_var) = match self.cfg.similarity {
            Similarity::Cosine => {
                let logits = cosine_logits(&queries, &keys, self.cfg.temperature)?;
                (infonce_from_logits(&logits)?.mean(), None)
            }
            Similarity::Bilinear => {
                let w = tape.param("bw", self.nets.bilinear.as_ref().expect("bilinear matrix"));
                let logits = queries
                    .matmul(&w)?
                    .matmul_tb(&tape.leaf(&keys))?
                    .mul_scalar(1.0 / self.cfg.temperature);
                (infonce_from_logits(&logits)?.mean(), Some(w))
            }
        };
        let loss_v = loss.scalar_value();
        if !loss_v.is_finite() {
            return Err(Error::numeric(format!("non-finite curl loss at step {}", self.step)));
        }
        loss.backward()?;

        self.step += 1;
        let lr_enc = self.cfg.lr_encoder.at(self.step);
        self.adam_encoder.step(
            &mut self.nets.encoder.named_mut(),
            &collect_grads(&enc.vars()),
            lr_enc,
        )?;
        if self.cfg.use_projection {
            self.adam_projection.step(
                &mut self.nets.projection.named_mut(),
                &collect_grads(&proj.vars()),
                self.cfg.lr_projection.at(self.step),
            )?;
        }
        if let (Some(w), Some(adam), Some(bt)) =
            (bilinear_var, self.adam_bilinear.as_mut(), self.nets.bilinear.as_mut())
        {
            let g = collect_grads(&[w]);
            let mut params = vec![("bilinear".to_string(), bt)];
            adam.step(&mut params, &g, self.cfg.lr_projection.at(self.step))?;
        }
        momentum_update(&self.nets.encoder, &mut self.nets.key_encoder, self.cfg.momentum)?;
        momentum_update(&self.nets.projection, &mut self.nets.key_projection, self.cfg.momentum)?;

        // In-batch diagnostic: positives on the diagonal.
        let acc = retrieval_accuracy(&queries.value(), &keys, &vec![true; b]);
        Ok(StepLog {
            step: self.step,
            loss: loss_v,
            retrieval_acc: acc,
            lr_encoder: lr_enc,
            lr_transformer: 0.0,
            updated: true,
        })
    }

    /// Deterministic evaluation on a fixed masked evaluation set: pooled
    /// retrieval accuracy, d_z drift, and loss. The set (windows, masks,
    /// corruptions, crops) depends only on the run seed, so the series is
    /// comparable across checkpoints.
    pub fn evaluate(&mut self, corpus: &SequenceCorpus) -> Result<EvalStats> {
        let t = self.cfg.seq_len;
        let mut sample = stream_rng(self.seed, Stream::Eval, 1);
        let mut maskr = stream_rng(self.seed, Stream::Eval, 2);
        let mut corr = stream_rng(self.seed, Stream::Eval, 3);
        let mut cropr = stream_rng(self.seed, Stream::Eval, 4);

        let mut sequences = Vec::with_capacity(self.cfg.eval_batch);
        for _ in 0..self.cfg.eval_batch {
            let (ep, start) = corpus.sample_window(t, &mut sample);
            // At least one masked position per eval sequence so the set is
            // informative at any ρ_m.
            let mask = loop {
                let m = sample_mask(t, self.cfg.mask_prob.max(0.25), &mut maskr)?;
                if m.iter().any(|&x| x) {
                    break m;
                }
            };
            sequences.push(corrupt(corpus, ep, start, t, &mask, &mut corr)?);
        }
        let (query_in, key_in) =
            self.materialize_with(corpus, &sequences, &mut cropr)?;
        let keys = self.key_embed(&key_in)?;

        let tape = Tape::new();
        let enc = self.nets.encoder.on_tape(&tape, "enc", false);
        let proj = self.nets.projection.on_tape(&tape, "proj", false);
        let xi = self.nets.transformer.on_tape(&tape, "xi", false);
        let x = tape.leaf(&query_in);
        let z = enc.forward(&x)?;
        let projected = if self.cfg.use_projection { proj.forward(&z)? } else { z };
        let pos = tape.leaf(&self.pos_enc);

        let (mut hits, mut total, mut drift_sum, mut drift_n) = (0.0, 0usize, 0.0, 0usize);
        let mut items = Vec::new();
        for (i, ms) in sequences.iter().enumerate() {
            let tokens = projected.slice_rows(i * t, t)?.add(&pos)?;
            let (queries, _) = xi.forward(&tokens)?;
            let key_block = slice_tensor_rows(&keys, i * t, t);
            let qv = queries.value();
            if let Some(acc) = retrieval_accuracy(&qv, &key_block, &ms.mask) {
                hits += acc * ms.masked_count() as f64;
                total += ms.masked_count();
            }
            if let Some(d) = representation_drift(&qv, &key_block, &ms.mask) {
                drift_sum += d * ms.masked_count() as f64;
                drift_n += ms.masked_count();
            }
            items.push(ContrastiveBatch {
                queries,
                keys: key_block,
                mask: ms.mask.clone(),
                temperature: self.cfg.temperature,
            });
        }
        let loss = masked_infonce(&items)?.map(|l| l.scalar_value()).unwrap_or(0.0);
        Ok(EvalStats {
            retrieval_acc: hits / total.max(1) as f64,
            drift: drift_sum / drift_n.max(1) as f64,
            loss,
        })
    }

    fn key_embed(&self, input: &Tensor) -> Result<Tensor> {
        let z = self.nets.key_encoder.forward_eval(input)?;
        if self.cfg.use_projection {
            self.nets.key_projection.forward_eval(&z)
        } else {
            Ok(z)
        }
    }

    fn draw_crop(&mut self, img: usize) -> (usize, usize) {
        draw_crop_with(&mut self.crop_rng, img, self.cfg.crop)
    }

    fn materialize_branches(
        &mut self,
        corpus: &SequenceCorpus,
        sequences: &[MaskedSequence],
    ) -> Result<(Tensor, Tensor)> {
        let mut rng = self.crop_rng.clone();
        let out = self.materialize_with(corpus, sequences, &mut rng);
        self.crop_rng = rng;
        out
    }

    fn materialize_with(
        &self,
        corpus: &SequenceCorpus,
        sequences: &[MaskedSequence],
        crop_rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let crop = self.cfg.crop;
        let mut query_views = Vec::new();
        let mut key_views = Vec::new();
        for ms in sequences {
            for i in 0..ms.len() {
                let (qx, qy) = draw_crop_with(crop_rng, corpus.img, crop);
                let (kx, ky) = if self.cfg.shared_crop {
                    (qx, qy)
                } else {
                    draw_crop_with(crop_rng, corpus.img, crop)
                };
                query_views.push(crop_tensor(&ms.corrupted_stack(corpus, i), qx, qy, crop));
                key_views.push(crop_tensor(&ms.original_stack(corpus, i), kx, ky, crop));
            }
        }
        Ok((batch_stacks(&query_views), batch_stacks(&key_views)))
    }
}

fn draw_crop_with(rng: &mut ChaCha8Rng, img: usize, crop: usize) -> (usize, usize) {
    if crop >= img {
        return (0, 0);
    }
    (rng.gen_range(0..=img - crop), rng.gen_range(0..=img - crop))
}

/// Deterministic centered crop, used on the deployment path.
pub fn center_crop(t: &Tensor, crop: usize) -> Tensor {
    let off = (t.shape()[1].saturating_sub(crop)) / 2;
    crop_tensor(t, off, off, crop)
}

/// `[C, H, W] -> [C, crop, crop]` window at offset `(ox, oy)`.
pub(crate) fn crop_tensor(t: &Tensor, ox: usize, oy: usize, crop: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if crop == h && crop == w {
        return t.clone();
    }
    let mut data = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for row in 0..crop {
            let base = ch * h * w + (oy + row) * w + ox;
            data.extend_from_slice(&t.data()[base..base + crop]);
        }
    }
    Tensor::new(vec![c, crop, crop], data).expect("crop shape")
}

fn batch_stacks(stacks: &[Tensor]) -> Tensor {
    let shape = stacks[0].shape().to_vec();
    let mut data = Vec::with_capacity(stacks.len() * stacks[0].numel());
    for s in stacks {
        data.extend_from_slice(s.data());
    }
    let mut out_shape = vec![stacks.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data).expect("batch shape")
}

fn collect_grads(vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()])).collect()
}

fn slice_tensor_rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let cols = t.shape()[1];
    let data = t.data()[start * cols..(start + len) * cols].to_vec();
    Tensor::new(vec![len, cols], data).expect("slice shape")
}
