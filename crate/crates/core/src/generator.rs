//! Prefix-conditioned caption generation: a small causal decoder that is
//! pretrained on the caption corpus and then frozen, plus a trainable map
//! from CSI embeddings to per-layer key/value prefixes.

use candle_core::{DType, Device, Tensor, D};
use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{scalar, BlockShape, Init, LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::objectives::lm_nll;
use crate::optim::{sample_batch, OptimConfig, StepLog, Trainer};
use crate::seed::Rng;
use crate::synth::captions::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Longest token sequence the position table covers.
    pub max_len: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            max_len: 24,
            steps: 300,
            batch_size: 32,
            optim: OptimConfig::with_lr(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefixConfig {
    /// Prefix positions per layer (L_p).
    pub prefix_len: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            prefix_len: 8,
            hidden: 256,
            steps: 300,
            batch_size: 32,
            optim: OptimConfig::with_lr(1e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// 1 means greedy.
    pub beam_width: usize,
    /// Generated tokens allowed before giving up on an end token.
    pub max_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_width: 1, max_tokens: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub config: DecoderConfig,
    pub vocab_size: usize,
}

/// Per-layer `(keys, values)`, each `(B, L_p, d_model)`.
#[derive(Debug, Clone)]
pub struct PrefixBundle {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PrefixBundle {
    pub fn prefix_len(&self) -> usize {
        self.layers.first().map(|(k, _)| k.dims()[1]).unwrap_or(0)
    }

    /// Gathers the given batch rows of every tensor.
    fn select_rows(&self, rows: &[u32]) -> Result<Self> {
        let idx = Tensor::new(rows, &Device::Cpu)?;
        let layers = self
            .layers
            .iter()
            .map(|(k, v)| Ok((k.index_select(&idx, 0)?, v.index_select(&idx, 0)?)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

pub struct Decoder {
    arch: DecoderArch,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Decoder {
    pub fn new(arch: &DecoderArch, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let cfg = &arch.config;
        let d = cfg.d_model;
        if arch.vocab_size <= EOS as usize {
            return Err(Error::Config("decoder vocabulary lacks special tokens".into()));
        }
        let tok_emb = store.get_or_init("decoder.tok_emb", &[arch.vocab_size, d], Init::Normal(0.02), rng)?;
        let pos_emb = store.get_or_init("decoder.pos_emb", &[cfg.max_len, d], Init::Normal(0.02), rng)?;
        let shape = BlockShape { dim: d, heads: cfg.heads, ff_mult: cfg.ff_mult };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("decoder.block{i}"), shape, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, "decoder.ln_f", d, rng)?;
        let head = Linear::new(store, "decoder.head", d, arch.vocab_size, true, rng)?;
        Ok(Self { arch: arch.clone(), tok_emb, pos_emb, blocks, ln_f, head })
    }

    pub fn arch(&self) -> &DecoderArch {
        &self.arch
    }

    /// `(B, T)` token ids to `(B, T, V)` logits.
    pub fn forward(&self, tokens: &Tensor, prefix: Option<&PrefixBundle>) -> Result<Tensor> {
        let (b, t) = tokens.dims2()?;
        let cfg = &self.arch.config;
        if t > cfg.max_len {
            return Err(Error::dim(format!("sequence of {t} tokens exceeds max_len {}", cfg.max_len)));
        }
        if let Some(p) = prefix {
            if p.layers.len() != self.blocks.len() {
                return Err(Error::dim(format!(
                    "prefix has {} layers, decoder has {}",
                    p.layers.len(),
                    self.blocks.len()
                )));
            }
        }
        let d = cfg.d_model;
        let emb = self.tok_emb.index_select(&tokens.flatten_all()?, 0)?.reshape((b, t, d))?;
        let mut h = emb.broadcast_add(&self.pos_emb.narrow(0, 0, t)?)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let kv = prefix.map(|p| (&p.layers[i].0, &p.layers[i].1));
            h = block.forward(&h, kv, true)?;
        }
        let h = self.ln_f.forward(&h)?;
        Ok(self.head.forward(&h)?.reshape((b, t, self.arch.vocab_size))?)
    }

    /// `(B, T)` log-probabilities of `targets` under teacher forcing.
    pub fn target_log_probs(&self, batch: &TokenBatch, prefix: Option<&PrefixBundle>) -> Result<Tensor> {
        let logits = self.forward(&batch.inputs, prefix)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        Ok(logp.gather(&batch.targets.unsqueeze(2)?, 2)?.squeeze(2)?)
    }
}

/// Teacher-forcing tensors for a set of captions: inputs start with the
/// begin token, targets end with the end token, both padded to a common
/// length.
pub struct TokenBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(captions: &[&[u32]]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::dim("empty caption batch"));
        }
        let t = captions.iter().map(|c| c.len() + 1).max().unwrap_or(1);
        let mut inputs = Vec::with_capacity(captions.len() * t);
        let mut targets = Vec::with_capacity(captions.len() * t);
        let mut lengths = Vec::with_capacity(captions.len());
        for c in captions {
            let mut inp = vec![BOS];
            inp.extend_from_slice(c);
            let mut tgt = c.to_vec();
            tgt.push(EOS);
            lengths.push(tgt.len());
            inp.resize(t, PAD);
            tgt.resize(t, PAD);
            inputs.extend(inp);
            targets.extend(tgt);
        }
        let shape = (captions.len(), t);
        Ok(Self {
            inputs: Tensor::from_vec(inputs, shape, &Device::Cpu)?,
            targets: Tensor::from_vec(targets, shape, &Device::Cpu)?,
            lengths,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixArch {
    pub config: PrefixConfig,
    pub embed_dim: usize,
    pub layers: usize,
    pub d_model: usize,
}

impl PrefixArch {
    pub fn for_decoder(config: &PrefixConfig, embed_dim: usize, decoder: &DecoderArch) -> Self {
        Self {
            config: config.clone(),
            embed_dim,
            layers: decoder.config.layers,
            d_model: decoder.config.d_model,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers * self.config.prefix_len * 2 * self.d_model
    }
}

/// Two-layer MLP `d -> hidden -> L·L_p·2·d_model`.
pub struct PrefixMap {
    arch: PrefixArch,
    fc1: Linear,
    fc2: Linear,
}

impl PrefixMap {
    pub fn new(arch: &PrefixArch, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let h = arch.config.hidden;
        let fc1 = Linear::new(store, "prefix.fc1", arch.embed_dim, h, true, rng)?;
        let fc2 = Linear::new(store, "prefix.fc2", h, arch.output_dim(), true, rng)?;
        Ok(Self { arch: arch.clone(), fc1, fc2 })
    }

    pub fn arch(&self) -> &PrefixArch {
        &self.arch
    }

    /// `(B, d)` embeddings to a bundle of `L` key/value pairs.
    pub fn forward(&self, c: &Tensor) -> Result<PrefixBundle> {
        let (b, d) = c.dims2()?;
        if d != self.arch.embed_dim {
            return Err(Error::dim(format!("prefix map expects dim {}, got {d}", self.arch.embed_dim)));
        }
        let out = self.fc2.forward(&self.fc1.forward(c)?.tanh()?)?;
        split_prefix(&out, b, self.arch.layers, self.arch.config.prefix_len, self.arch.d_model)
    }
}

/// Reshapes `(B, L·L_p·2·d_h)` to `L` pairs of `(B, L_p, d_h)`: per layer,
/// per position, the first `d_h` entries are the key, the rest the value.
pub fn split_prefix(out: &Tensor, b: usize, layers: usize, prefix_len: usize, d_h: usize) -> Result<PrefixBundle> {
    let expect = layers * prefix_len * 2 * d_h;
    if out.dims() != [b, expect] {
        return Err(Error::dim(format!("prefix output {:?}, expected [{b}, {expect}]", out.dims())));
    }
    let shaped = out.reshape((b, layers, prefix_len, 2 * d_h))?;
    let layers = (0..layers)
        .map(|l| {
            let layer = shaped.narrow(1, l, 1)?.squeeze(1)?;
            Ok((
                layer.narrow(2, 0, d_h)?.contiguous()?,
                layer.narrow(2, d_h, d_h)?.contiguous()?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrefixBundle { layers })
}

pub struct DecoderRun {
    pub decoder: Decoder,
    pub store: ParamStore,
    pub log: StepLog,
}

/// Stage 0: trains the decoder as an unconditional language model over the
/// given token sequences.
pub fn pretrain_decoder(
    corpus: &[Vec<u32>],
    vocab_size: usize,
    cfg: &DecoderConfig,
    rng: &mut Rng,
) -> Result<DecoderRun> {
    if corpus.is_empty() {
        return Err(Error::Config("decoder pretraining needs a non-empty corpus".into()));
    }
    if let Some(c) = corpus.iter().find(|c| c.len() + 1 > cfg.max_len) {
        return Err(Error::Config(format!(
            "caption of {} tokens does not fit max_len {}",
            c.len(),
            cfg.max_len
        )));
    }
    let arch = DecoderArch { config: cfg.clone(), vocab_size };
    let mut store = ParamStore::new(DType::F32);
    let decoder = Decoder::new(&arch, &mut store, rng)?;
    let mut trainer = Trainer::new(store.vars(), &cfg.optim, cfg.steps)?;
    let mut log = StepLog::new(&["loss", "lr"]);
    let pool: Vec<usize> = (0..corpus.len()).collect();
    for step in 0..cfg.steps {
        let picked = sample_batch(&pool, cfg.batch_size, rng);
        let seqs: Vec<&[u32]> = picked.iter().map(|&i| corpus[i].as_slice()).collect();
        let batch = TokenBatch::new(&seqs)?;
        let loss = lm_nll(&decoder.target_log_probs(&batch, None)?, &batch.lengths)?;
        let lr = trainer.step(&loss)?;
        let l = scalar(&loss)?;
        log.push(step, vec![l, lr]);
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!("s0 step {step}: nll {l:.4}");
        }
    }
    Ok(DecoderRun { decoder, store, log })
}

fn rows_of(table: &Array2<f32>, rows: &[usize]) -> Result<Tensor> {
    let d = table.ncols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend(table.row(r).iter().copied());
    }
    Ok(Tensor::from_vec(data, (rows.len(), d), &Device::Cpu)?)
}

pub struct PrefixRun {
    pub map: PrefixMap,
    pub store: ParamStore,
    pub log: StepLog,
}

/// Stage 3: fits the prefix map so the frozen decoder reproduces
/// `captions[i]` from `embeddings` row `i`, for `i` in `train`.
pub fn train_prefix(
    decoder: &Decoder,
    embeddings: &Array2<f32>,
    captions: &[Vec<u32>],
    train: &[usize],
    cfg: &PrefixConfig,
    rng: &mut Rng,
) -> Result<PrefixRun> {
    if embeddings.nrows() != captions.len() {
        return Err(Error::dim(format!(
            "{} embeddings for {} captions",
            embeddings.nrows(),
            captions.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Config("prefix training needs at least one clip".into()));
    }
    let arch = PrefixArch::for_decoder(cfg, embeddings.ncols(), decoder.arch());
    let mut store = ParamStore::new(DType::F32);
    let map = PrefixMap::new(&arch, &mut store, rng)?;
    let mut trainer = Trainer::new(store.vars(), &cfg.optim, cfg.steps)?;
    let mut log = StepLog::new(&["loss", "lr"]);
    for step in 0..cfg.steps {
        let picked = sample_batch(train, cfg.batch_size, rng);
        let seqs: Vec<&[u32]> = picked.iter().map(|&i| captions[i].as_slice()).collect();
        let batch = TokenBatch::new(&seqs)?;
        let prefix = map.forward(&rows_of(embeddings, &picked)?)?;
        let loss = lm_nll(&decoder.target_log_probs(&batch, Some(&prefix))?, &batch.lengths)?;
        let lr = trainer.step(&loss)?;
        let l = scalar(&loss)?;
        log.push(step, vec![l, lr]);
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!("s3 step {step}: nll {l:.4}");
        }
    }
    Ok(PrefixRun { map, store, log })
}

/// Teacher-forced statistics over a caption set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmStats {
    /// Mean per-sequence negative log-likelihood.
    pub nll: f64,
    /// Fraction of target tokens predicted exactly by argmax.
    pub token_accuracy: f64,
    pub perplexity: f64,
}

/// Scores `captions[i]` for `i` in `idx`, conditioned on the prefix of
/// `embeddings` row `i` when a map is given.
pub fn lm_stats(
    decoder: &Decoder,
    prefix: Option<(&PrefixMap, &Array2<f32>)>,
    captions: &[Vec<u32>],
    idx: &[usize],
) -> Result<LmStats> {
    if idx.is_empty() {
        return Err(Error::dim("no captions to score"));
    }
    let (mut nll_sum, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for chunk in idx.chunks(64) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|&i| captions[i].as_slice()).collect();
        let batch = TokenBatch::new(&seqs)?;
        let bundle = match prefix {
            Some((map, emb)) => Some(map.forward(&rows_of(emb, chunk)?)?),
            None => None,
        };
        let logits = decoder.forward(&batch.inputs, bundle.as_ref())?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let picked = logp.gather(&batch.targets.unsqueeze(2)?, 2)?.squeeze(2)?;
        nll_sum += scalar(&lm_nll(&picked, &batch.lengths)?)? * chunk.len() as f64;
        let argmax = logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
        let targets = batch.targets.to_vec2::<u32>()?;
        for (r, &len) in batch.lengths.iter().enumerate() {
            correct += (0..len).filter(|&t| argmax[r][t] == targets[r][t]).count();
            tokens += len;
        }
    }
    Ok(LmStats {
        nll: nll_sum / idx.len() as f64,
        token_accuracy: correct as f64 / tokens as f64,
        perplexity: (nll_sum / tokens as f64).exp(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub text: String,
    /// No end token within the length bound.
    pub truncated: bool,
}

fn finish(tokens: Vec<u32>, truncated: bool, vocab: &crate::synth::Vocab) -> Generated {
    let text = vocab.decode(&tokens);
    Generated { tokens, text, truncated }
}

/// Log-probabilities of the next token after each sequence in `seqs`
/// (all the same length, each starting with the begin token).
fn next_log_probs(decoder: &Decoder, seqs: &[Vec<u32>], prefix: &PrefixBundle) -> Result<Vec<Vec<f32>>> {
    let t = seqs[0].len();
    let flat: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let inputs = Tensor::from_vec(flat, (seqs.len(), t), &Device::Cpu)?;
    let logits = decoder.forward(&inputs, Some(prefix))?;
    let last = logits.narrow(1, t - 1, 1)?.squeeze(1)?;
    Ok(candle_nn::ops::log_softmax(&last, D::Minus1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Captions for every row of `embeddings`.
pub fn generate_captions(
    decoder: &Decoder,
    map: &PrefixMap,
    embeddings: &Array2<f32>,
    vocab: &crate::synth::Vocab,
    cfg: &DecodeConfig,
) -> Result<Vec<Generated>> {
    if cfg.beam_width == 0 || cfg.max_tokens == 0 {
        return Err(Error::Config("beam_width and max_tokens must be positive".into()));
    }
    if cfg.max_tokens + 1 > decoder.arch().config.max_len {
        return Err(Error::Config(format!(
            "max_tokens {} exceeds decoder capacity {}",
            cfg.max_tokens,
            decoder.arch().config.max_len - 1
        )));
    }
    let n = embeddings.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let all: Vec<usize> = (0..n).collect();
    let bundle = map.forward(&rows_of(embeddings, &all)?)?;
    if cfg.beam_width == 1 {
        greedy(decoder, &bundle, n, vocab, cfg.max_tokens)
    } else {
        (0..n)
            .map(|i| beam(decoder, &bundle.select_rows(&[i as u32])?, vocab, cfg))
            .collect()
    }
}

fn greedy(decoder: &Decoder, bundle: &PrefixBundle, n: usize, vocab: &crate::synth::Vocab, max_tokens: usize) -> Result<Vec<Generated>> {
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; n];
    let mut done = vec![false; n];
    for _ in 0..max_tokens {
        let logp = next_log_probs(decoder, &seqs, bundle)?;
        for i in 0..n {
            let next = if done[i] { PAD } else { argmax(&logp[i]) };
            if next == EOS {
                done[i] = true;
            }
            seqs[i].push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs
        .into_iter()
        .zip(done)
        .map(|(s, d)| {
            let body: Vec<u32> = s[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect();
            finish(body, !d, vocab)
        })
        .collect())
}

fn beam(decoder: &Decoder, bundle: &PrefixBundle, vocab: &crate::synth::Vocab, cfg: &DecodeConfig) -> Result<Generated> {
    // (tokens after BOS, summed log-prob)
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..cfg.max_tokens {
        let seqs: Vec<Vec<u32>> = live
            .iter()
            .map(|(s, _)| std::iter::once(BOS).chain(s.iter().copied()).collect())
            .collect();
        let rows = vec![0u32; seqs.len()];
        let logp = next_log_probs(decoder, &seqs, &bundle.select_rows(&rows)?)?;
        let mut cand: Vec<(usize, u32, f64)> = Vec::new();
        for (b, (_, score)) in live.iter().enumerate() {
            for (tok, &lp) in logp[b].iter().enumerate() {
                cand.push((b, tok as u32, score + lp as f64));
            }
        }
        cand.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        let mut next = Vec::new();
        for (b, tok, score) in cand {
            if next.len() >= cfg.beam_width {
                break;
            }
            let mut s = live[b].0.clone();
            if tok == EOS {
                finished.push((s, score));
            } else {
                s.push(tok);
                next.push((s, score));
            }
        }
        if finished.len() >= cfg.beam_width || next.is_empty() {
            break;
        }
        live = next;
    }
    let best_done = finished.into_iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    Ok(match best_done {
        Some((tokens, _)) => finish(tokens, false, vocab),
        None => {
            let tokens = live.into_iter().next().map(|(s, _)| s).unwrap_or_default();
            finish(tokens, true, vocab)
        }
    })
}
