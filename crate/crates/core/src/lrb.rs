//! Learnable Reference Bank.
//!
//! Every weak sample owns a `p x d` block of prompt vectors. [`fill`] writes
//! the block into the padding slots of the sample's embedded token sequence
//! and switches those slots on in the attention mask; [`enhance`] encodes the
//! filled sequence. [`calibrate`] updates prompt rows by gradient descent on
//! the segmentation loss of a frozen network.
//!
//! Slot mapping: the `k`-th smallest padding position receives prompt row `k`.
//! When there are fewer padding slots than prompt rows the trailing rows are
//! unused; surplus padding stays masked.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Mask, ReferringSample};
use crate::error::{Error, Result};
use crate::model::{seg_loss_with_grad, Network};
pub use crate::params::BlobDtype;
use crate::text::{TokenSequence, Tokens};

pub const PROMPT_INIT_STD: f64 = 0.02;

/// Ascending positions where the attention mask is zero.
pub fn padding_set(attention: &[u8]) -> Vec<usize> {
    attention
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == 0)
        .map(|(l, _)| l)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FillResult {
    pub seq: TokenSequence,
    /// Sequence positions that received a prompt row, in prompt-row order.
    pub filled_positions: Vec<usize>,
}

/// Injects `prompts` (`p x d`, row-major) into the padding slots of `seq`.
pub fn fill(seq: &TokenSequence, prompts: &[f64]) -> Result<FillResult> {
    let d = seq.dim;
    if d == 0 || prompts.len() % d != 0 {
        return Err(Error::Shape(format!(
            "prompt block of {} values is not a multiple of dim {d}",
            prompts.len()
        )));
    }
    let p = prompts.len() / d;
    let omega = padding_set(&seq.attention);
    if omega.len() < p {
        tracing::warn!(
            padding_slots = omega.len(),
            prompt_rows = p,
            "fewer padding slots than prompt rows; trailing prompt rows unused"
        );
    }
    let filled_positions: Vec<usize> = omega.into_iter().take(p).collect();
    let mut out = seq.clone();
    for (k, &l) in filled_positions.iter().enumerate() {
        out.x[l * d..(l + 1) * d].copy_from_slice(&prompts[k * d..(k + 1) * d]);
        out.attention[l] = 1;
    }
    Ok(FillResult {
        seq: out,
        filled_positions,
    })
}

/// Referring embedding of the prompt-filled sequence.
pub fn enhance(seq: &TokenSequence, prompts: &[f64], net: &Network) -> Result<Vec<f64>> {
    net.encode(&fill(seq, prompts)?.seq)
}

/// Gradient w.r.t. the prompt block: row `k` is the sequence gradient at the
/// `k`-th filled position; unused rows are zero.
pub fn fill_backward(filled_positions: &[usize], grad_seq: &[f64], prompt_len: usize, dim: usize) -> Vec<f64> {
    let mut g = vec![0.0; prompt_len * dim];
    for (k, &l) in filled_positions.iter().enumerate() {
        g[k * dim..(k + 1) * dim].copy_from_slice(&grad_seq[l * dim..(l + 1) * dim]);
    }
    g
}

/// Backward rule of the stop-gradient operator: nothing passes.
pub fn stop_gradient_backward(upstream: &[f64]) -> Vec<f64> {
    vec![0.0; upstream.len()]
}

/// How the prompt block of a sample participates in backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptGrad {
    /// No prompt gradient is formed.
    Skip,
    /// Gradient flows into the prompt block.
    Through,
    /// Gradient is routed through a stop-gradient gate; the returned block is
    /// what reaches the bank.
    Severed,
}

pub struct SampleGrad {
    pub loss: f64,
    /// Present unless `PromptGrad::Skip` was requested or no prompts were used.
    pub prompt_grad: Option<Vec<f64>>,
}

/// Loss of one sample and its gradients. `weight` scales all gradients (for
/// batch averaging). Parameter gradients are accumulated into `param_grads`
/// when given.
pub fn sample_grad(
    net: &Network,
    image: &crate::data::Image,
    mask: &Mask,
    tokens: &Tokens,
    prompts: Option<&[f64]>,
    weight: f64,
    mut param_grads: Option<&mut crate::params::ParamSet>,
    prompt_mode: PromptGrad,
) -> Result<SampleGrad> {
    let seq = net.embed(tokens)?;
    let filled = match prompts {
        Some(p) => Some(fill(&seq, p)?),
        None => None,
    };
    let enc_input = filled.as_ref().map_or(&seq, |f| &f.seq);
    let (r, ecache) = net.encode_with_cache(enc_input)?;
    let (logits, mcache) = net.model.forward_with_cache(&net.params, image, &r)?;
    let (loss, mut dlogits) = seg_loss_with_grad(&logits, mask)?;
    if weight != 1.0 {
        dlogits.iter_mut().for_each(|g| *g *= weight);
    }
    let want_prompt = prompts.is_some() && prompt_mode != PromptGrad::Skip;
    if param_grads.is_none() && !want_prompt {
        return Ok(SampleGrad { loss, prompt_grad: None });
    }
    let dr = net
        .model
        .backward(&net.params, &mcache, &dlogits, param_grads.as_deref_mut())?;
    let dseq = net
        .encoder
        .encode_backward(&net.params, &ecache, &dr, param_grads.as_deref_mut())?;
    if let Some(g) = param_grads {
        net.encoder.embed_backward(tokens, &dseq, g)?;
    }
    let prompt_grad = match (filled, prompts) {
        (Some(f), Some(p)) if want_prompt => {
            let d = seq.dim;
            let g = fill_backward(&f.filled_positions, &dseq, p.len() / d, d);
            Some(match prompt_mode {
                PromptGrad::Severed => stop_gradient_backward(&g),
                _ => g,
            })
        }
        _ => None,
    };
    Ok(SampleGrad { loss, prompt_grad })
}

/// Per-weak-sample prompt storage, `rows x prompt_len x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    prompt_len: usize,
    dim: usize,
    values: Vec<f64>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    prompt_len: usize,
    dim: usize,
    rows: usize,
    dtype: String,
    index: BTreeMap<String, usize>,
}

const BANK_INDEX: &str = "bank_index.json";
const BANK_BLOB: &str = "bank.bin";

impl PromptBank {
    /// One Gaussian-initialized row per sample id, in the given order.
    pub fn new<R: Rng>(sample_ids: &[String], prompt_len: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Config("prompt_len must be >= 1".into()));
        }
        let mut index = BTreeMap::new();
        for (j, id) in sample_ids.iter().enumerate() {
            if index.insert(id.clone(), j).is_some() {
                return Err(Error::InvalidInput(format!("duplicate sample id `{id}` in bank")));
            }
        }
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("positive std");
        let values = (0..sample_ids.len() * prompt_len * dim)
            .map(|_| normal.sample(rng))
            .collect();
        Ok(Self {
            prompt_len,
            dim,
            values,
            index,
        })
    }

    /// Builds a bank for `weak` samples after checking that every weak
    /// expression leaves at least `prompt_len` padding slots.
    pub fn for_weak_set<R: Rng>(weak: &[ReferringSample], net: &Network, prompt_len: usize, rng: &mut R) -> Result<Self> {
        let longest = weak
            .iter()
            .map(|s| s.expression.split_whitespace().count())
            .max()
            .unwrap_or(0);
        if longest + 2 + prompt_len > net.max_len {
            return Err(Error::Config(format!(
                "prompt_len {prompt_len} does not fit: max_len {} minus longest weak expression ({longest} words + 2 markers)",
                net.max_len
            )));
        }
        let ids: Vec<String> = weak.iter().map(|s| s.sample_id.clone()).collect();
        Self::new(&ids, prompt_len, net.encoder.dims.dim, rng)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.index.len()
    }

    fn block(&self) -> usize {
        self.prompt_len * self.dim
    }

    pub fn row_of(&self, sample_id: &str) -> Result<usize> {
        self.index
            .get(sample_id)
            .copied()
            .ok_or_else(|| Error::MissingBankRow(sample_id.to_string()))
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.block()..(j + 1) * self.block()]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        let b = self.block();
        &mut self.values[j * b..(j + 1) * b]
    }

    pub fn prompts_for(&self, sample_id: &str) -> Result<&[f64]> {
        Ok(self.row(self.row_of(sample_id)?))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self) -> &BTreeMap<String, usize> {
        &self.index
    }

    pub fn row_checksum(&self, j: usize) -> String {
        let mut h = Sha256::new();
        for v in self.row(j) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (id, j) in &self.index {
            h.update(id.as_bytes());
            h.update((*j as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `bank_index.json` and a little-endian blob. `f64` keeps resumed
    /// runs bit-identical; `f32` is the compact export form.
    pub fn save(&self, dir: &Path, dtype: BlobDtype) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = BankHeader {
            prompt_len: self.prompt_len,
            dim: self.dim,
            rows: self.rows(),
            dtype: dtype.name().into(),
            index: self.index.clone(),
        };
        let hp = dir.join(BANK_INDEX);
        fs::write(&hp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&hp, e))?;
        let bp = dir.join(BANK_BLOB);
        fs::write(&bp, dtype.encode(&self.values)).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hp = dir.join(BANK_INDEX);
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: BankHeader = serde_json::from_str(&text)?;
        let bp = dir.join(BANK_BLOB);
        let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let values = BlobDtype::parse(&header.dtype)?.decode(&bytes)?;
        if values.len() != header.rows * header.prompt_len * header.dim {
            return Err(Error::Shape(format!(
                "bank blob has {} values, header implies {}",
                values.len(),
                header.rows * header.prompt_len * header.dim
            )));
        }
        Ok(Self {
            prompt_len: header.prompt_len,
            dim: header.dim,
            values,
            index: header.index,
        })
    }
}

/// Mean loss of a weak batch before each inner step (`K` entries) and after
/// the last one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationTrace {
    pub step_losses: Vec<f64>,
}

/// Runs `steps` plain gradient-descent updates on the prompt rows of `batch`
/// against a frozen network. The objective is the batch-mean segmentation
/// loss; only rows indexed by `batch` are written.
pub fn calibrate(
    bank: &mut PromptBank,
    batch: &[&ReferringSample],
    frozen: &Network,
    steps: usize,
    lr: f64,
) -> Result<CalibrationTrace> {
    let mut trace = CalibrationTrace::default();
    if steps == 0 || batch.is_empty() {
        return Ok(trace);
    }
    let rows = batch
        .iter()
        .map(|s| bank.row_of(&s.sample_id))
        .collect::<Result<Vec<_>>>()?;
    let tokens = batch
        .iter()
        .map(|s| frozen.tokenize(&s.expression))
        .collect::<Result<Vec<_>>>()?;
    let weight = 1.0 / batch.len() as f64;
    for _ in 0..steps {
        let mut total = 0.0;
        let mut updates = Vec::with_capacity(batch.len());
        for ((s, &j), tok) in batch.iter().zip(&rows).zip(&tokens) {
            let g = sample_grad(
                frozen,
                &s.image,
                &s.mask,
                tok,
                Some(bank.row(j)),
                weight,
                None,
                PromptGrad::Through,
            )?;
            total += g.loss;
            updates.push(g.prompt_grad.expect("prompt gradient requested"));
        }
        for (&j, g) in rows.iter().zip(&updates) {
            for (p, gi) in bank.row_mut(j).iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        trace.step_losses.push(total * weight);
    }
    Ok(trace)
}

/// Mean loss of weak samples under their current prompts (no updates).
pub fn weak_loss(bank: &PromptBank, samples: &[&ReferringSample], net: &Network) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let tok = net.tokenize(&s.expression)?;
        let g = sample_grad(net, &s.image, &s.mask, &tok, Some(bank.prompts_for(&s.sample_id)?), 1.0, None, PromptGrad::Skip)?;
        total += g.loss;
    }
    Ok(total / samples.len().max(1) as f64)
}
