//! Word-level tokenization, token embedding and a one-layer masked
//! self-attention encoder that maps `(X, A)` to a referring embedding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        if f.tokens.len() < SPECIALS.len() || f.tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidInput(
                "vocabulary must start with <pad> <unk> <bos> <eos>".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            tokens: f.tokens,
            index,
        })
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Specials first, then every distinct lower-cased word in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Token ids and attention mask, both of length `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub attention: Vec<u8>,
}

/// `[BOS, w_1, .., w_k, EOS, PAD..]`, truncated to `max_len - 2` words.
pub fn tokenize(expression: &str, vocab: &Vocabulary, max_len: usize) -> Result<Tokens> {
    if max_len < 3 {
        return Err(Error::InvalidInput(format!(
            "max_len must be >= 3, got {max_len}"
        )));
    }
    let ws: Vec<String> = words(expression).collect();
    if ws.is_empty() {
        return Err(Error::InvalidInput("empty expression".into()));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(ws.iter().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(EOS);
    let attention = (0..max_len).map(|l| u8::from(l < ids.len())).collect();
    ids.resize(max_len, PAD);
    Ok(Tokens { ids, attention })
}

/// Embedded sequence: `x` is `len x dim` row-major, `attention` has length `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub x: Vec<f64>,
    pub attention: Vec<u8>,
    pub dim: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.attention.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attention.is_empty()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.x[l * self.dim..(l + 1) * self.dim]
    }
}

/// Fixed sinusoidal position code for position `pos`.
pub fn position_code(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub dim: usize,
    pub out_dim: usize,
}

/// Intermediate values of one encoder forward pass.
#[derive(Clone, Debug)]
pub struct EncodeCache {
    valid: Vec<usize>,
    x: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    len: usize,
}

/// Embedding table + sinusoidal positions + one masked single-head
/// self-attention layer with a residual connection, masked mean-pool and a
/// linear output map. Parameters live under the `text.` prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub dims: EncoderDims,
}

impl TextEncoder {
    pub fn new(dims: EncoderDims) -> Self {
        Self { dims }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) {
        let d = self.dims.dim;
        let mut draw = |shape: Vec<usize>, std: f64| {
            let n: usize = shape.iter().product();
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
        };
        let attn_std = 1.0 / (d as f64).sqrt();
        params.insert("text.embed", draw(vec![self.dims.vocab_size, d], 0.5));
        params.insert("text.wq", draw(vec![d, d], attn_std));
        params.insert("text.wk", draw(vec![d, d], attn_std));
        params.insert("text.wv", draw(vec![d, d], attn_std));
        params.insert("text.wo", draw(vec![self.dims.out_dim, d], attn_std));
        params.insert("text.bo", Tensor::zeros(vec![self.dims.out_dim]));
    }

    /// `X[l] = table[id[l]] + pos(l)` where `A[l] = 1`, zero rows elsewhere.
    pub fn embed(&self, params: &ParamSet, tokens: &Tokens) -> Result<TokenSequence> {
        let d = self.dims.dim;
        let table = params.get("text.embed")?.data();
        let len = tokens.ids.len();
        if tokens.attention.len() != len {
            return Err(Error::Shape("ids and attention differ in length".into()));
        }
        let mut x = vec![0.0; len * d];
        for l in 0..len {
            if tokens.attention[l] == 0 {
                continue;
            }
            let id = tokens.ids[l];
            if id >= self.dims.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.dims.vocab_size
                )));
            }
            let pe = position_code(l, d);
            for c in 0..d {
                x[l * d + c] = table[id * d + c] + pe[c];
            }
        }
        Ok(TokenSequence {
            x,
            attention: tokens.attention.clone(),
            dim: d,
        })
    }

    /// Scatters `grad_x` rows back into the embedding-table gradient.
    pub fn embed_backward(&self, tokens: &Tokens, grad_x: &[f64], grads: &mut ParamSet) -> Result<()> {
        let d = self.dims.dim;
        let g = grads.get_mut("text.embed")?.data_mut();
        for (l, (&id, &a)) in tokens.ids.iter().zip(&tokens.attention).enumerate() {
            if a == 0 {
                continue;
            }
            for c in 0..d {
                g[id * d + c] += grad_x[l * d + c];
            }
        }
        Ok(())
    }

    pub fn encode(&self, params: &ParamSet, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.encode_with_cache(params, seq).map(|(r, _)| r)
    }

    pub fn encode_with_cache(&self, params: &ParamSet, seq: &TokenSequence) -> Result<(Vec<f64>, EncodeCache)> {
        let d = self.dims.dim;
        if seq.dim != d || seq.x.len() != seq.len() * d {
            return Err(Error::Shape(format!(
                "sequence rows must have dim {d}, got {}",
                seq.dim
            )));
        }
        let valid: Vec<usize> = (0..seq.len()).filter(|&l| seq.attention[l] != 0).collect();
        if valid.is_empty() {
            return Err(Error::NoAttendableTokens);
        }
        let wq = params.get("text.wq")?.data();
        let wk = params.get("text.wk")?.data();
        let wv = params.get("text.wv")?.data();
        let wo = params.get("text.wo")?.data();
        let bo = params.get("text.bo")?.data();

        let x: Vec<Vec<f64>> = valid.iter().map(|&l| seq.row(l).to_vec()).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|xi| crate::nn::linear(wq, None, xi, d)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|xi| crate::nn::linear(wk, None, xi, d)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|xi| crate::nn::linear(wv, None, xi, d)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        let n = valid.len();
        let mut attn = Vec::with_capacity(n);
        let mut pooled = vec![0.0; d];
        for i in 0..n {
            let scores: Vec<f64> = (0..n).map(|j| dot(&q[i], &k[j]) * scale).collect();
            let a = softmax(&scores);
            for c in 0..d {
                let o: f64 = (0..n).map(|j| a[j] * v[j][c]).sum();
                pooled[c] += x[i][c] + o;
            }
            attn.push(a);
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        let r = crate::nn::linear(wo, Some(bo), &pooled, self.dims.out_dim);
        Ok((
            r,
            EncodeCache {
                valid,
                x,
                q,
                k,
                v,
                attn,
                pooled,
                len: seq.len(),
            },
        ))
    }

    /// Backpropagates `grad_r`; returns the `len x dim` gradient w.r.t. the
    /// input sequence (zero on masked rows) and accumulates parameter
    /// gradients into `grads` when given.
    pub fn encode_backward(
        &self,
        params: &ParamSet,
        cache: &EncodeCache,
        grad_r: &[f64],
        mut grads: Option<&mut ParamSet>,
    ) -> Result<Vec<f64>> {
        let d = self.dims.dim;
        let n = cache.valid.len();
        let wq = params.get("text.wq")?.data();
        let wk = params.get("text.wk")?.data();
        let wv = params.get("text.wv")?.data();
        let wo = params.get("text.wo")?.data();

        let dpooled = match grads.as_deref_mut() {
            Some(g) => {
                let gb = g.get_mut("text.bo")?.data_mut();
                gb.iter_mut().zip(grad_r).for_each(|(a, b)| *a += b);
                crate::nn::linear_backward(wo, &cache.pooled, grad_r, Some(g.get_mut("text.wo")?.data_mut()))
            }
            None => crate::nn::linear_backward(wo, &cache.pooled, grad_r, None),
        };
        let dh: Vec<f64> = dpooled.iter().map(|g| g / n as f64).collect();

        let scale = 1.0 / (d as f64).sqrt();
        let mut dx: Vec<Vec<f64>> = vec![dh.clone(); n];
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for i in 0..n {
            let a = &cache.attn[i];
            // do_i = dh
            let da: Vec<f64> = (0..n).map(|j| dot(&dh, &cache.v[j])).collect();
            let mean: f64 = (0..n).map(|j| a[j] * da[j]).sum();
            for j in 0..n {
                for c in 0..d {
                    dv[j][c] += a[j] * dh[c];
                }
                let ds = a[j] * (da[j] - mean) * scale;
                for c in 0..d {
                    dq[i][c] += ds * cache.k[j][c];
                    dk[j][c] += ds * cache.q[i][c];
                }
            }
        }
        for i in 0..n {
            let xi = &cache.x[i];
            let (gq, gk, gv) = match grads.as_deref_mut() {
                Some(g) => {
                    let gq = crate::nn::linear_backward(wq, xi, &dq[i], Some(g.get_mut("text.wq")?.data_mut()));
                    let gk = crate::nn::linear_backward(wk, xi, &dk[i], Some(g.get_mut("text.wk")?.data_mut()));
                    let gv = crate::nn::linear_backward(wv, xi, &dv[i], Some(g.get_mut("text.wv")?.data_mut()));
                    (gq, gk, gv)
                }
                None => (
                    crate::nn::linear_backward(wq, xi, &dq[i], None),
                    crate::nn::linear_backward(wk, xi, &dk[i], None),
                    crate::nn::linear_backward(wv, xi, &dv[i], None),
                ),
            };
            for c in 0..d {
                dx[i][c] += gq[c] + gk[c] + gv[c];
            }
        }
        let mut out = vec![0.0; cache.len * d];
        for (i, &l) in cache.valid.iter().enumerate() {
            out[l * d..(l + 1) * d].copy_from_slice(&dx[i]);
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
