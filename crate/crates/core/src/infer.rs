//! Graph-free forward pass with a key/value cache, for evaluation only.
//!
//! Many evaluation prompts share a long prefix (instruction and support
//! examples) and differ only in the target suffix; the cache lets the prefix
//! be encoded once.

use crate::autodiff::kernels::{gelu, log_softmax, matmul_acc};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenId};

const LN_EPS: f64 = 1e-5;

/// Per-layer keys and values of an encoded prefix, each `(len, d_model)`.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_rows(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            o[c] = (row[c] - mean) * rs * gain[c] + bias[c];
        }
    }
    out
}

fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out: Vec<f64> = b.iter().copied().cycle().take(n * m).collect();
    matmul_acc(x, w, &mut out, n, k, m);
    out
}

struct Weights<'a>(&'a ParamStore);

impl<'a> Weights<'a> {
    fn get(&self, name: &str) -> Result<&'a [f64]> {
        Ok(self.0.get(name)?.data())
    }
}

impl LanguageModel {
    fn check_inference_tokens(&self, start: usize, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if start + tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: start + tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs `tokens` after the cached prefix. Returns the new keys/values per
    /// layer and the final-normed hidden state of the last token.
    fn extend(&self, cache: &KvCache, tokens: &[TokenId]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        self.check_inference_tokens(cache.len, tokens)?;
        let c = &self.config;
        let w = Weights(&self.params);
        let (d, hd, m) = (c.d_model, c.head_dim(), tokens.len());
        let scale = 1.0 / (hd as f64).sqrt();

        let tok = w.get("tok_emb")?;
        let pos = w.get("pos_emb")?;
        let mut x = vec![0.0; m * d];
        for (i, &t) in tokens.iter().enumerate() {
            let p = cache.len + i;
            for j in 0..d {
                x[i * d + j] = tok[t as usize * d + j] + pos[p * d + j];
            }
        }

        let mut new_keys = Vec::with_capacity(c.n_layers);
        let mut new_values = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let name = |s: &str| format!("layers.{l:02}.{s}");
            let h = layer_norm_rows(&x, w.get(&name("ln1.gain"))?, w.get(&name("ln1.bias"))?, d);
            let qkv = affine(&h, w.get(&name("attn.wqkv"))?, w.get(&name("attn.bqkv"))?, m, d, 3 * d);

            let (ck, cv) = match (cache.keys.get(l), cache.values.get(l)) {
                (Some(k), Some(v)) => (k.as_slice(), v.as_slice()),
                _ => (&[][..], &[][..]),
            };
            let mut keys = Vec::with_capacity(m * d);
            let mut values = Vec::with_capacity(m * d);
            for i in 0..m {
                keys.extend_from_slice(&qkv[i * 3 * d + d..i * 3 * d + 2 * d]);
                values.extend_from_slice(&qkv[i * 3 * d + 2 * d..i * 3 * d + 3 * d]);
            }
            let key_row = |j: usize| -> &[f64] {
                if j < cache.len {
                    &ck[j * d..(j + 1) * d]
                } else {
                    &keys[(j - cache.len) * d..(j - cache.len + 1) * d]
                }
            };
            let value_row = |j: usize| -> &[f64] {
                if j < cache.len {
                    &cv[j * d..(j + 1) * d]
                } else {
                    &values[(j - cache.len) * d..(j - cache.len + 1) * d]
                }
            };

            let mut merged = vec![0.0; m * d];
            for i in 0..m {
                let visible = cache.len + i + 1;
                let q = &qkv[i * 3 * d..i * 3 * d + d];
                for head in 0..c.n_heads {
                    let off = head * hd;
                    let mut att: Vec<f64> = (0..visible)
                        .map(|j| {
                            let k = &key_row(j)[off..off + hd];
                            q[off..off + hd].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                        })
                        .collect();
                    crate::autodiff::kernels::softmax_in_place(&mut att);
                    let out = &mut merged[i * d + off..i * d + off + hd];
                    for (j, &a) in att.iter().enumerate() {
                        for (o, &v) in out.iter_mut().zip(&value_row(j)[off..off + hd]) {
                            *o += a * v;
                        }
                    }
                }
            }
            let a = affine(&merged, w.get(&name("attn.wo"))?, w.get(&name("attn.bo"))?, m, d, d);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

            let h = layer_norm_rows(&x, w.get(&name("ln2.gain"))?, w.get(&name("ln2.bias"))?, d);
            let mut f = affine(&h, w.get(&name("mlp.w1"))?, w.get(&name("mlp.b1"))?, m, d, c.d_ff);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let f = affine(&f, w.get(&name("mlp.w2"))?, w.get(&name("mlp.b2"))?, m, c.d_ff, d);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);

            new_keys.push(keys);
            new_values.push(values);
        }
        let last = layer_norm_rows(&x[(m - 1) * d..], w.get("ln_f.gain")?, w.get("ln_f.bias")?, d);
        Ok((new_keys, new_values, last))
    }

    /// Encodes `prefix` once for reuse with [`Self::next_token_log_probs_after`].
    pub fn encode_prefix(&self, prefix: &[TokenId]) -> Result<KvCache> {
        let (keys, values, _) = self.extend(&KvCache::default(), prefix)?;
        Ok(KvCache {
            len: prefix.len(),
            keys,
            values,
        })
    }

    /// Next-token log-probabilities after `prefix ⧺ suffix`, where `cache`
    /// holds the encoded prefix.
    pub fn next_token_log_probs_after(&self, cache: &KvCache, suffix: &[TokenId]) -> Result<Vec<f64>> {
        let (_, _, h) = self.extend(cache, suffix)?;
        let v = self.config.vocab_size;
        let logits = affine(&h, self.params.get("head.w")?.data(), self.params.get("head.b")?.data(), 1, self.config.d_model, v);
        Ok(log_softmax(&logits))
    }

    /// Graph-free equivalent of `next_token_log_probs`.
    pub fn next_token_log_probs_fast(&self, prompt: &[TokenId]) -> Result<Vec<f64>> {
        self.next_token_log_probs_after(&KvCache::default(), prompt)
    }
}
