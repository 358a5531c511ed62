//! Small decoder-only transformer: pre-LN blocks, learned absolute positions,
//! fused QKV projection, causal multi-head attention and a GELU MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::log_softmax;
use crate::autodiff::{GradStore, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

pub type TokenId = u32;

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter shapes by name, in the order they are created.
fn param_layout(c: &LmConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d], Init::Normal),
        ("pos_emb".to_string(), vec![c.max_context, d], Init::Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l:02}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wqkv"), vec![d, 3 * d], Init::Normal),
            (p("attn.bqkv"), vec![3 * d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, c.d_ff], Init::Normal),
            (p("mlp.b1"), vec![c.d_ff], Init::Zeros),
            (p("mlp.w2"), vec![c.d_ff, d], Init::Normal),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d], Init::Ones),
        ("ln_f.bias".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, c.vocab_size], Init::Normal),
        ("head.b".to_string(), vec![c.vocab_size], Init::Zeros),
    ]);
    out
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    // Box-Muller; the second variate is discarded to keep the stream simple.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
}

impl LanguageModel {
    /// Randomly initialized model; the same `(config, seed)` always yields the
    /// same parameters.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => {
                    let mut r = rng::stream(seed, &name, 0);
                    (0..n).map(|_| config.init_std * gaussian(&mut r)).collect()
                }
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they match the config layout.
    pub fn from_params(config: LmConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in layout {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    /// Same architecture, different parameter values (e.g. adapted θ′).
    pub fn with_params(&self, params: ParamStore) -> Self {
        Self {
            config: self.config.clone(),
            params,
        }
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn zero_output_head(&mut self) {
        for name in ["head.w", "head.b"] {
            if let Ok(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
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

    /// Final-layer-normed hidden states, shape `(len, d_model)`.
    pub fn hidden(
        &self,
        g: &mut Graph,
        tokens: &[TokenId],
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let p = &self.params;
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();

        let tok_table = g.param(p, "tok_emb")?;
        let pos_table = g.param(p, "pos_emb")?;
        let tok = g.embed(tok_table, &ids)?;
        let pos = g.embed(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        x = self.maybe_dropout(g, x, dropout.as_deref_mut());

        let d = c.d_model;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..c.n_layers {
            let name = |s: &str| format!("layers.{l:02}.{s}");

            let gain = g.param(p, &name("ln1.gain"))?;
            let bias = g.param(p, &name("ln1.bias"))?;
            let h = g.layer_norm(x, gain, bias)?;
            let wqkv = g.param(p, &name("attn.wqkv"))?;
            let bqkv = g.param(p, &name("attn.bqkv"))?;
            let qkv = g.matmul(h, wqkv)?;
            let qkv = g.add_row(qkv, bqkv)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let q = g.cols(qkv, head * hd, hd)?;
                let k = g.cols(qkv, d + head * hd, hd)?;
                let v = g.cols(qkv, 2 * d + head * hd, hd)?;
                let scores = g.matmul_nt(q, k)?;
                let scores = g.scale(scores, scale);
                let att = g.causal_softmax(scores)?;
                heads.push(g.matmul(att, v)?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let wo = g.param(p, &name("attn.wo"))?;
            let bo = g.param(p, &name("attn.bo"))?;
            let a = g.matmul(merged, wo)?;
            let a = g.add_row(a, bo)?;
            let a = self.maybe_dropout(g, a, dropout.as_deref_mut());
            x = g.add(x, a)?;

            let gain = g.param(p, &name("ln2.gain"))?;
            let bias = g.param(p, &name("ln2.bias"))?;
            let h = g.layer_norm(x, gain, bias)?;
            let w1 = g.param(p, &name("mlp.w1"))?;
            let b1 = g.param(p, &name("mlp.b1"))?;
            let w2 = g.param(p, &name("mlp.w2"))?;
            let b2 = g.param(p, &name("mlp.b2"))?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            let f = self.maybe_dropout(g, f, dropout.as_deref_mut());
            x = g.add(x, f)?;
        }
        let gain = g.param(p, "ln_f.gain")?;
        let bias = g.param(p, "ln_f.bias")?;
        g.layer_norm(x, gain, bias)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut StreamRng>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, r),
            _ => x,
        }
    }

    fn project(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w = g.param(&self.params, "head.w")?;
        let b = g.param(&self.params, "head.b")?;
        let logits = g.matmul(h, w)?;
        g.add_row(logits, b)
    }

    /// Next-token logits at every position, shape `(len, vocab_size)`.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, tokens, None)?;
        let logits = self.project(&mut g, h)?;
        Ok(g.value(logits).clone())
    }

    /// Log-probabilities of the token following `prompt`.
    pub fn next_token_log_probs(&self, prompt: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, prompt, None)?;
        let last = g.select_rows(h, &[prompt.len() - 1])?;
        let logits = self.project(&mut g, last)?;
        Ok(log_softmax(g.value(logits).data()))
    }

    /// Graph node for `-log p(answer | prompt)`, summed over answer tokens.
    pub fn answer_loss(
        &self,
        g: &mut Graph,
        prompt: &[TokenId],
        answer: &[TokenId],
        dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if answer.is_empty() {
            return Err(Error::Empty("answer"));
        }
        let total = prompt.len() + answer.len();
        if total > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: total,
                max: self.config.max_context,
            });
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&answer[..answer.len() - 1]);
        let h = self.hidden(g, &tokens, dropout)?;
        let rows: Vec<usize> = (prompt.len() - 1..tokens.len()).collect();
        let picked = g.select_rows(h, &rows)?;
        let logits = self.project(g, picked)?;
        let targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
        g.cross_entropy(logits, &targets)
    }

    pub fn nll_of_answer(&self, prompt: &[TokenId], answer: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.answer_loss(&mut g, prompt, answer, None)?;
        Ok(g.value(loss).item())
    }

    /// Loss and gradient for one (prompt, answer) pair.
    pub fn loss_and_grad(
        &self,
        prompt: &[TokenId],
        answer: &[TokenId],
        dropout: Option<&mut StreamRng>,
    ) -> Result<(f64, GradStore)> {
        let mut g = Graph::new();
        let loss = self.answer_loss(&mut g, prompt, answer, dropout)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss, &self.params)?;
        Ok((value, grads))
    }

    /// Log-probability of each candidate continuation of `prompt`.
    pub fn score_candidates(&self, prompt: &[TokenId], candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate list"));
        }
        if candidates.iter().any(Vec::is_empty) {
            return Err(Error::Empty("candidate"));
        }
        if candidates.iter().all(|c| c.len() == 1) {
            let lp = self.next_token_log_probs(prompt)?;
            return candidates
                .iter()
                .map(|c| {
                    lp.get(c[0] as usize).copied().ok_or(Error::TokenOutOfRange {
                        id: c[0],
                        vocab: lp.len(),
                    })
                })
                .collect();
        }
        candidates
            .iter()
            .map(|c| self.nll_of_answer(prompt, c).map(|v| -v))
            .collect()
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(vocab: usize) -> LmConfig {
        LmConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_context: 16,
            dropout: 0.0,
            init_std: 0.3,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = small_config(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = LanguageModel::init(small_config(10), 5).unwrap();
        let b = LanguageModel::init(small_config(10), 5).unwrap();
        let c = LanguageModel::init(small_config(10), 6).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn causal_perturbation_leaves_earlier_logits() {
        let m = LanguageModel::init(small_config(12), 1).unwrap();
        let base = [1, 4, 7, 2, 9, 3];
        let logits = m.forward_logits(&base).unwrap();
        for t in 0..base.len() - 1 {
            let mut perturbed = base;
            perturbed[t + 1] = (perturbed[t + 1] + 5) % 12;
            let other = m.forward_logits(&perturbed).unwrap();
            for r in 0..=t {
                assert_eq!(logits.row(r), other.row(r), "position {r} changed after editing {}", t + 1);
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut m = LanguageModel::init(small_config(11), 2).unwrap();
        m.zero_output_head();
        let nll = m.nll_of_answer(&[1, 2, 3], &[4]).unwrap();
        assert!((nll - 11f64.ln()).abs() < 1e-12);
        let scores = m.score_candidates(&[1, 2], &[vec![5], vec![6], vec![7]]).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert_eq!(argmax_first(&scores), 0);
    }

    #[test]
    fn overlong_sequence_is_refused() {
        let m = LanguageModel::init(small_config(10), 3).unwrap();
        let tokens = vec![1; 17];
        assert!(matches!(
            m.forward_logits(&tokens),
            Err(Error::ContextOverflow { len: 17, max: 16 })
        ));
        assert!(m.nll_of_answer(&[1; 15], &[2, 3]).is_err());
    }

    #[test]
    fn empty_inputs_are_errors() {
        let m = LanguageModel::init(small_config(10), 3).unwrap();
        assert!(m.score_candidates(&[1], &[]).is_err());
        assert!(m.nll_of_answer(&[], &[1]).is_err());
        assert!(m.nll_of_answer(&[1], &[]).is_err());
    }

    #[test]
    fn full_vocab_scores_normalize() {
        let m = LanguageModel::init(small_config(9), 4).unwrap();
        let cands: Vec<Vec<TokenId>> = (0..9).map(|t| vec![t]).collect();
        let s = m.score_candidates(&[3, 1, 4], &cands).unwrap();
        let total: f64 = s.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nll_equals_negative_score() {
        let m = LanguageModel::init(small_config(9), 4).unwrap();
        for answer in [vec![2], vec![2, 5], vec![8, 1, 0]] {
            let nll = m.nll_of_answer(&[3, 1, 4], &answer).unwrap();
            let s = m.score_candidates(&[3, 1, 4], &[answer.clone()]).unwrap()[0];
            assert!((nll + s).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_score_difference_is_logit_difference() {
        let m = LanguageModel::init(small_config(9), 8).unwrap();
        let prompt = [1, 2, 3];
        let logits = m.forward_logits(&prompt).unwrap();
        let last = logits.row(2);
        let s = m.score_candidates(&prompt, &[vec![4], vec![5]]).unwrap();
        assert!(((s[0] - s[1]) - (last[4] - last[5])).abs() < 1e-12);
    }

    #[test]
    fn two_token_answer_is_sum_of_stepwise_cross_entropies() {
        let m = LanguageModel::init(small_config(9), 9).unwrap();
        let prompt = [1, 2, 3];
        let answer = [6, 7];
        let step = |ctx: &[TokenId], gold: usize| {
            let logits = m.forward_logits(ctx).unwrap();
            let row = logits.row(ctx.len() - 1);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[gold]
        };
        let oracle = step(&prompt, 6) + step(&[1, 2, 3, 6], 7);
        let nll = m.nll_of_answer(&prompt, &answer).unwrap();
        assert!((nll - oracle).abs() < 1e-12, "{nll} vs {oracle}");
    }

    #[test]
    fn candidate_ranking_matches_chain_product_enumeration() {
        let m = LanguageModel::init(small_config(9), 10).unwrap();
        let prompt = [3, 3, 1];
        let cands = vec![vec![2, 4], vec![5, 5], vec![7, 0, 1]];
        let scores = m.score_candidates(&prompt, &cands).unwrap();
        // brute force: product of next-token probabilities along each candidate
        let probs: Vec<f64> = cands
            .iter()
            .map(|c| {
                let mut ctx = prompt.to_vec();
                let mut p = 1.0;
                for &t in c {
                    let logits = m.forward_logits(&ctx).unwrap();
                    let row = logits.row(ctx.len() - 1);
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    p *= row[t as usize].exp() / z;
                    ctx.push(t);
                }
                p
            })
            .collect();
        for (s, p) in scores.iter().zip(&probs) {
            assert!((s.exp() - p).abs() < 1e-12);
        }
        let mut by_score: Vec<usize> = (0..3).collect();
        by_score.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut by_prob: Vec<usize> = (0..3).collect();
        by_prob.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        assert_eq!(by_score, by_prob);
    }

    /// Straight-line forward for a 1-layer, 1-head model, written without the
    /// graph or the shared kernels.
    fn hand_forward(m: &LanguageModel, tokens: &[usize]) -> Vec<Vec<f64>> {
        let p = |n: &str| m.params.get(n).unwrap().data().to_vec();
        let d = m.config.d_model;
        let ff = m.config.d_ff;
        let v = m.config.vocab_size;
        let n = tokens.len();
        let tok = p("tok_emb");
        let pos = p("pos_emb");
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter()
                .enumerate()
                .map(|(i, a)| (a - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        };
        let lin = |x: &[f64], w: &[f64], b: &[f64], outd: usize| -> Vec<f64> {
            (0..outd)
                .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * outd + j]).sum::<f64>())
                .collect()
        };
        let mut xs: Vec<Vec<f64>> = (0..n)
            .map(|t| (0..d).map(|i| tok[tokens[t] * d + i] + pos[t * d + i]).collect())
            .collect();
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, &p("layers.00.ln1.gain"), &p("layers.00.ln1.bias"))).collect();
        let qkv: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, &p("layers.00.attn.wqkv"), &p("layers.00.attn.bqkv"), 3 * d)).collect();
        for t in 0..n {
            let scores: Vec<f64> = (0..=t)
                .map(|s| (0..d).map(|i| qkv[t][i] * qkv[s][d + i]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let ctx: Vec<f64> = (0..d)
                .map(|i| (0..=t).map(|s| e[s] / z * qkv[s][2 * d + i]).sum())
                .collect();
            let o = lin(&ctx, &p("layers.00.attn.wo"), &p("layers.00.attn.bo"), d);
            for i in 0..d {
                xs[t][i] += o[i];
            }
        }
        let c = 0.797_884_560_802_865_4;
        for x in xs.iter_mut() {
            let h = ln(x, &p("layers.00.ln2.gain"), &p("layers.00.ln2.bias"));
            let f1: Vec<f64> = lin(&h, &p("layers.00.mlp.w1"), &p("layers.00.mlp.b1"), ff)
                .into_iter()
                .map(|a| 0.5 * a * (1.0 + (c * (a + 0.044715 * a * a * a)).tanh()))
                .collect();
            let f2 = lin(&f1, &p("layers.00.mlp.w2"), &p("layers.00.mlp.b2"), d);
            for i in 0..d {
                x[i] += f2[i];
            }
        }
        xs.iter()
            .map(|x| lin(&ln(x, &p("ln_f.gain"), &p("ln_f.bias")), &p("head.w"), &p("head.b"), v))
            .collect()
    }

    #[test]
    fn one_layer_one_head_matches_hand_forward() {
        let mut c = small_config(7);
        c.n_layers = 1;
        c.n_heads = 1;
        let m = LanguageModel::init(c, 12).unwrap();
        let tokens = [2usize, 6, 1];
        let oracle = hand_forward(&m, &tokens);
        let ids: Vec<TokenId> = tokens.iter().map(|&t| t as TokenId).collect();
        let logits = m.forward_logits(&ids).unwrap();
        for (r, row) in oracle.iter().enumerate() {
            for (a, b) in row.iter().zip(logits.row(r)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
