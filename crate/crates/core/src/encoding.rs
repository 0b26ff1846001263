//! Prompt wrapping, tokenization and the reference mask encoder.
//!
//! Every input is wrapped as
//! `[CLS] It was 1 level:[MASK] ... D level:[MASK]. <text> [SEP]` so the
//! encoder produces one hidden vector per hierarchy depth. The reference
//! encoder mean-pools (dropped-out) token embeddings over the text span and
//! maps the pooled vector through a per-depth affine layer and `tanh`.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Literal words of the template, after the reserved tokens.
const TEMPLATE_WORDS: [&str; 4] = ["it", "was", "level:", "."];

pub const DEFAULT_TRUNCATE_LENGTH: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("input has no content tokens")]
    EmptyContent,
    #[error("prompt prefix of {prefix} tokens does not fit truncate length {limit}")]
    PromptTooLong { prefix: usize, limit: usize },
    #[error("wrapped input is malformed: {0}")]
    Malformed(String),
    #[error("encoder expects depth {expected}, input carries {found} masks")]
    DepthMismatch { expected: usize, found: usize },
    #[error("token id {0} outside the embedding table")]
    TokenOutOfRange(usize),
}

/// `[CLS] It was 1 level:[MASK] 2 level:[MASK]. <text> [SEP]` for `depth` slots.
pub fn wrap_template(text: &str, depth: usize) -> String {
    assert!(depth >= 1, "template needs at least one mask slot");
    let slots: Vec<String> = (1..=depth).map(|d| format!("{d} level:{MASK}")).collect();
    format!("{CLS} It was {}. {text} {SEP}", slots.join(" "))
}

/// Lowercased whitespace tokens, with the bracketed special tokens split out
/// wherever they are glued to neighbouring characters.
pub fn split_tokens(s: &str) -> Vec<String> {
    let mut spaced = s.to_string();
    for special in [CLS, SEP, MASK] {
        spaced = spaced.replace(special, &format!(" {special} "));
    }
    spaced
        .split_whitespace()
        .map(|t| {
            if t == CLS || t == SEP || t == MASK || t == UNK {
                t.to_string()
            } else {
                t.to_lowercase()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens take ids 0..3, the template words follow, then the
    /// depth numerals `1..=depth`, then every corpus token in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, depth: usize) -> Self {
        let mut tokens: Vec<String> = [CLS, SEP, MASK, UNK]
            .iter()
            .chain(TEMPLATE_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        tokens.extend((1..=depth).map(|d| d.to_string()));
        let fixed: BTreeSet<String> = tokens.iter().cloned().collect();
        let corpus: BTreeSet<String> = texts
            .into_iter()
            .flat_map(split_tokens)
            .filter(|t| !fixed.contains(t))
            .collect();
        tokens.extend(corpus);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// JSON object `token -> id`.
    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::Value::Object(map).to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, EncodeError> {
        let map: HashMap<String, usize> =
            serde_json::from_str(text).map_err(|e| EncodeError::Malformed(e.to_string()))?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| EncodeError::Malformed(format!("id {i} is not dense")))?;
            *slot = t;
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedInput {
    pub ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub content_span: Range<usize>,
}

impl WrappedInput {
    pub fn content(&self) -> &[usize] {
        &self.ids[self.content_span.clone()]
    }
}

/// Tokenizes a wrapped string. The prompt ends at the `.` that follows the
/// last mask slot; the content runs from there to the closing `[SEP]`.
/// Content is truncated so the sequence fits `truncate_length`.
pub fn tokenize(vocab: &Vocab, wrapped: &str, truncate_length: usize) -> Result<WrappedInput, EncodeError> {
    let tokens = split_tokens(wrapped);
    if tokens.first().map(String::as_str) != Some(CLS) {
        return Err(EncodeError::Malformed("missing leading [CLS]".into()));
    }
    if tokens.last().map(String::as_str) != Some(SEP) {
        return Err(EncodeError::Malformed("missing trailing [SEP]".into()));
    }
    let mut mask_positions = Vec::new();
    let mut prompt_end = None;
    for (i, t) in tokens.iter().enumerate() {
        if t == MASK {
            mask_positions.push(i);
        } else if t == "." && i > 0 && tokens[i - 1] == MASK {
            prompt_end = Some(i + 1);
            break;
        }
    }
    let prompt_end =
        prompt_end.ok_or_else(|| EncodeError::Malformed("prompt is not closed by `.`".into()))?;
    if mask_positions.is_empty() {
        return Err(EncodeError::Malformed("no mask slots".into()));
    }
    // prompt + [SEP] must fit; masks precede the content so they never get cut.
    if prompt_end + 1 > truncate_length {
        return Err(EncodeError::PromptTooLong {
            prefix: prompt_end + 1,
            limit: truncate_length,
        });
    }
    let content_end = (tokens.len() - 1).min(truncate_length - 1);
    let mut ids: Vec<usize> = tokens[..content_end].iter().map(|t| vocab.id(t)).collect();
    ids.push(SEP_ID);
    Ok(WrappedInput {
        ids,
        mask_positions,
        content_span: prompt_end..content_end,
    })
}

/// Hidden vectors at the `D` mask positions, depth order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHiddenStates(pub Vec<Array1<f64>>);

impl MaskHiddenStates {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn at(&self, depth_index: usize) -> ArrayView1<'_, f64> {
        self.0[depth_index].view()
    }
}

/// Anything that can turn a wrapped input into per-depth mask states.
pub trait MaskEncoder {
    fn depth(&self) -> usize;
    fn hidden_size(&self) -> usize;
    fn encode(
        &self,
        input: &WrappedInput,
        rng: &mut dyn RngCore,
        train_mode: bool,
    ) -> Result<MaskHiddenStates, EncodeError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    /// `|V| x r`
    pub embeddings: Array2<f64>,
    /// One `r x r` projection per depth.
    pub projections: Vec<Array2<f64>>,
    /// One length-`r` bias per depth.
    pub biases: Vec<Array1<f64>>,
    pub dropout: f64,
}

/// Forward values needed to backpropagate one encoding.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    tokens: Vec<usize>,
    /// Per token occurrence, per coordinate: 0 or `1/(1-rho)`; `None` when dropout is off.
    keep_scale: Option<Array2<f64>>,
    pooled: Array1<f64>,
    states: MaskHiddenStates,
}

impl EncodeTrace {
    pub fn states(&self) -> &MaskHiddenStates {
        &self.states
    }

    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }
}

/// Gradients with the same layout as [`ToyEncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embeddings: Array2<f64>,
    pub projections: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(p: &ToyEncoderParams) -> Self {
        Self {
            embeddings: Array2::zeros(p.embeddings.raw_dim()),
            projections: p.projections.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            biases: p.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

impl ToyEncoderParams {
    /// Entries uniform in (-0.1, 0.1); projections get the identity added.
    pub fn init(vocab_size: usize, hidden: usize, depth: usize, dropout: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&dropout), "dropout must lie in [0, 1)");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect() };
        let embeddings = Array2::from_shape_vec((vocab_size, hidden), uniform(vocab_size * hidden))
            .expect("shape matches");
        let projections = (0..depth)
            .map(|_| {
                Array2::from_shape_vec((hidden, hidden), uniform(hidden * hidden)).expect("shape matches")
                    + Array2::<f64>::eye(hidden)
            })
            .collect();
        let biases = (0..depth).map(|_| Array1::from(uniform(hidden))).collect();
        Self {
            embeddings,
            projections,
            biases,
            dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.nrows()
    }

    /// Forward pass that keeps what [`ToyEncoderParams::backward`] needs.
    pub fn encode_traced(
        &self,
        input: &WrappedInput,
        rng: &mut dyn RngCore,
        train_mode: bool,
    ) -> Result<EncodeTrace, EncodeError> {
        if input.mask_positions.len() != self.projections.len() {
            return Err(EncodeError::DepthMismatch {
                expected: self.projections.len(),
                found: input.mask_positions.len(),
            });
        }
        let tokens = input.content().to_vec();
        if tokens.is_empty() {
            return Err(EncodeError::EmptyContent);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(EncodeError::TokenOutOfRange(bad));
        }
        let r = self.hidden();
        let keep_scale = if train_mode && self.dropout > 0.0 {
            let scale = 1.0 / (1.0 - self.dropout);
            let mut m = Array2::zeros((tokens.len(), r));
            for v in m.iter_mut() {
                *v = if rng.gen::<f64>() < self.dropout { 0.0 } else { scale };
            }
            Some(m)
        } else {
            None
        };
        let mut pooled = Array1::<f64>::zeros(r);
        for (i, &t) in tokens.iter().enumerate() {
            let row = self.embeddings.row(t);
            match &keep_scale {
                Some(k) => pooled += &(&row * &k.row(i)),
                None => pooled += &row,
            }
        }
        pooled /= tokens.len() as f64;
        let states = self
            .projections
            .iter()
            .zip(&self.biases)
            .map(|(a, u)| (a.dot(&pooled) + u).mapv(f64::tanh))
            .collect();
        Ok(EncodeTrace {
            tokens,
            keep_scale,
            pooled,
            states: MaskHiddenStates(states),
        })
    }

    /// Accumulates parameter gradients given `dL/dh^d` for every depth.
    pub fn backward(&self, trace: &EncodeTrace, grad_states: &[Array1<f64>], grads: &mut EncoderGrads) {
        let r = self.hidden();
        let mut grad_pooled = Array1::<f64>::zeros(r);
        for (d, g) in grad_states.iter().enumerate() {
            let h = &trace.states.0[d];
            let pre = g * &h.mapv(|v| 1.0 - v * v);
            for i in 0..r {
                for j in 0..r {
                    grads.projections[d][[i, j]] += pre[i] * trace.pooled[j];
                }
            }
            grads.biases[d] += &pre;
            grad_pooled += &self.projections[d].t().dot(&pre);
        }
        grad_pooled /= trace.tokens.len() as f64;
        for (i, &t) in trace.tokens.iter().enumerate() {
            let mut row = grads.embeddings.row_mut(t);
            match &trace.keep_scale {
                Some(k) => row += &(&grad_pooled * &k.row(i)),
                None => row += &grad_pooled,
            }
        }
    }

    /// Two independent dropout draws over the same input.
    pub fn encode_two_views(
        &self,
        input: &WrappedInput,
        rng: &mut dyn RngCore,
    ) -> Result<(EncodeTrace, EncodeTrace), EncodeError> {
        let first = self.encode_traced(input, rng, true)?;
        let second = self.encode_traced(input, rng, true)?;
        Ok((first, second))
    }
}

impl MaskEncoder for ToyEncoderParams {
    fn depth(&self) -> usize {
        self.projections.len()
    }

    fn hidden_size(&self) -> usize {
        self.hidden()
    }

    fn encode(
        &self,
        input: &WrappedInput,
        rng: &mut dyn RngCore,
        train_mode: bool,
    ) -> Result<MaskHiddenStates, EncodeError> {
        Ok(self.encode_traced(input, rng, train_mode)?.states)
    }
}
