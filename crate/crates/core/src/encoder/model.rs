//! Seeded pre-norm transformer encoder with `<s>`-row attention capture.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{SpanMap, TokenizedDocument, Tokenizer, DEFAULT_VOCAB_SIZE};
use crate::calibration::{calibrate_row_in_place, partition_keys, CalibrationConfig};
use crate::corpus::{DocumentSpec, Segment, DEFAULT_LANGUAGES};
use crate::error::{Error, Result};
use crate::scalar::{dot, kahan_sum, Scalar};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final hidden state of `<s>`.
    #[default]
    StartToken,
    /// Mean of the final hidden states of content tokens.
    Mean,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::StartToken => "start",
            Pooling::Mean => "mean",
        }
    }
}

/// Optional positional prior on the `<s>` query row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionBias {
    #[default]
    None,
    /// Adds `strength * (1 - k / (L - 1))` to the pre-softmax logit of key `k`
    /// in the `<s>` row of every layer and head.
    FrontLoaded { strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layer_count: usize,
    pub head_count: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub languages: Vec<String>,
    pub max_positions: usize,
    pub pooling: Pooling,
    pub init_seed: u64,
    pub attention_bias: AttentionBias,
    /// Reference mode: no positional encoding and uniform attention for every
    /// query, which makes embeddings invariant to segment order.
    pub order_invariant: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layer_count: 12,
            head_count: 4,
            model_dim: 64,
            ffn_dim: 128,
            vocab_size: DEFAULT_VOCAB_SIZE,
            languages: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            max_positions: 1024,
            pooling: Pooling::StartToken,
            init_seed: 0,
            attention_bias: AttentionBias::None,
            order_invariant: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.head_count == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.head_count) {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if self.max_positions < 3 {
            return Err(Error::InvalidArgument("max_positions must be >= 3".into()));
        }
        if let AttentionBias::FrontLoaded { strength } = self.attention_bias {
            if !strength.is_finite() {
                return Err(Error::InvalidArgument("bias strength must be finite".into()));
            }
        }
        Ok(())
    }

    /// Stable identifier of the architecture and weights.
    pub fn model_id(&self) -> String {
        let mut id = format!(
            "mini-L{}-H{}-d{}-f{}-v{}-{}-s{}",
            self.layer_count,
            self.head_count,
            self.model_dim,
            self.ffn_dim,
            self.vocab_size,
            self.pooling.as_str(),
            self.init_seed
        );
        if let AttentionBias::FrontLoaded { strength } = self.attention_bias {
            id.push_str(&format!("-front{strength}"));
        }
        if self.order_invariant {
            id.push_str("-bag");
        }
        id
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput<T> {
    /// Final-layer states, one `d`-vector per token.
    pub hidden_states: Vec<Vec<T>>,
    pub pooled: Vec<T>,
    /// `attention_rows[layer][head]`: the `<s>` query's attention over all
    /// keys as used for value aggregation (after calibration, if any).
    pub attention_rows: Vec<Vec<Vec<T>>>,
    pub span_map: SpanMap,
    pub pooling: Pooling,
    pub calibration_applied: Option<CalibrationConfig>,
}

struct Layer<T> {
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    w1: Vec<T>,
    w2: Vec<T>,
}

/// Randomly initialised encoder; weights are fixed by `init_seed`.
pub struct MiniEncoder<T> {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    token_embeddings: Vec<T>,
    layers: Vec<Layer<T>>,
    forward_passes: AtomicUsize,
}

impl<T> std::fmt::Debug for MiniEncoder<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MiniEncoder").field("config", &self.config).finish_non_exhaustive()
    }
}

fn normal_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect()
}

/// `x · W` for row-major `W` of shape `x.len() × out`.
fn project<T: Scalar>(x: &[T], w: &[T], out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); out];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn layer_norm<T: Scalar>(x: &[T]) -> Vec<T> {
    let n = T::from_usize_lossy(x.len());
    let mean = kahan_sum(x.iter().copied()) / n;
    let var = kahan_sum(x.iter().map(|&v| (v - mean) * (v - mean))) / n;
    let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
    x.iter().map(|&v| (v - mean) * inv).collect()
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    T::lit(0.5) * x * (T::one() + (c * (x + T::lit(0.044_715) * x * x * x)).tanh())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    row.iter_mut().for_each(|v| *v = (*v - max).exp());
    let sum = kahan_sum(row.iter().copied());
    row.iter_mut().for_each(|v| *v /= sum);
}

fn sinusoid<T: Scalar>(pos: usize, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|i| {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

impl<T: Scalar> MiniEncoder<T> {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.vocab_size, config.languages.clone())?;
        let d = config.model_dim;
        let f = config.ffn_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let token_embeddings = normal_matrix(&mut rng, config.vocab_size, d, 1.0);
        // Residual branches are scaled down so token identity survives depth.
        let branch = 1.0 / ((2 * config.layer_count) as f64).sqrt();
        let in_std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layer_count)
            .map(|_| Layer {
                wq: normal_matrix(&mut rng, d, d, in_std),
                wk: normal_matrix(&mut rng, d, d, in_std),
                wv: normal_matrix(&mut rng, d, d, in_std),
                wo: normal_matrix(&mut rng, d, d, in_std * branch),
                w1: normal_matrix(&mut rng, d, f, in_std),
                w2: normal_matrix(&mut rng, f, d, branch / (f as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            config,
            tokenizer,
            token_embeddings,
            layers,
            forward_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn model_id(&self) -> String {
        self.config.model_id()
    }

    /// Forward passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn encode(&self, doc: &TokenizedDocument, calibration: Option<&CalibrationConfig>) -> Result<EncodeOutput<T>> {
        self.forward(doc, calibration, None)
    }

    /// Like [`encode`](Self::encode), also returning the residual stream after
    /// every layer (`layer_states[l][token]`, before the final norm).
    pub fn encode_traced(
        &self,
        doc: &TokenizedDocument,
        calibration: Option<&CalibrationConfig>,
    ) -> Result<(EncodeOutput<T>, Vec<Vec<Vec<T>>>)> {
        let mut trace = Vec::with_capacity(self.config.layer_count);
        let out = self.forward(doc, calibration, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward(
        &self,
        doc: &TokenizedDocument,
        calibration: Option<&CalibrationConfig>,
        mut trace: Option<&mut Vec<Vec<Vec<T>>>>,
    ) -> Result<EncodeOutput<T>> {
        let len = doc.ids.len();
        if len == 0 {
            return Err(Error::EmptyText);
        }
        if len > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = doc.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        let calibration = match calibration {
            Some(c) if !c.calibrated_layers.is_empty() => {
                c.validate_for(self.config.layer_count)?;
                Some(c)
            }
            _ => None,
        };
        let partition = calibration.map(|c| partition_keys(len, c.basket_size)).transpose()?;

        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let d = self.config.model_dim;
        let heads = self.config.head_count;
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();

        let mut x: Vec<Vec<T>> = doc
            .ids
            .iter()
            .enumerate()
            .map(|(p, &id)| {
                let e = &self.token_embeddings[id as usize * d..(id as usize + 1) * d];
                if self.config.order_invariant {
                    e.to_vec()
                } else {
                    e.iter().zip(sinusoid::<T>(p, d)).map(|(&a, b)| a + b).collect()
                }
            })
            .collect();

        let bias: Option<Vec<T>> = match self.config.attention_bias {
            AttentionBias::FrontLoaded { strength } if !self.config.order_invariant => Some(
                (0..len)
                    .map(|k| {
                        let frac = if len > 1 { k as f64 / (len - 1) as f64 } else { 0.0 };
                        T::lit(strength * (1.0 - frac))
                    })
                    .collect(),
            ),
            _ => None,
        };

        let mut attention_rows = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let layer_no = li + 1;
            let h: Vec<Vec<T>> = x.iter().map(|r| layer_norm(r)).collect();
            let v: Vec<Vec<T>> = h.iter().map(|r| project(r, &layer.wv, d)).collect();
            let mut mixed = vec![vec![T::zero(); d]; len];
            let mut layer_rows = Vec::with_capacity(heads);

            if self.config.order_invariant {
                let w = T::one() / T::from_usize_lossy(len);
                let mut mean = vec![T::zero(); d];
                for row in &v {
                    for (m, &val) in mean.iter_mut().zip(row) {
                        *m += val * w;
                    }
                }
                mixed.iter_mut().for_each(|r| r.clone_from(&mean));
                layer_rows.extend((0..heads).map(|_| vec![w; len]));
            } else {
                let q: Vec<Vec<T>> = h.iter().map(|r| project(r, &layer.wq, d)).collect();
                let k: Vec<Vec<T>> = h.iter().map(|r| project(r, &layer.wk, d)).collect();
                let calibrate_here = calibration.is_some_and(|c| c.applies_to(layer_no));
                for head in 0..heads {
                    let cols = head * dh..(head + 1) * dh;
                    for r in 0..len {
                        let qr = &q[r][cols.clone()];
                        let mut row: Vec<T> = k.iter().map(|kc| dot(qr, &kc[cols.clone()]) * scale).collect();
                        if r == 0 {
                            if let Some(b) = &bias {
                                row.iter_mut().zip(b).for_each(|(s, &bv)| *s += bv);
                            }
                        }
                        softmax_in_place(&mut row);
                        if r == 0 && calibrate_here {
                            let (Some(c), Some(p)) = (calibration, partition.as_ref()) else {
                                unreachable!("calibrate_here implies a partition");
                            };
                            calibrate_row_in_place(&mut row, p, c.mass_mode)?;
                        }
                        let out = &mut mixed[r][cols.clone()];
                        for (a, vc) in row.iter().zip(&v) {
                            for (o, &val) in out.iter_mut().zip(&vc[cols.clone()]) {
                                *o += *a * val;
                            }
                        }
                        if r == 0 {
                            layer_rows.push(row);
                        }
                    }
                }
            }
            attention_rows.push(layer_rows);

            for (xr, m) in x.iter_mut().zip(&mixed) {
                let o = project(m, &layer.wo, d);
                xr.iter_mut().zip(o).for_each(|(a, b)| *a += b);
                let hidden: Vec<T> = project(&layer_norm(xr), &layer.w1, self.config.ffn_dim)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let f = project(&hidden, &layer.w2, d);
                xr.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(x.clone());
            }
        }

        let hidden_states: Vec<Vec<T>> = x.iter().map(|r| layer_norm(r)).collect();
        let pooled = match self.config.pooling {
            Pooling::StartToken => hidden_states[0].clone(),
            Pooling::Mean => {
                let content: Vec<&Vec<T>> = doc
                    .span_map
                    .spans()
                    .iter()
                    .flat_map(|s| &hidden_states[s.clone()])
                    .collect();
                mean_of(&content, d)?
            }
        };
        Ok(EncodeOutput {
            hidden_states,
            pooled,
            attention_rows,
            span_map: doc.span_map.clone(),
            pooling: self.config.pooling,
            calibration_applied: calibration.cloned(),
        })
    }

    pub fn tokenize_parts(&self, parts: &[(&str, &str)]) -> Result<TokenizedDocument> {
        self.tokenizer.tokenize(parts)
    }

    pub fn encode_document(&self, document: &DocumentSpec, calibration: Option<&CalibrationConfig>) -> Result<EncodeOutput<T>> {
        let tokens = self.tokenizer.tokenize(&document.tokenizer_parts())?;
        self.encode(&tokens, calibration)
    }

    pub fn embed_document(&self, document: &DocumentSpec, calibration: Option<&CalibrationConfig>) -> Result<Vec<T>> {
        Ok(self.encode_document(document, calibration)?.pooled)
    }

    /// Embedding of a segment encoded on its own.
    pub fn embed_segment_standalone(&self, segment: &Segment, calibration: Option<&CalibrationConfig>) -> Result<Vec<T>> {
        let tokens = self.tokenizer.tokenize(&[(&segment.text, &segment.language)])?;
        Ok(self.encode(&tokens, calibration)?.pooled)
    }
}

fn mean_of<T: Scalar>(rows: &[&Vec<T>], d: usize) -> Result<Vec<T>> {
    if rows.is_empty() {
        return Err(Error::EmptyText);
    }
    let n = T::from_usize_lossy(rows.len());
    Ok((0..d).map(|j| kahan_sum(rows.iter().map(|r| r[j])) / n).collect())
}

/// Mean of the final states over the span of 1-based `position`.
pub fn contextualized_segment_embedding<T: Scalar>(out: &EncodeOutput<T>, position: usize) -> Result<Vec<T>> {
    if out.pooling != Pooling::Mean {
        return Err(Error::RequiresMeanPooling);
    }
    let span = out.span_map.span(position)?;
    let d = out.pooled.len();
    let rows: Vec<&Vec<T>> = out.hidden_states[span].iter().collect();
    mean_of(&rows, d)
}
