//! Transformer encoder, autoregressive NMT decoder and unmasked CMLM decoder.

mod params;

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PaddedSeqs, Vocab};
use crate::tensor::{Array, AttentionMask, Graph, ParamId, Tensor, TensorError};

pub use params::{ParamEntry, ParamGroup, ParamStore};
use params::{Init, ParamSource};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("row {row} is empty")]
    EmptyInput { row: usize },
    #[error("row {row} has {len} tokens, limit is {max}")]
    TooLong { row: usize, len: usize, max: usize },
    #[error("{what}: expected {expected} rows, got {got}")]
    RowMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row {row} has no masked position")]
    NoMaskedPosition { row: usize },
    #[error("row {row} position {pos}: gold token uses the [M] id")]
    MaskCollision { row: usize, pos: usize },
    #[error("row {row}: masked position {pos} outside length {len}")]
    MaskOutOfRange { row: usize, pos: usize, len: usize },
    #[error("parameters: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f64,
    /// Longest source or target sentence, excluding [BOS]/[EOS].
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            d_ffn: 128,
            n_heads: 4,
            vocab_src: 36,
            vocab_tgt: 36,
            dropout: 0.1,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_tgt <= Vocab::RESERVED || self.vocab_src <= Vocab::RESERVED {
            return Err(ModelError::InvalidConfig(
                "vocabularies must hold the reserved tokens plus at least one word".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Dropout state for one forward pass: a seeded stream in training mode, nothing in evaluation mode.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn train(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn with_rng(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn apply<'g>(&mut self, t: Tensor<'g>) -> Result<Tensor<'g>> {
        Ok(t.dropout(self.p, self.rng.as_mut())?)
    }
}

#[derive(Debug, Clone)]
struct LayerNormP {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AttnP {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnP {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayerP {
    attn: AttnP,
    ln1: LayerNormP,
    ffn: FfnP,
    ln2: LayerNormP,
}

#[derive(Debug, Clone)]
struct DecLayerP {
    self_attn: AttnP,
    ln1: LayerNormP,
    cross: AttnP,
    ln2: LayerNormP,
    ffn: FfnP,
    ln3: LayerNormP,
}

#[derive(Debug, Clone)]
struct EncoderP {
    emb: ParamId,
    layers: Vec<EncLayerP>,
}

#[derive(Debug, Clone)]
struct DecoderP {
    emb: ParamId,
    layers: Vec<DecLayerP>,
    /// Output projection, `[d_model, vocab_tgt]`, no bias.
    proj: ParamId,
}

struct Builder<'a> {
    src: ParamSource<'a>,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn take(&mut self, name: String, group: ParamGroup, shape: &[usize], init: Init) -> Result<ParamId> {
        self.src
            .take(name, group, shape, init)
            .map_err(ModelError::Params)
    }

    fn layer_norm(&mut self, prefix: &str, group: ParamGroup) -> Result<LayerNormP> {
        let d = self.cfg.d_model;
        Ok(LayerNormP {
            gain: self.take(format!("{prefix}.gain"), group, &[d], Init::Ones)?,
            bias: self.take(format!("{prefix}.bias"), group, &[d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup) -> Result<AttnP> {
        let d = self.cfg.d_model;
        let w = |b: &mut Self, n: &str| b.take(format!("{prefix}.{n}"), group, &[d, d], Init::Xavier);
        let wq = w(self, "wq")?;
        let wk = w(self, "wk")?;
        let wv = w(self, "wv")?;
        let wo = w(self, "wo")?;
        let z = |b: &mut Self, n: &str| b.take(format!("{prefix}.{n}"), group, &[d], Init::Zeros);
        Ok(AttnP {
            wq,
            bq: z(self, "bq")?,
            wk,
            bk: z(self, "bk")?,
            wv,
            bv: z(self, "bv")?,
            wo,
            bo: z(self, "bo")?,
        })
    }

    fn ffn(&mut self, prefix: &str, group: ParamGroup) -> Result<FfnP> {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ffn);
        Ok(FfnP {
            w1: self.take(format!("{prefix}.w1"), group, &[d, f], Init::Xavier)?,
            b1: self.take(format!("{prefix}.b1"), group, &[f], Init::Zeros)?,
            w2: self.take(format!("{prefix}.w2"), group, &[f, d], Init::Xavier)?,
            b2: self.take(format!("{prefix}.b2"), group, &[d], Init::Zeros)?,
        })
    }

    fn encoder(&mut self, prefix: &str, group: ParamGroup) -> Result<EncoderP> {
        let d = self.cfg.d_model;
        let emb = self.take(
            format!("{prefix}.emb"),
            group,
            &[self.cfg.vocab_src, d],
            Init::Normal((d as f64).powf(-0.5)),
        )?;
        let layers = (0..self.cfg.encoder_layers)
            .map(|l| {
                Ok(EncLayerP {
                    attn: self.attn(&format!("{prefix}.{l}.attn"), group)?,
                    ln1: self.layer_norm(&format!("{prefix}.{l}.ln1"), group)?,
                    ffn: self.ffn(&format!("{prefix}.{l}.ffn"), group)?,
                    ln2: self.layer_norm(&format!("{prefix}.{l}.ln2"), group)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderP { emb, layers })
    }

    fn decoder(&mut self, prefix: &str, group: ParamGroup) -> Result<DecoderP> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_tgt;
        let emb = self.take(format!("{prefix}.emb"), group, &[v, d], Init::Normal((d as f64).powf(-0.5)))?;
        let layers = (0..self.cfg.decoder_layers)
            .map(|l| {
                Ok(DecLayerP {
                    self_attn: self.attn(&format!("{prefix}.{l}.self_attn"), group)?,
                    ln1: self.layer_norm(&format!("{prefix}.{l}.ln1"), group)?,
                    cross: self.attn(&format!("{prefix}.{l}.cross"), group)?,
                    ln2: self.layer_norm(&format!("{prefix}.{l}.ln2"), group)?,
                    ffn: self.ffn(&format!("{prefix}.{l}.ffn"), group)?,
                    ln3: self.layer_norm(&format!("{prefix}.{l}.ln3"), group)?,
                })
            })
            .collect::<Result<_>>()?;
        let proj = self.take(format!("{prefix}.proj"), group, &[d, v], Init::Xavier)?;
        Ok(DecoderP { emb, layers, proj })
    }
}

const ENC: &str = "enc";
const NMT_ENC: &str = "nmt_enc";
const NMT_DEC: &str = "nmt_dec";
const CMLM_DEC: &str = "cmlm_dec";

/// Which encoder feeds a decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    /// θ_e: the shared encoder (the CMLM's encoder once separated).
    Shared,
    /// The NMT model's encoder: θ_ne when it exists, θ_e otherwise.
    Nmt,
}

/// All parameter groups plus their wiring.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "BundleState", into = "BundleState")]
pub struct ModelBundle {
    config: ModelConfig,
    store: ParamStore,
    encoder: EncoderP,
    nmt_encoder: Option<EncoderP>,
    nmt_decoder: DecoderP,
    cmlm_decoder: DecoderP,
}

/// Equal configs, wiring and parameter values.
impl PartialEq for ModelBundle {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.nmt_encoder.is_some() == o.nmt_encoder.is_some()
            && self.store == o.store
    }
}

#[derive(Serialize, Deserialize)]
struct BundleState {
    config: ModelConfig,
    separate_nmt_encoder: bool,
    params: Vec<ParamEntry>,
}

impl From<ModelBundle> for BundleState {
    fn from(b: ModelBundle) -> Self {
        Self {
            config: b.config,
            separate_nmt_encoder: b.nmt_encoder.is_some(),
            params: b.store.into_entries(),
        }
    }
}

impl TryFrom<BundleState> for ModelBundle {
    type Error = ModelError;

    fn try_from(s: BundleState) -> Result<Self> {
        ModelBundle::from_params(s.config, s.separate_nmt_encoder, s.params)
    }
}

impl ModelBundle {
    /// Fresh model. `separate_nmt_encoder` gives the NMT model its own independently
    /// initialised encoder from the start (the no-sharing ablation).
    pub fn new(config: ModelConfig, seed: u64, separate_nmt_encoder: bool) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, nmt_encoder, nmt_decoder, cmlm_decoder) = {
            let mut b = Builder {
                src: ParamSource::Init {
                    store: &mut store,
                    rng: &mut rng,
                },
                cfg: &config,
            };
            let encoder = b.encoder(ENC, ParamGroup::Encoder)?;
            let nmt_encoder = if separate_nmt_encoder {
                Some(b.encoder(NMT_ENC, ParamGroup::NmtEncoder)?)
            } else {
                None
            };
            let nmt_decoder = b.decoder(NMT_DEC, ParamGroup::NmtDecoder)?;
            let cmlm_decoder = b.decoder(CMLM_DEC, ParamGroup::CmlmDecoder)?;
            (encoder, nmt_encoder, nmt_decoder, cmlm_decoder)
        };
        Ok(Self {
            config,
            store,
            encoder,
            nmt_encoder,
            nmt_decoder,
            cmlm_decoder,
        })
    }

    /// Rebuilds the wiring over stored parameters, checking names, groups and shapes.
    pub fn from_params(config: ModelConfig, separate_nmt_encoder: bool, params: Vec<ParamEntry>) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::from_entries(params);
        let (encoder, nmt_encoder, nmt_decoder, cmlm_decoder) = {
            let mut b = Builder {
                src: ParamSource::Lookup { store: &store },
                cfg: &config,
            };
            let encoder = b.encoder(ENC, ParamGroup::Encoder)?;
            let nmt_encoder = if separate_nmt_encoder {
                Some(b.encoder(NMT_ENC, ParamGroup::NmtEncoder)?)
            } else {
                None
            };
            (
                encoder,
                nmt_encoder,
                b.decoder(NMT_DEC, ParamGroup::NmtDecoder)?,
                b.decoder(CMLM_DEC, ParamGroup::CmlmDecoder)?,
            )
        };
        let bundle = Self {
            config,
            store,
            encoder,
            nmt_encoder,
            nmt_decoder,
            cmlm_decoder,
        };
        let expected = bundle.count_wired();
        if expected != bundle.store.len() {
            return Err(ModelError::Params(format!(
                "{} stored parameters but the model uses {expected}",
                bundle.store.len()
            )));
        }
        Ok(bundle)
    }

    fn count_wired(&self) -> usize {
        let enc = 1 + self.config.encoder_layers * (8 + 4 + 4);
        let dec = 2 + self.config.decoder_layers * (16 + 4 + 6);
        enc * (1 + self.nmt_encoder.is_some() as usize) + 2 * dec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_separate_nmt_encoder(&self) -> bool {
        self.nmt_encoder.is_some()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Encoder];
        if self.nmt_encoder.is_some() {
            g.push(ParamGroup::NmtEncoder);
        }
        g.extend([ParamGroup::NmtDecoder, ParamGroup::CmlmDecoder]);
        g
    }

    /// Gives the NMT model its own encoder initialised as a value copy of θ_e.
    /// Returns false (and changes nothing) if it already has one.
    pub fn separate_encoder(&mut self) -> Result<bool> {
        if self.nmt_encoder.is_some() {
            return Ok(false);
        }
        let copies: Vec<(String, Array)> = self
            .store
            .entries()
            .iter()
            .filter(|e| e.group == ParamGroup::Encoder)
            .map(|e| {
                let rest = e.name.strip_prefix(ENC).expect("encoder prefix");
                (format!("{NMT_ENC}{rest}"), e.value.clone())
            })
            .collect();
        for (name, value) in copies {
            self.store.push(name, ParamGroup::NmtEncoder, value);
        }
        let mut b = Builder {
            src: ParamSource::Lookup { store: &self.store },
            cfg: &self.config,
        };
        self.nmt_encoder = Some(b.encoder(NMT_ENC, ParamGroup::NmtEncoder)?);
        Ok(true)
    }

    /// Zeroes a decoder's output projection.
    pub fn zero_projection(&mut self, which: DecoderKind) {
        let id = match which {
            DecoderKind::Nmt => self.nmt_decoder.proj,
            DecoderKind::Cmlm => self.cmlm_decoder.proj,
        };
        self.store.value_mut(id).data_mut().fill(0.0);
    }

    fn encoder_for(&self, role: EncoderRole) -> &EncoderP {
        match (role, &self.nmt_encoder) {
            (EncoderRole::Nmt, Some(e)) => e,
            _ => &self.encoder,
        }
    }

    fn check_ids(&self, seqs: &PaddedSeqs, vocab: usize, max: usize) -> Result<()> {
        for r in 0..seqs.rows {
            let row = seqs.row(r);
            if row.is_empty() {
                return Err(ModelError::EmptyInput { row: r });
            }
            if row.len() > max {
                return Err(ModelError::TooLong {
                    row: r,
                    len: row.len(),
                    max,
                });
            }
            if let Some(&id) = row.iter().find(|&&id| id >= vocab) {
                return Err(ModelError::OutOfVocab { id, vocab });
            }
        }
        Ok(())
    }

    /// Source token rows `h^(L_e)`, one per (row, position) of the padded source.
    pub fn encode<'g>(
        &self,
        b: &Binder<'g, '_>,
        role: EncoderRole,
        src: &PaddedSeqs,
        drop: &mut Dropout,
    ) -> Result<Encoded<'g>> {
        if src.rows == 0 {
            return Err(ModelError::EmptyInput { row: 0 });
        }
        self.check_ids(src, self.config.vocab_src, self.config.max_len)?;
        let p = self.encoder_for(role);
        let (rows, width) = (src.rows, src.width);
        let mut h = self.embed(b, p.emb, &src.ids, rows, width, drop)?;
        let mask = AttentionMask::padding(&src.lens, width, width, false);
        for layer in &p.layers {
            let a = self.attention(b, &layer.attn, h, h, rows, width, width, &mask)?;
            h = add_norm(b, h, drop.apply(a)?, &layer.ln1)?;
            let f = ffn(b, &layer.ffn, h)?;
            h = add_norm(b, h, drop.apply(f)?, &layer.ln2)?;
        }
        Ok(Encoded {
            states: h,
            lens: src.lens.clone(),
            width,
        })
    }

    /// Raw NMT logits `[rows * width, vocab_tgt]` for a padded decoder input under the causal mask.
    pub fn nmt_logits<'g>(
        &self,
        b: &Binder<'g, '_>,
        enc: &Encoded<'g>,
        dec_in: &PaddedSeqs,
        drop: &mut Dropout,
    ) -> Result<Tensor<'g>> {
        self.check_ids(dec_in, self.config.vocab_tgt, self.config.max_len + 1)?;
        self.decode(b, &self.nmt_decoder, enc, dec_in, true, drop)
    }

    /// Teacher-forced NMT distributions for every gold position, [EOS] included.
    pub fn nmt_forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        enc: &Encoded<'g>,
        tgt: &PaddedSeqs,
        drop: &mut Dropout,
    ) -> Result<NmtOutput<'g>> {
        let tf = TeacherForcing::new(tgt);
        let logits = self.nmt_logits(b, enc, &tf.input, drop)?;
        Ok(NmtOutput {
            probs: logits.softmax()?,
            teacher: tf,
        })
    }

    /// CMLM distributions at exactly the masked positions of `batch`, in row-major order.
    pub fn cmlm_forward<'g>(
        &self,
        b: &Binder<'g, '_>,
        enc: &Encoded<'g>,
        batch: &MaskedBatch,
        drop: &mut Dropout,
    ) -> Result<CmlmOutput<'g>> {
        self.check_ids(&batch.observed, self.config.vocab_tgt, self.config.max_len)?;
        let logits = self.decode(b, &self.cmlm_decoder, enc, &batch.observed, false, drop)?;
        let width = batch.observed.width;
        let rows: Vec<usize> = batch
            .positions()
            .map(|(r, t)| r * width + t)
            .collect();
        Ok(CmlmOutput {
            probs: logits.gather_rows(&rows)?.softmax()?,
            positions: batch.positions().collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn decode<'g>(
        &self,
        b: &Binder<'g, '_>,
        p: &DecoderP,
        enc: &Encoded<'g>,
        input: &PaddedSeqs,
        causal: bool,
        drop: &mut Dropout,
    ) -> Result<Tensor<'g>> {
        if input.rows != enc.rows() {
            return Err(ModelError::RowMismatch {
                what: "decoder input vs source",
                expected: enc.rows(),
                got: input.rows,
            });
        }
        let (rows, width) = (input.rows, input.width);
        let mut h = self.embed(b, p.emb, &input.ids, rows, width, drop)?;
        let self_mask = AttentionMask::padding(&input.lens, width, width, causal);
        let cross_mask = AttentionMask::padding(&enc.lens, width, enc.width, false);
        for layer in &p.layers {
            let a = self.attention(b, &layer.self_attn, h, h, rows, width, width, &self_mask)?;
            h = add_norm(b, h, drop.apply(a)?, &layer.ln1)?;
            let c = self.attention(b, &layer.cross, h, enc.states, rows, width, enc.width, &cross_mask)?;
            h = add_norm(b, h, drop.apply(c)?, &layer.ln2)?;
            let f = ffn(b, &layer.ffn, h)?;
            h = add_norm(b, h, drop.apply(f)?, &layer.ln3)?;
        }
        Ok(h.matmul(b.get(p.proj))?)
    }

    fn embed<'g>(
        &self,
        b: &Binder<'g, '_>,
        table: ParamId,
        ids: &[usize],
        rows: usize,
        width: usize,
        drop: &mut Dropout,
    ) -> Result<Tensor<'g>> {
        let d = self.config.d_model;
        let e = b.get(table).embedding(ids)?.scale((d as f64).sqrt())?;
        let pe = positional_encoding(width, d);
        let mut tiled = Vec::with_capacity(rows * width * d);
        for _ in 0..rows {
            tiled.extend_from_slice(&pe);
        }
        let pe = b.graph.constant_from(vec![rows * width, d], tiled)?;
        drop.apply(e.add(pe)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'g>(
        &self,
        b: &Binder<'g, '_>,
        p: &AttnP,
        q_in: Tensor<'g>,
        kv_in: Tensor<'g>,
        rows: usize,
        tq: usize,
        tk: usize,
        mask: &AttentionMask,
    ) -> Result<Tensor<'g>> {
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let q = q_in.matmul(b.get(p.wq))?.add_row(b.get(p.bq))?.split_heads(rows, tq, h)?;
        let k = kv_in.matmul(b.get(p.wk))?.add_row(b.get(p.bk))?.split_heads(rows, tk, h)?;
        let v = kv_in.matmul(b.get(p.wv))?.add_row(b.get(p.bv))?.split_heads(rows, tk, h)?;
        let scores = q.bmm(k, true, 1.0 / (dh as f64).sqrt())?;
        let ctx = scores.masked_softmax(mask)?.bmm(v, false, 1.0)?.merge_heads(rows, tq, h)?;
        Ok(ctx.matmul(b.get(p.wo))?.add_row(b.get(p.bo))?)
    }
}

fn add_norm<'g>(b: &Binder<'g, '_>, x: Tensor<'g>, sub: Tensor<'g>, ln: &LayerNormP) -> Result<Tensor<'g>> {
    Ok(x.add(sub)?.layer_norm(b.get(ln.gain), b.get(ln.bias))?)
}

fn ffn<'g>(b: &Binder<'g, '_>, p: &FfnP, x: Tensor<'g>) -> Result<Tensor<'g>> {
    Ok(x.matmul(b.get(p.w1))?
        .add_row(b.get(p.b1))?
        .relu()?
        .matmul(b.get(p.w2))?
        .add_row(b.get(p.b2))?)
}

/// Sinusoidal table `[len, d]`, row-major.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Nmt,
    Cmlm,
}

/// Hands out graph leaves for bundle parameters, once per graph.
///
/// Parameters in a trainable group become gradient-carrying leaves on a recording graph;
/// everything else enters as a constant.
pub struct Binder<'g, 'm> {
    graph: &'g Graph,
    store: &'m ParamStore,
    trainable: Vec<ParamGroup>,
    cache: RefCell<Vec<Option<Tensor<'g>>>>,
}

impl<'g, 'm> Binder<'g, 'm> {
    pub fn new(graph: &'g Graph, bundle: &'m ModelBundle, trainable: &[ParamGroup]) -> Self {
        Self {
            graph,
            store: &bundle.store,
            trainable: trainable.to_vec(),
            cache: RefCell::new(vec![None; bundle.store.len()]),
        }
    }

    /// Every parameter as a constant.
    pub fn frozen(graph: &'g Graph, bundle: &'m ModelBundle) -> Self {
        Self::new(graph, bundle, &[])
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Tensor<'g> {
        if let Some(t) = self.cache.borrow()[id.0] {
            return t;
        }
        let entry = self.store.get(id);
        let t = if self.graph.is_recording() && self.trainable.contains(&entry.group) {
            self.graph.param(id, &entry.value)
        } else {
            self.graph.constant(&entry.value)
        };
        self.cache.borrow_mut()[id.0] = Some(t);
        t
    }
}

/// Encoder output `[rows * width, d_model]` plus the source lengths needed for masking.
#[derive(Clone)]
pub struct Encoded<'g> {
    pub states: Tensor<'g>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl<'g> Encoded<'g> {
    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    /// Rows picked (and possibly repeated) by index, e.g. to replicate a source across beams.
    pub fn select(&self, rows: &[usize]) -> Result<Encoded<'g>> {
        let mut idx = Vec::with_capacity(rows.len() * self.width);
        for &r in rows {
            idx.extend(r * self.width..(r + 1) * self.width);
        }
        Ok(Encoded {
            states: self.states.gather_rows(&idx)?,
            lens: rows.iter().map(|&r| self.lens[r]).collect(),
            width: self.width,
        })
    }
}

/// Decoder input `[BOS] + y` and targets `y + [EOS]`.
#[derive(Debug, Clone)]
pub struct TeacherForcing {
    pub input: PaddedSeqs,
    /// `rows * input.width` entries; `None` on padding.
    pub gold: Vec<Option<usize>>,
}

impl TeacherForcing {
    pub fn new(tgt: &PaddedSeqs) -> Self {
        let shifted: Vec<Vec<usize>> = (0..tgt.rows)
            .map(|r| std::iter::once(Vocab::BOS_ID).chain(tgt.row(r).iter().copied()).collect())
            .collect();
        let input = PaddedSeqs::from_seqs(shifted.iter().map(|s| s.as_slice()), Vocab::PAD_ID);
        let mut gold = vec![None; input.rows * input.width];
        for r in 0..tgt.rows {
            let y = tgt.row(r);
            for (t, &id) in y.iter().enumerate() {
                gold[r * input.width + t] = Some(id);
            }
            gold[r * input.width + y.len()] = Some(Vocab::EOS_ID);
        }
        Self { input, gold }
    }

    pub fn width(&self) -> usize {
        self.input.width
    }

    /// Flat row of the distribution predicting `y_t` (or [EOS] when `t == |y|`).
    pub fn index(&self, row: usize, t: usize) -> usize {
        row * self.input.width + t
    }
}

pub struct NmtOutput<'g> {
    /// `[rows * width, vocab_tgt]`; padding rows are present but carry no gold token.
    pub probs: Tensor<'g>,
    pub teacher: TeacherForcing,
}

/// A target batch split into observed tokens and [M] placeholders.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    /// `y_o`: gold words with masked positions replaced by [M].
    pub observed: PaddedSeqs,
    pub gold: PaddedSeqs,
    /// Sorted masked positions per row.
    pub masked: Vec<Vec<usize>>,
}

impl MaskedBatch {
    pub fn new(gold: &PaddedSeqs, masked: Vec<Vec<usize>>) -> Result<Self> {
        if masked.len() != gold.rows {
            return Err(ModelError::RowMismatch {
                what: "mask sets vs targets",
                expected: gold.rows,
                got: masked.len(),
            });
        }
        let mut observed = gold.clone();
        let mut sorted = Vec::with_capacity(masked.len());
        for (r, mut set) in masked.into_iter().enumerate() {
            let len = gold.lens[r];
            if let Some(pos) = gold.row(r).iter().position(|&id| id == Vocab::MASK_ID) {
                return Err(ModelError::MaskCollision { row: r, pos });
            }
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(ModelError::NoMaskedPosition { row: r });
            }
            if let Some(&pos) = set.iter().find(|&&p| p >= len) {
                return Err(ModelError::MaskOutOfRange { row: r, pos, len });
            }
            for &p in &set {
                observed.ids[r * gold.width + p] = Vocab::MASK_ID;
            }
            sorted.push(set);
        }
        Ok(Self {
            observed,
            gold: gold.clone(),
            masked: sorted,
        })
    }

    /// `(row, position)` of every masked token, row-major.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.masked
            .iter()
            .enumerate()
            .flat_map(|(r, set)| set.iter().map(move |&t| (r, t)))
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }

    pub fn gold_at(&self, row: usize, t: usize) -> usize {
        self.gold.ids[row * self.gold.width + t]
    }
}

pub struct CmlmOutput<'g> {
    /// `[masked_count, vocab_tgt]`, one row per entry of `positions`.
    pub probs: Tensor<'g>,
    pub positions: Vec<(usize, usize)>,
}
