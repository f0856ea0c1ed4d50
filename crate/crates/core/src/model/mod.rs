//! Toy masked-language-model encoder built from a [`BackboneSpec`], plus the
//! synthetic corpus and training loop used to score candidates.

mod checkpoint;
mod corpus;
mod train;

pub use corpus::{synth_corpus, Corpus, MASK_TOKEN, NUM_SENTINEL_PAIRS};
pub use train::{
    encode, make_eval_set, mask_batch, mlm_pretrain, proxy_evaluate, EvalSet, MaskedBatch, TrainConfig,
    TrainReport,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{BackboneSpec, InputNode, LayerSpec, SearchSpaceError};
use crate::tensor::{BinaryOp, ParamId, ParamSet, Tape, Tensor, TensorError, UnaryOp, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spec(#[from] SearchSpaceError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name} is missing or has shape {found:?}, expected {expected:?}")]
    Param {
        name: String,
        expected: Vec<usize>,
        found: Option<Vec<usize>>,
    },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub ffn_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            d_model: 64,
            heads: 4,
            vocab: 64,
            seq_len: 32,
            ffn_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2".into());
        }
        if self.seq_len < 8 {
            return bad(format!("seq_len {} < 8", self.seq_len));
        }
        if self.vocab < 16 {
            return bad(format!("vocab {} < 16", self.vocab));
        }
        if self.num_layers == 0 || self.ffn_ratio == 0 {
            return bad("num_layers and ffn_ratio must be positive".into());
        }
        Ok(())
    }
}

pub const INIT_STD: f64 = 0.02;

/// How a parameter is initialized when built from scratch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Ones,
    Zeros,
    Identity,
}

impl Init {
    pub fn tensor<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Ones => Tensor::ones(shape),
            Init::Zeros => Tensor::zeros(shape),
            Init::Identity => Tensor::identity(shape[0]),
        }
    }
}

/// Parameter naming shared by the model and the weight-sharing supernet.
pub mod names {
    use crate::search_space::InputNode;

    pub const TOKEN_EMBED: &str = "embed.token";
    pub const POS_EMBED: &str = "embed.pos";
    pub const EMBED_LN_GAIN: &str = "embed.ln.gain";
    pub const EMBED_LN_BIAS: &str = "embed.ln.bias";

    pub fn proj(layer: usize, input: InputNode) -> String {
        format!("layer{layer}.attn.w_{}", input.name().to_ascii_lowercase())
    }
    pub fn w_o(layer: usize) -> String {
        format!("layer{layer}.attn.w_o")
    }
    pub fn ln1(layer: usize) -> (String, String) {
        (format!("layer{layer}.ln1.gain"), format!("layer{layer}.ln1.bias"))
    }
    pub fn ln2(layer: usize) -> (String, String) {
        (format!("layer{layer}.ln2.gain"), format!("layer{layer}.ln2.bias"))
    }
    pub fn ffn(layer: usize) -> (String, String) {
        (format!("layer{layer}.ffn.w1"), format!("layer{layer}.ffn.w2"))
    }
    pub fn w_glu(layer: usize) -> String {
        format!("layer{layer}.conv.w_glu")
    }
    pub fn kernel(layer: usize) -> String {
        format!("layer{layer}.conv.kernel")
    }
    pub fn transform(layer: usize) -> String {
        format!("layer{layer}.conv.transform")
    }
    pub fn conv_ln(layer: usize) -> (String, String) {
        (format!("layer{layer}.conv.ln.gain"), format!("layer{layer}.conv.ln.bias"))
    }
}

/// One entry of a model's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn slot(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSlot {
    ParamSlot {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn ln_slots((g, b): (String, String), d: usize) -> [ParamSlot; 2] {
    [slot(g, &[d], Init::Ones), slot(b, &[d], Init::Zeros)]
}

/// Every parameter the model for `spec` needs, in canonical order. With
/// `factored_kernels`, conv layers with a kernel below the maximum get a
/// `k×k` transform applied to their kernel.
pub fn param_layout(spec: &BackboneSpec, cfg: &ModelConfig, factored_kernels: bool) -> Vec<ParamSlot> {
    let d = cfg.d_model;
    let mut out = vec![
        slot(names::TOKEN_EMBED, &[cfg.vocab, d], Init::Normal(INIT_STD)),
        slot(names::POS_EMBED, &[cfg.seq_len, d], Init::Normal(INIT_STD)),
    ];
    out.extend(ln_slots((names::EMBED_LN_GAIN.into(), names::EMBED_LN_BIAS.into()), d));
    for (l, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Attention(dag) => {
                for &i in dag.inputs() {
                    out.push(slot(names::proj(l, i), &[d, d], Init::Normal(INIT_STD)));
                }
                out.push(slot(names::w_o(l), &[d, d], Init::Normal(INIT_STD)));
                out.extend(ln_slots(names::ln1(l), d));
                let (w1, w2) = names::ffn(l);
                out.push(slot(w1, &[d, cfg.ffn_ratio * d], Init::Normal(INIT_STD)));
                out.push(slot(w2, &[cfg.ffn_ratio * d, d], Init::Normal(INIT_STD)));
                out.extend(ln_slots(names::ln2(l), d));
            }
            LayerSpec::Conv(k) => {
                out.push(slot(names::w_glu(l), &[d, 2 * d], Init::Normal(INIT_STD)));
                out.push(slot(names::kernel(l), &[*k, d], Init::Normal(INIT_STD)));
                if factored_kernels && *k < crate::search_space::MAX_KERNEL {
                    out.push(slot(names::transform(l), &[*k, *k], Init::Identity));
                }
                out.extend(ln_slots(names::conv_ln(l), d));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
enum KernelParam {
    Direct(ParamId),
    Factored { base: ParamId, transform: ParamId },
}

#[derive(Debug, Clone)]
enum LayerParams {
    Attention {
        proj: [Option<ParamId>; 4],
        w_o: ParamId,
        ln1: (ParamId, ParamId),
        ffn: (ParamId, ParamId),
        ln2: (ParamId, ParamId),
    },
    Conv {
        w_glu: ParamId,
        kernel: KernelParam,
        ln: (ParamId, ParamId),
    },
}

/// Output of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `(batch·n) × vocab`.
    pub logits: Var,
    /// Final-layer token representations, `(batch·n) × d`.
    pub hidden: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: BackboneSpec,
    cfg: ModelConfig,
    pub params: ParamSet,
    embed: (ParamId, ParamId, (ParamId, ParamId)),
    layers: Vec<LayerParams>,
}

impl Model {
    /// Fresh model with every parameter drawn from its layout initializer.
    pub fn random<R: Rng + ?Sized>(spec: &BackboneSpec, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        for s in param_layout(spec, cfg, false) {
            params.insert(s.name, s.init.tensor(&s.shape, rng))?;
        }
        Self::from_params(spec, cfg, params)
    }

    /// Wraps an existing parameter set, checking names and shapes against the spec.
    pub fn from_params(spec: &BackboneSpec, cfg: &ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        spec.validate(usize::MAX)?;
        let d = cfg.d_model;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            match params.id(name) {
                Some(id) if params.get(id).value.shape() == shape => Ok(id),
                other => Err(ModelError::Param {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: other.map(|id| params.get(id).value.shape().to_vec()),
                }),
            }
        };
        let ln = |(g, b): (String, String)| -> Result<(ParamId, ParamId)> { Ok((get(&g, &[d])?, get(&b, &[d])?)) };
        let embed = (
            get(names::TOKEN_EMBED, &[cfg.vocab, d])?,
            get(names::POS_EMBED, &[cfg.seq_len, d])?,
            ln((names::EMBED_LN_GAIN.into(), names::EMBED_LN_BIAS.into()))?,
        );
        let mut layers = Vec::with_capacity(spec.len());
        for (l, layer) in spec.layers.iter().enumerate() {
            layers.push(match layer {
                LayerSpec::Attention(dag) => {
                    let mut proj = [None; 4];
                    for &i in dag.inputs() {
                        proj[i.index()] = Some(get(&names::proj(l, i), &[d, d])?);
                    }
                    let (w1, w2) = names::ffn(l);
                    let f = cfg.ffn_ratio * d;
                    LayerParams::Attention {
                        proj,
                        w_o: get(&names::w_o(l), &[d, d])?,
                        ln1: ln(names::ln1(l))?,
                        ffn: (get(&w1, &[d, f])?, get(&w2, &[f, d])?),
                        ln2: ln(names::ln2(l))?,
                    }
                }
                LayerSpec::Conv(k) => {
                    let base = get(&names::kernel(l), &[*k, d])?;
                    let kernel = match params.id(&names::transform(l)) {
                        Some(_) => KernelParam::Factored {
                            base,
                            transform: get(&names::transform(l), &[*k, *k])?,
                        },
                        None => KernelParam::Direct(base),
                    };
                    LayerParams::Conv {
                        w_glu: get(&names::w_glu(l), &[d, 2 * d])?,
                        kernel,
                        ln: ln(names::conv_ln(l))?,
                    }
                }
            });
        }
        Ok(Self {
            spec: spec.clone(),
            cfg: *cfg,
            params,
            embed,
            layers,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The kernel a conv layer actually applies (before tap normalization).
    pub fn effective_kernel(&self, layer: usize) -> Option<Tensor> {
        match &self.layers.get(layer)? {
            LayerParams::Conv { kernel, .. } => {
                let mut tape = Tape::new();
                let v = self.kernel_var(&mut tape, kernel).ok()?;
                Some(tape.value(v).clone())
            }
            LayerParams::Attention { .. } => None,
        }
    }

    fn kernel_var(&self, tape: &mut Tape, kernel: &KernelParam) -> Result<Var> {
        Ok(match *kernel {
            KernelParam::Direct(id) => tape.param(&self.params, id),
            KernelParam::Factored { base, transform } => {
                let t = tape.param(&self.params, transform);
                let b = tape.param(&self.params, base);
                tape.binary(BinaryOp::Matmul, t, b)?
            }
        })
    }

    /// Runs the encoder over `tokens`, each a sequence of exactly `seq_len` ids.
    pub fn forward(&self, tape: &mut Tape, tokens: &[Vec<usize>]) -> Result<Forward> {
        let cfg = &self.cfg;
        let (n, dh) = (cfg.seq_len, cfg.d_head());
        if tokens.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut flat = Vec::with_capacity(tokens.len() * n);
        for seq in tokens {
            if seq.len() != n {
                return Err(ModelError::Input(format!("sequence length {} != {n}", seq.len())));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= cfg.vocab) {
                return Err(ModelError::Input(format!("token {t} outside vocabulary")));
            }
            flat.extend_from_slice(seq);
        }
        let batch = tokens.len();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();

        let p = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);
        let (tok_id, pos_id, (eg, eb)) = self.embed;
        let tok_table = p(tape, tok_id);
        let pos_table = p(tape, pos_id);
        let tok = tape.gather_rows(tok_table, &flat)?;
        let pos = tape.gather_rows(pos_table, &positions)?;
        let sum = tape.binary(BinaryOp::Add, tok, pos)?;
        let (g, b) = (p(tape, eg), p(tape, eb));
        let mut x = tape.layer_norm(sum, g, b)?;

        for (layer, spec) in self.layers.iter().zip(&self.spec.layers) {
            x = match (layer, spec) {
                (LayerParams::Attention { proj, w_o, ln1, ffn, ln2 }, LayerSpec::Attention(dag)) => {
                    let mut projected: [Option<Var>; 4] = [None; 4];
                    for &i in dag.inputs() {
                        let id = proj[i.index()].expect("projection for declared input");
                        let w = p(tape, id);
                        projected[i.index()] = Some(tape.linear(x, w)?);
                    }
                    let mut seqs = Vec::with_capacity(batch);
                    for s in 0..batch {
                        let mut rows: [Option<Var>; 4] = [None; 4];
                        for &i in dag.inputs() {
                            rows[i.index()] = Some(tape.slice_rows(projected[i.index()].unwrap(), s * n, n)?);
                        }
                        let mut heads = Vec::with_capacity(cfg.heads);
                        for h in 0..cfg.heads {
                            let mut slice_err = None;
                            let mut bind = |tape: &mut Tape, input: InputNode| {
                                let src = rows[input.index()].expect("bound input");
                                match tape.slice_cols(src, h * dh, dh) {
                                    Ok(v) => v,
                                    Err(e) => {
                                        slice_err = Some(e);
                                        src
                                    }
                                }
                            };
                            let out = dag.apply(tape, &mut bind).map_err(|f| f.error)?;
                            if let Some(e) = slice_err {
                                return Err(e.into());
                            }
                            if tape.value(out).shape() != [n, dh] {
                                return Err(ModelError::Input(format!(
                                    "attention dag produced shape {:?}",
                                    tape.value(out).shape()
                                )));
                            }
                            heads.push(out);
                        }
                        seqs.push(tape.concat_cols(&heads)?);
                    }
                    let merged = tape.concat_rows(&seqs)?;
                    let wo = p(tape, *w_o);
                    let attn = tape.linear(merged, wo)?;
                    let res = tape.binary(BinaryOp::Add, x, attn)?;
                    let (g1, b1) = (p(tape, ln1.0), p(tape, ln1.1));
                    let h1 = tape.layer_norm(res, g1, b1)?;
                    let (w1, w2) = (p(tape, ffn.0), p(tape, ffn.1));
                    let up = tape.linear(h1, w1)?;
                    let act = tape.unary(UnaryOp::Softsign, up)?;
                    let down = tape.linear(act, w2)?;
                    let res2 = tape.binary(BinaryOp::Add, h1, down)?;
                    let (g2, b2) = (p(tape, ln2.0), p(tape, ln2.1));
                    tape.layer_norm(res2, g2, b2)?
                }
                (LayerParams::Conv { w_glu, kernel, ln }, LayerSpec::Conv(_)) => {
                    let w = p(tape, *w_glu);
                    let up = tape.linear(x, w)?;
                    let gated = tape.glu(up)?;
                    let k = self.kernel_var(tape, kernel)?;
                    let mut seqs = Vec::with_capacity(batch);
                    for s in 0..batch {
                        let rows = tape.slice_rows(gated, s * n, n)?;
                        seqs.push(tape.depthwise_conv1d(rows, k)?);
                    }
                    let conv = tape.concat_rows(&seqs)?;
                    let res = tape.binary(BinaryOp::Add, x, conv)?;
                    let (g, b) = (p(tape, ln.0), p(tape, ln.1));
                    tape.layer_norm(res, g, b)?
                }
                _ => unreachable!("layer params follow the spec"),
            };
        }

        let emb_t = tape.unary(UnaryOp::Transpose, tok_table)?;
        let logits = tape.binary(BinaryOp::Matmul, x, emb_t)?;
        debug_assert_eq!(tape.value(logits).shape(), [batch * n, cfg.vocab]);
        Ok(Forward { logits, hidden: x })
    }
}
